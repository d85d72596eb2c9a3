import numpy as np
import pytest

from cellhier.data import ModalitySpec, ProfileEntry, generate_synthetic
from cellhier.trainer import TrainConfig, init_params, make_batch, prepare

SMALL_PROFILE = (
    ProfileEntry(ModalitySpec("fp", "molecular", 4, "binary")),
    ProfileEntry(ModalitySpec("g2", "molecular", 3)),
    ProfileEntry(ModalitySpec("cell", "cellular", 3), 0.4),
    ProfileEntry(ModalitySpec("gene", "gene", 2, "binary"), 0.5),
)

ACCEPTANCE_LINES: list[str] = []


def small_problem(seed=0, n=6, dim=4, depth=3, profile=SMALL_PROFILE, **overrides):
    """A tiny dataset, its prepared form, initial params and one full batch."""
    values = dict(dim=dim, depth=depth, batch_size=n, walk_length=3, k=2, seed=seed, similarity_modality="g2")
    values.update(overrides)
    config = TrainConfig(**values)
    ds = generate_synthetic(n, profile, latent_dim=3, seed=seed)
    data = prepare(ds, config)
    params = init_params(ds, config)
    batch = make_batch(data, np.arange(n), config, np.random.default_rng([seed, 99]))
    return config, ds, data, params, batch


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    flat, out = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b), initial=0.0) / max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8))


@pytest.fixture
def tiny():
    return small_problem()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
