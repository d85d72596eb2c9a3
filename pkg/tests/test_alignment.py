import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellhier.alignment import ProjectedBatch, Projector, ScaConfig, info_nce, project, sca_loss, vicreg
from cellhier.exceptions import ZeroNormError

from conftest import numeric_grad, rel_err


def brute_info_nce(a, p, tau):
    """Loop oracle: -1/N sum_i log softmax_i(cos(a_i, p_.) / tau)[i]."""
    n = len(a)
    total = 0.0
    for i in range(n):
        sims = [float(a[i] @ p[j] / (np.linalg.norm(a[i]) * np.linalg.norm(p[j]))) / tau for j in range(n)]
        denom = sum(math.exp(s) for s in sims)
        total -= math.log(math.exp(sims[i]) / denom)
    return total / n


def brute_vicreg(z, zp):
    n, d = z.shape
    inv = sum(float(np.sum((z[i] - zp[i]) ** 2)) for i in range(n)) / n
    mean = z.mean(axis=0)
    var_term = 0.0
    cov = np.zeros((d, d))
    for a in range(d):
        var_term += max(0.0, 1.0 - sum((z[i, a] - mean[a]) ** 2 for i in range(n)) / n)
        for b in range(d):
            cov[a, b] = sum(z[i, a] * z[i, b] for i in range(n)) / n - mean[a] * mean[b]
    return inv + var_term + float(np.sum((cov - np.eye(d)) ** 2))


def test_project_examples():
    x = np.array([2.0, 3.0])
    np.testing.assert_array_equal(project(Projector(np.eye(2), np.zeros(2)), x), x)
    np.testing.assert_array_equal(project(Projector(np.zeros((2, 2)), [4.0, 5.0]), x), [4.0, 5.0])
    np.testing.assert_array_equal(project(Projector([[1.0, 1.0]], [0.0]), x), [5.0])
    with pytest.raises(ValueError, match="length"):
        project(Projector(np.eye(2), np.zeros(2)), np.ones(3))
    with pytest.raises(ValueError):
        Projector([[np.inf, 0.0]], [0.0])


def test_info_nce_single_sample_is_zero():
    loss, ga, gp = info_nce([[1.0, 2.0]], [[3.0, -1.0]], 0.5)
    assert loss == 0.0
    assert np.all(ga == 0) and np.all(gp == 0)


def test_info_nce_orthogonal_pair():
    a = np.eye(2)
    loss, _, _ = info_nce(a, a, 1.0)
    assert abs(loss - (-math.log(math.e / (math.e + 1)))) < 1e-12
    assert abs(loss - brute_info_nce(a, a, 1.0)) < 1e-12


def test_info_nce_decreases_with_temperature_on_orthogonal_rows():
    a = np.eye(3)
    losses = [info_nce(a, a, t)[0] for t in (1.0, 0.5, 0.1)]
    oracle = [brute_info_nce(a, a, t) for t in (1.0, 0.5, 0.1)]
    np.testing.assert_allclose(losses, oracle, rtol=0, atol=1e-12)
    assert losses[0] > losses[1] > losses[2] > 0


def test_info_nce_zero_row():
    with pytest.raises(ZeroNormError) as info:
        info_nce([[1.0, 0.0], [0.0, 0.0]], np.eye(2))
    assert info.value.row == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6), d=st.integers(1, 5), tau=st.sampled_from([0.1, 0.5, 1.0]))
def test_info_nce_matches_oracle_and_finite_differences(seed, n, d, tau):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d)) + 0.1
    p = rng.standard_normal((n, d)) + 0.1
    loss, ga, gp = info_nce(a, p, tau)
    assert loss >= 0
    assert abs(loss - brute_info_nce(a, p, tau)) < 1e-10
    assert rel_err(ga, numeric_grad(lambda: info_nce(a, p, tau)[0], a)) < 1e-4
    assert rel_err(gp, numeric_grad(lambda: info_nce(a, p, tau)[0], p)) < 1e-4
    scaled = a.copy()
    scaled[0] *= 3.7
    assert abs(info_nce(scaled, p, tau)[0] - loss) < 1e-12


def test_vicreg_closed_forms():
    z = np.array([[1.0], [-1.0]])
    res = vicreg(z, z)
    assert (res.loss, res.invariance, res.variance, res.covariance) == (0.0, 0.0, 0.0, 0.0)
    zero = np.zeros((2, 1))
    res = vicreg(zero, zero)
    assert abs(res.loss - 2.0) < 1e-12 and res.variance == 1.0 and res.covariance == 1.0


def test_vicreg_shift_only_changes_invariance():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 3))
    s = np.array([0.5, -1.0, 2.0])
    base, shifted = vicreg(z, z), vicreg(z, z + s)
    assert abs(shifted.invariance - s @ s) < 1e-12
    assert shifted.variance == base.variance and shifted.covariance == base.covariance


def test_vicreg_zero_on_whitened_input():
    z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    assert vicreg(z, z).loss == 0.0


def test_vicreg_needs_two_samples():
    with pytest.raises(ValueError):
        vicreg([[1.0]], [[1.0]])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 6), d=st.integers(1, 5), scale=st.sampled_from([0.3, 1.0, 3.0]))
def test_vicreg_matches_oracle_and_finite_differences(seed, n, d, scale):
    rng = np.random.default_rng(seed)
    z = scale * rng.standard_normal((n, d))
    zp = scale * rng.standard_normal((n, d))
    res = vicreg(z, zp)
    assert abs(res.loss - brute_vicreg(z, zp)) < 1e-10
    var = z.var(axis=0)
    if np.any(np.abs(var - 1.0) < 1e-4):
        return  # hinge kink within the difference step
    assert rel_err(res.grad_z, numeric_grad(lambda: vicreg(z, zp).loss, z)) < 1e-4
    assert rel_err(res.grad_zp, numeric_grad(lambda: vicreg(z, zp).loss, zp)) < 1e-4


def test_anchor_is_sum_and_linear():
    rng = np.random.default_rng(1)
    mol = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 2))}
    batch = ProjectedBatch(mol)
    np.testing.assert_array_equal(batch.anchor, mol["a"] + mol["b"])
    delta = np.array([0.25, -0.5])
    bumped = {"a": mol["a"].copy(), "b": mol["b"]}
    bumped["a"][1] += delta
    np.testing.assert_allclose(ProjectedBatch(bumped).anchor - batch.anchor, [[0, 0], delta, [0, 0]], atol=1e-15)


def test_sca_composes_oracles():
    a = np.eye(2)
    batch = ProjectedBatch({"m": a}, {"c": a.copy()}, {"c": a.copy()})
    res = sca_loss(batch, ["c"], ScaConfig(temperature=1.0))
    ia = brute_info_nce(a, a, 1.0)
    da = brute_vicreg(a, a)
    assert abs(res.instance - ia) < 1e-12 and abs(res.distribution - da) < 1e-12
    assert abs(res.loss - (ia + da)) < 1e-12
    assert vicreg(a, a).invariance == 0.0


def test_sca_toggles():
    rng = np.random.default_rng(2)
    m, c, aug = (rng.standard_normal((4, 3)) for _ in range(3))
    batch = ProjectedBatch({"m": m}, {"c": c}, {"c": aug})
    full = sca_loss(batch, ["c"])
    no_da = sca_loss(batch, ["c"], ScaConfig(vicreg_enabled=False))
    no_ia = sca_loss(batch, ["c"], ScaConfig(infonce_enabled=False))
    assert no_da.loss == full.instance and no_da.distribution == 0.0
    assert no_ia.loss == full.distribution and no_ia.instance == 0.0
    with pytest.raises(ValueError):
        sca_loss(batch, [])


def test_sca_gradients_by_finite_differences():
    rng = np.random.default_rng(3)
    mols = {"m1": rng.standard_normal((5, 3)), "m2": rng.standard_normal((5, 3))}
    cell = {"c1": 2 * rng.standard_normal((5, 3)), "c2": 2 * rng.standard_normal((5, 3))}
    aug = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in cell.items()}
    cfg = ScaConfig(temperature=0.3)

    def value():
        return sca_loss(ProjectedBatch(mols, cell, aug), ["c1", "c2"], cfg).loss

    grads = sca_loss(ProjectedBatch(mols, cell, aug), ["c1", "c2"], cfg).grads
    for name in mols:
        assert rel_err(grads.molecular[name], numeric_grad(value, mols[name])) < 1e-4
    for name in cell:
        assert rel_err(grads.cellular[name], numeric_grad(value, cell[name])) < 1e-4
        assert rel_err(grads.augmented[name], numeric_grad(value, aug[name])) < 1e-4
