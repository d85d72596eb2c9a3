"""Multi-modal molecule datasets: schema, missingness, synthetic generation and I/O.

A dataset holds one feature vector per (molecule, modality). Molecular modalities
(fingerprints, graph features, conformations) are always present; external
biological modalities (cell morphology, gene perturbation, expression) may be
absent, encoded as ``None``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from os import PathLike
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import (
    DatasetError,
    DimensionMismatchError,
    MalformedRecordError,
    UnknownModalityError,
)

MODALITY_KINDS = ("molecular", "cellular", "gene", "gene_expression")
VALUE_DOMAINS = ("binary", "continuous")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    dim: int
    value_domain: str = "continuous"

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("modality name must be a non-empty string")
        if self.kind not in MODALITY_KINDS:
            raise ValueError(f"unknown modality kind {self.kind!r}; expected one of {MODALITY_KINDS}")
        if self.value_domain not in VALUE_DOMAINS:
            raise ValueError(f"unknown value domain {self.value_domain!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"modality {self.name!r}: dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))

    @property
    def is_molecular(self) -> bool:
        return self.kind == "molecular"

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "dim": self.dim, "value_domain": self.value_domain}


@dataclass(frozen=True, eq=False)
class MoleculeRecord:
    """One molecule. ``features[name]`` is a read-only float vector or ``None`` (absent)."""

    id: str
    features: Mapping[str, np.ndarray | None]
    label: float | None = None

    def __post_init__(self):
        frozen = {}
        for name, value in self.features.items():
            if value is None:
                frozen[name] = None
            else:
                arr = np.array(value, dtype=np.float64).reshape(-1)
                arr.setflags(write=False)
                frozen[name] = arr
        object.__setattr__(self, "features", MappingProxyType(frozen))
        if self.label is not None:
            object.__setattr__(self, "label", float(self.label))

    def is_observed(self, name: str) -> bool:
        return self.features.get(name) is not None

    def __eq__(self, other):
        if not isinstance(other, MoleculeRecord):
            return NotImplemented
        if self.id != other.id or self.label != other.label:
            return False
        if set(self.features) != set(other.features):
            return False
        for name, a in self.features.items():
            b = other.features[name]
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    specs: tuple[ModalitySpec, ...]
    records: tuple[MoleculeRecord, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "seed", int(self.seed))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise DatasetError(f"duplicate modality names in {names}")
        if not self.records:
            raise DatasetError("a dataset needs at least one record")
        by_name = {s.name: s for s in self.specs}
        filled = []
        for i, rec in enumerate(self.records):
            for name, value in rec.features.items():
                spec = by_name.get(name)
                if spec is None:
                    raise UnknownModalityError(name, i)
                if value is None:
                    continue
                if value.shape[0] != spec.dim:
                    raise DimensionMismatchError(name, spec.dim, value.shape[0], i)
                if not np.all(np.isfinite(value)):
                    raise MalformedRecordError(f"modality {name!r} has non-finite values", i)
                if spec.value_domain == "binary" and not np.all((value == 0) | (value == 1)):
                    raise MalformedRecordError(f"binary modality {name!r} has values outside {{0, 1}}", i)
            for spec in self.specs:
                if spec.is_molecular and rec.features.get(spec.name) is None:
                    raise MalformedRecordError(f"molecular modality {spec.name!r} is absent", i)
            if set(rec.features) != set(names):
                feats = {n: rec.features.get(n) for n in names}
                rec = MoleculeRecord(rec.id, feats, rec.label)
            filled.append(rec)
        object.__setattr__(self, "records", tuple(filled))

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.specs == other.specs and self.seed == other.seed and self.records == other.records

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def modality_names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def molecular_names(self) -> list[str]:
        return [s.name for s in self.specs if s.is_molecular]

    @property
    def external_names(self) -> list[str]:
        return [s.name for s in self.specs if not s.is_molecular]

    def spec(self, name: str) -> ModalitySpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise UnknownModalityError(name)

    def labels(self) -> np.ndarray:
        """Labels as a float array; missing labels become NaN."""
        return np.array([np.nan if r.label is None else r.label for r in self.records])


@dataclass(frozen=True)
class ProfileEntry:
    """A modality to synthesize, its missing rate and the key of its linear map.

    Entries sharing ``map_key`` (and dimension) share the same random linear map.
    """

    spec: ModalitySpec
    missing_rate: float = 0.0
    map_key: str | None = None


# Missing rates mimic a sparse screening corpus: one well-covered cell-morphology modality,
# the rest almost entirely absent.
DEFAULT_PROFILE = (
    ProfileEntry(ModalitySpec("fp1d", "molecular", 32, "binary")),
    ProfileEntry(ModalitySpec("graph2d", "molecular", 16)),
    ProfileEntry(ModalitySpec("conf3d", "molecular", 16)),
    ProfileEntry(ModalitySpec("cp_jump", "cellular", 16), 0.1254),
    ProfileEntry(ModalitySpec("cp_bray", "cellular", 16), 0.9137),
    ProfileEntry(ModalitySpec("g_crispr", "gene", 8), 0.9943),
    ProfileEntry(ModalitySpec("g_orf", "gene", 8), 0.9945),
    ProfileEntry(ModalitySpec("l1000", "gene_expression", 16), 0.9425),
)


def _as_entry(item) -> ProfileEntry:
    if isinstance(item, ProfileEntry):
        return item
    if isinstance(item, Mapping):
        item = dict(item)
        rate = item.pop("missing_rate", 0.0)
        key = item.pop("map_key", None)
        return ProfileEntry(ModalitySpec(**item), rate, key)
    return ProfileEntry(*item)


def _map_seed(key: str) -> int:
    return zlib.crc32(key.encode("utf-8"))


def generate_synthetic(
    n_molecules: int,
    spec_profile: Iterable = DEFAULT_PROFILE,
    latent_dim: int = 8,
    noise_scale: float = 0.5,
    seed: int = 0,
) -> Dataset:
    """Sample a dataset from a shared-latent linear model.

    Every molecule draws ``z ~ N(0, I)``; modality features are ``A z + noise``
    with a fixed random map ``A`` per modality (thresholded at 0 for binary
    modalities). External modalities are then dropped independently per
    (molecule, modality) at their missing rate. The label is ``w . z + noise``.
    """
    entries = [_as_entry(e) for e in spec_profile]
    if n_molecules < 1:
        raise ValueError("n_molecules must be positive")
    if latent_dim < 1:
        raise ValueError("latent_dim must be positive")
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    for e in entries:
        if not 0.0 <= e.missing_rate <= 1.0:
            raise ValueError(f"modality {e.spec.name!r}: missing_rate {e.missing_rate} outside [0, 1]")
        if e.spec.is_molecular and e.missing_rate > 0:
            raise ValueError(f"molecular modality {e.spec.name!r} cannot have a missing rate")

    z = np.random.default_rng([seed, 0]).standard_normal((n_molecules, latent_dim))
    columns = {}
    observed = {}
    for idx, e in enumerate(entries):
        key = e.map_key if e.map_key is not None else e.spec.name
        a = np.random.default_rng([seed, 1, _map_seed(key), e.spec.dim]).standard_normal(
            (e.spec.dim, latent_dim)
        ) / np.sqrt(latent_dim)
        noise = np.random.default_rng([seed, 2, idx]).standard_normal((n_molecules, e.spec.dim))
        x = z @ a.T + noise_scale * noise
        if e.spec.value_domain == "binary":
            x = (x > 0).astype(np.float64)
        columns[e.spec.name] = x
        draws = np.random.default_rng([seed, 3, idx]).random(n_molecules)
        observed[e.spec.name] = draws >= e.missing_rate

    label_rng = np.random.default_rng([seed, 4])
    w = label_rng.standard_normal(latent_dim) / np.sqrt(latent_dim)
    labels = z @ w + noise_scale * label_rng.standard_normal(n_molecules)

    records = []
    for i in range(n_molecules):
        feats = {
            e.spec.name: columns[e.spec.name][i] if observed[e.spec.name][i] else None for e in entries
        }
        records.append(MoleculeRecord(f"mol{i:05d}", feats, float(labels[i])))
    return Dataset(tuple(e.spec for e in entries), tuple(records), seed)


class DenseView(NamedTuple):
    """Placeholder-filled matrices (``N x dim`` per modality) and the observation mask.

    ``mask[i, c] == 1`` iff modality ``names[c]`` is observed for record ``i``.
    """

    matrices: dict[str, np.ndarray]
    mask: np.ndarray
    names: list[str]

    def column(self, name: str) -> np.ndarray:
        return self.mask[:, self.names.index(name)]


def apply_placeholder(dataset: Dataset) -> DenseView:
    """Replace absent entries with zero vectors and build the mask."""
    names = dataset.modality_names
    n = dataset.n
    mask = np.zeros((n, len(names)), dtype=np.int8)
    matrices = {}
    for c, spec in enumerate(dataset.specs):
        mat = np.zeros((n, spec.dim))
        for i, rec in enumerate(dataset.records):
            value = rec.features[spec.name]
            if value is not None:
                mat[i] = value
                mask[i, c] = 1
        matrices[spec.name] = mat
    return DenseView(matrices, mask, names)


def replace_modality(dataset: Dataset, name: str, matrix: np.ndarray) -> Dataset:
    """Return a copy of ``dataset`` whose ``name`` features are the rows of ``matrix``.

    Binary modalities are rounded at 0.5 so the result stays a valid dataset.
    """
    spec = dataset.spec(name)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (dataset.n, spec.dim):
        raise ValueError(f"expected a {(dataset.n, spec.dim)} matrix, got {matrix.shape}")
    if spec.value_domain == "binary":
        matrix = (matrix >= 0.5).astype(np.float64)
    records = []
    for i, rec in enumerate(dataset.records):
        feats = dict(rec.features)
        feats[name] = matrix[i]
        records.append(MoleculeRecord(rec.id, feats, rec.label))
    return Dataset(dataset.specs, tuple(records), dataset.seed)


# -- JSON Lines I/O ---------------------------------------------------------


def _dumps(obj) -> str:
    # float repr is the shortest string that round-trips exactly (<= 17 significant digits)
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_to_lines(dataset: Dataset) -> list[str]:
    header = {"version": FORMAT_VERSION, "specs": [s.to_json() for s in dataset.specs], "seed": dataset.seed}
    lines = [_dumps(header)]
    for rec in dataset.records:
        feats = {
            name: None if rec.features[name] is None else [float(v) for v in rec.features[name]]
            for name in dataset.modality_names
        }
        lines.append(_dumps({"id": rec.id, "features": feats, "label": rec.label}))
    return lines


def save_dataset(dataset: Dataset, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in dataset_to_lines(dataset):
            fh.write(line + "\n")


def _parse_header(line: str) -> tuple[list[ModalitySpec], int]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported or missing header version (expected {FORMAT_VERSION})")
    try:
        specs = [ModalitySpec(**s) for s in header["specs"]]
        seed = int(header.get("seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed header: {exc}") from None
    return specs, seed


def _parse_record(line: str, index: int, specs: Sequence[ModalitySpec]) -> MoleculeRecord:
    by_name = {s.name: s for s in specs}
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"invalid JSON: {exc}", index) from None
    if not isinstance(obj, dict) or "id" not in obj or not isinstance(obj.get("features"), dict):
        raise MalformedRecordError("expected an object with 'id' and 'features'", index)
    feats = {}
    for name, value in obj["features"].items():
        spec = by_name.get(name)
        if spec is None:
            raise UnknownModalityError(name, index)
        if value is None:
            feats[name] = None
            continue
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise MalformedRecordError(f"modality {name!r} must be a list of numbers or null", index)
        if len(value) != spec.dim:
            raise DimensionMismatchError(name, spec.dim, len(value), index)
        feats[name] = np.array(value, dtype=np.float64)
    label = obj.get("label")
    if label is not None and (not isinstance(label, (int, float)) or isinstance(label, bool)):
        raise MalformedRecordError("label must be a number or null", index)
    return MoleculeRecord(str(obj["id"]), feats, label)


def load_dataset(path: str | PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError("empty dataset file")
    specs, seed = _parse_header(lines[0])
    records = [_parse_record(line, i, specs) for i, line in enumerate(lines[1:])]
    return Dataset(tuple(specs), tuple(records), seed)


def load_profile(path: str | PathLike) -> list[ProfileEntry]:
    """Read a generation profile: a JSON list of ``{name, kind, dim, value_domain, missing_rate}``."""
    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise DatasetError("profile must be a JSON list")
    return [_as_entry(item) for item in items]
