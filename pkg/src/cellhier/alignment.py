"""Projection into the shared space and the cross-modal alignment losses.

All losses return exact gradients alongside the value. Inputs are row matrices
(one sample per row); nothing here mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import ZeroNormError


@dataclass
class Projector:
    """Affine map ``x -> W x + b`` into the shared ``d``-dimensional space."""

    weight: np.ndarray
    bias: np.ndarray
    modality_name: str = ""

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("projector weight must be d x dim_in with a length-d bias")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("projector weight must be finite")

    @property
    def dim_in(self) -> int:
        return self.weight.shape[1]

    @property
    def dim_out(self) -> int:
        return self.weight.shape[0]


def project(projector: Projector, x: np.ndarray) -> np.ndarray:
    """Apply the projector to a vector or to each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != projector.dim_in:
        raise ValueError(f"expected input length {projector.dim_in}, got {x.shape[-1]}")
    return x @ projector.weight.T + projector.bias


def affine_backward(x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * (x W^T + b))`` with respect to ``W`` and ``b``."""
    return grad_out.T @ x, grad_out.sum(axis=0)


def _unit_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(int(zero[0]), what)
    return m / norms[:, None], norms


def _unit_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (I - u u^T) / |x|
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def info_nce(anchors, positives, temperature: float = 0.1):
    """Cosine InfoNCE of each anchor against all positives in the batch.

    Returns ``(loss, grad_anchors, grad_positives)``.
    """
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if a.shape != p.shape:
        raise ValueError(f"anchors {a.shape} and positives {p.shape} differ in shape")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = a.shape[0]
    ua, na = _unit_rows(a, "anchor row")
    up, np_ = _unit_rows(p, "positive row")
    logits = ua @ up.T / temperature
    loss = float(np.mean(logsumexp(logits, axis=1) - np.diag(logits)))
    g = softmax(logits, axis=1)
    g[np.diag_indices(n)] -= 1.0
    g /= n * temperature
    grad_a = _unit_backward(ua, na, g @ up)
    grad_p = _unit_backward(up, np_, g.T @ ua)
    return loss, grad_a, grad_p


class VicregResult(NamedTuple):
    loss: float
    invariance: float
    variance: float
    covariance: float
    grad_z: np.ndarray
    grad_zp: np.ndarray


def vicreg(z, zp) -> VicregResult:
    """Invariance + variance hinge + covariance loss, all terms weighted 1.

    Variance and covariance use population statistics of ``z`` only; the hinge
    has subgradient 0 at variance exactly 1.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    zp = np.atleast_2d(np.asarray(zp, dtype=np.float64))
    if z.shape != zp.shape:
        raise ValueError(f"shapes differ: {z.shape} vs {zp.shape}")
    n, d = z.shape
    if n < 2:
        raise ValueError("vicreg needs at least two samples")
    diff = z - zp
    invariance = float(np.sum(diff * diff) / n)
    centered = z - z.mean(axis=0)
    var = np.mean(centered * centered, axis=0)
    variance = float(np.sum(np.maximum(0.0, 1.0 - var)))
    cov = centered.T @ centered / n
    resid = cov - np.eye(d)
    covariance = float(np.sum(resid * resid))

    grad_z = 2.0 * diff / n
    grad_zp = -grad_z.copy()
    active = (var < 1.0).astype(np.float64)
    grad_z -= 2.0 * centered * active / n
    grad_z += 4.0 * centered @ resid / n
    return VicregResult(invariance + variance + covariance, invariance, variance, covariance, grad_z, grad_zp)


@dataclass
class ScaConfig:
    temperature: float = 0.1
    vicreg_enabled: bool = True
    infonce_enabled: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ProjectedBatch:
    """Projections of one batch.

    ``cellular[c]`` projects the placeholder-filled original features and
    ``augmented[c]`` the imputed ones; ``anchor`` is the sum of the molecular
    projections.
    """

    molecular: dict[str, np.ndarray]
    cellular: dict[str, np.ndarray] = field(default_factory=dict)
    augmented: dict[str, np.ndarray] = field(default_factory=dict)
    anchor: np.ndarray | None = None

    def __post_init__(self):
        if self.anchor is None:
            self.anchor = sum(self.molecular.values())


class ScaResult(NamedTuple):
    loss: float
    instance: float
    distribution: float
    grads: ProjectedBatch


def sca_loss(batch: ProjectedBatch, cellular_modalities, config: ScaConfig = ScaConfig()) -> ScaResult:
    """Instance-level InfoNCE plus distribution-level VICReg, averaged over modalities.

    InfoNCE pairs each anchor with the augmented projection of the same
    molecule (observed rows are unchanged by augmentation; missing rows use
    their imputed features). VICReg aligns the original and augmented
    projections. Gradients are returned in a :class:`ProjectedBatch`; the anchor
    gradient is also added to every molecular projection.
    """
    names = list(cellular_modalities)
    if not names:
        raise ValueError("sca_loss needs at least one cellular modality")
    grad_anchor = np.zeros_like(batch.anchor)
    grad_cell = {c: np.zeros_like(batch.cellular[c]) for c in names}
    grad_aug = {c: np.zeros_like(batch.augmented[c]) for c in names}
    ia = da = 0.0
    scale = 1.0 / len(names)
    for c in names:
        if config.infonce_enabled:
            loss, ga, gp = info_nce(batch.anchor, batch.augmented[c], config.temperature)
            ia += scale * loss
            grad_anchor += scale * ga
            grad_aug[c] += scale * gp
        if config.vicreg_enabled:
            res = vicreg(batch.cellular[c], batch.augmented[c])
            da += scale * res.loss
            grad_cell[c] += scale * res.grad_z
            grad_aug[c] += scale * res.grad_zp
    grads = ProjectedBatch(
        molecular={m: grad_anchor.copy() for m in batch.molecular},
        cellular=grad_cell,
        augmented=grad_aug,
        anchor=grad_anchor,
    )
    return ScaResult(ia + da, ia, da, grads)
