"""Loss terms of the joint mapping/pose objective and their weighted sum.

Every data term is a mean over its valid rows, so magnitudes do not scale
with batch size. Euclidean norms use sqrt(ssq + 1e-18) - 1e-9, which is
exact to 1e-9, zero on exact matches, and smooth at the origin. All terms
accept tape variables or plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import EmptyBatch, NonFiniteTerm

TERM_ORDER = ("flow", "disparity", "eikonal", "sparsity", "entropy", "photometric")


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    lambda4: float = 0.01
    tau: float = 10.0
    lambda_photo: float = 1.0
    use_disparity: bool = True
    use_photometric: bool = False

    def __post_init__(self) -> None:
        weights = (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda_photo)
        if any(w < 0 for w in weights) or self.tau <= 0:
            raise ValueError("loss weights must be nonnegative and tau positive")


@dataclass
class LossReport:
    terms: dict[str, float]
    counts: dict[str, int] = dc_field(default_factory=dict)
    total: float = 0.0

    def line(self, iteration: int) -> str:
        parts = [f"iter {iteration:6d}"] + [
            f"{name} {self.terms.get(name, 0.0):.6e}" for name in TERM_ORDER
        ]
        parts.append(f"total {self.total:.6e}")
        return "  ".join(parts)


def _masked_rows(rendered, target, valid):
    target = np.asarray(target, dtype=np.float64)
    if valid is None:
        valid = np.ones(target.shape[0], dtype=bool)
    idx = np.flatnonzero(np.asarray(valid))
    if idx.size == 0:
        raise EmptyBatch("no valid rays in batch")
    if idx.size == target.shape[0]:
        return rendered, target, idx.size
    return ad.gather(rendered, idx), target[idx], idx.size


def _safe_norm(residual, axis: int):
    ssq = ad.vsum(residual * residual, axis=axis)
    return ad.sqrt(ssq + 1e-18) - 1e-9


def flow_loss(rendered, target, valid=None):
    """Mean Euclidean norm of the 2-vector flow residual over valid rays."""
    sel, tgt, _ = _masked_rows(rendered, target, valid)
    return ad.vmean(_safe_norm(sel - tgt, axis=1))


def disparity_loss(rendered, target, valid=None):
    """Mean absolute disparity residual over valid rays."""
    sel, tgt, _ = _masked_rows(rendered, target, valid)
    return ad.vmean(ad.absolute(sel - tgt))


def photometric_loss(rendered, target, valid=None):
    """Mean Euclidean norm of the rgb residual over valid rays."""
    sel, tgt, _ = _masked_rows(rendered, target, valid)
    return ad.vmean(_safe_norm(sel - tgt, axis=1))


def eikonal_loss(field, points: np.ndarray, tape=None):
    """Mean squared deviation of the SDF gradient norm from 1."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise EmptyBatch("eikonal term needs at least one point")
    g = field.gradient(points, tape)
    norm = ad.sqrt(ad.vsum(g * g, axis=1) + 1e-18)
    dev = norm - 1.0
    return ad.vmean(dev * dev)


def sparsity_loss(field, points: np.ndarray, tau: float, tape=None, sdf=None):
    """Mean of exp(-tau * |sdf|); `sdf` may pass in precomputed values."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0 and sdf is None:
        raise EmptyBatch("sparsity term needs at least one point")
    if sdf is None:
        sdf, _ = field.sdf_and_feature(points, tape)
    return ad.vmean(ad.exp(-(tau * ad.absolute(sdf))))


def entropy_loss(opacities):
    """Mean binary entropy of per-ray opacities, clamped to [1e-6, 1 - 1e-6]."""
    x = ad.clamp(opacities, 1e-6, 1.0 - 1e-6)
    one_minus = 1.0 - x
    ent = -(x * ad.log(x) + one_minus * ad.log(one_minus))
    return ad.vmean(ent)


def weighted_total(terms: dict, config: LossConfig):
    """L_f + l1*L_d + l2*L_eik + l3*L_spa + l4*L_ent (+ l_photo*L_photo)."""
    zero = 0.0

    def term(name):
        v = terms.get(name)
        return zero if v is None else v

    total = term("flow")
    if config.use_disparity:
        total = total + config.lambda1 * term("disparity")
    total = total + config.lambda2 * term("eikonal")
    total = total + config.lambda3 * term("sparsity")
    total = total + config.lambda4 * term("entropy")
    if config.use_photometric:
        total = total + config.lambda_photo * term("photometric")
    return total


def total_loss(terms: dict, config: LossConfig, counts: dict | None = None) -> LossReport:
    """Weighted combination of the provided terms as a float report.

    Disabled or absent terms contribute exactly 0; any non-finite provided
    term raises NonFiniteTerm.
    """
    values: dict[str, float] = {}
    for name in TERM_ORDER:
        v = terms.get(name)
        if v is None:
            continue
        fv = float(value_of(v))
        if not np.isfinite(fv):
            raise NonFiniteTerm(f"loss term {name!r} is not finite: {fv}")
        values[name] = fv
    total = float(value_of(weighted_total({k: float(v) for k, v in values.items()}, config)))
    return LossReport(terms=values, counts=dict(counts or {}), total=total)
