"""Task losses with class balancing and invalid-label masking.

Labels use sentinel markers: -5 for missing valence/arousal, -1 for missing
expression, -1 for missing action units. Masked samples contribute exactly
zero to every loss (they are dropped by row selection, not down-weighted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VA_SENTINEL = -5.0
EXPR_SENTINEL = -1
AU_SENTINEL = -1

N_AU = 12
N_EXPR = 8

WEIGHT_CLAMP = (0.01, 100.0)
CCC_EPS = 1e-8


class LabelError(ValueError):
    """A nominally valid label is outside its legal range."""


@dataclass(frozen=True)
class ClassWeights:
    """Per-unit positive weights for the AU loss and per-class expression
    weights (neg/pos ratio and inverse frequency respectively)."""

    au_pos_weight: np.ndarray
    expr_weight: np.ndarray

    def __post_init__(self):
        au = np.asarray(self.au_pos_weight, dtype=np.float64)
        ex = np.asarray(self.expr_weight, dtype=np.float64)
        if au.shape != (N_AU,) or ex.shape != (N_EXPR,):
            raise ValueError(
                f"expected ({N_AU},) AU and ({N_EXPR},) EXPR weights, "
                f"got {au.shape} and {ex.shape}"
            )
        if not (np.all(np.isfinite(au)) and np.all(np.isfinite(ex))):
            raise ValueError("class weights must be finite")
        if np.any(au <= 0) or np.any(ex <= 0):
            raise ValueError("class weights must be positive")
        object.__setattr__(self, "au_pos_weight", au)
        object.__setattr__(self, "expr_weight", ex)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(np.ones(N_AU), np.ones(N_EXPR))


@dataclass(frozen=True)
class ValidityMask:
    """Per-sample validity of each task's labels (AU validity is per sample:
    one missing unit invalidates the whole AU vector)."""

    va_valid: np.ndarray
    expr_valid: np.ndarray
    au_valid: np.ndarray

    @classmethod
    def from_arrays(cls, y_va, y_expr, y_au) -> "ValidityMask":
        y_va = np.asarray(y_va, dtype=np.float64)
        y_expr = np.asarray(y_expr)
        y_au = np.asarray(y_au)
        return cls(
            va_valid=np.all(y_va != VA_SENTINEL, axis=-1),
            expr_valid=y_expr != EXPR_SENTINEL,
            au_valid=np.all(y_au != AU_SENTINEL, axis=-1),
        )


def loss_au(logits: Tensor, y_au, weights: ClassWeights, mask) -> tuple[Tensor, int]:
    """Positive-weighted binary cross entropy, averaged over valid samples
    and all 12 units; stable softplus form. Returns (loss, n_valid)."""
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    dtype = logits.data.dtype
    x = T.take_rows(logits, idx)
    y = np.asarray(y_au)[idx].astype(dtype)
    p = weights.au_pos_weight.astype(dtype)
    # -[p*y*log(sigmoid(x)) + (1-y)*log(1-sigmoid(x))]
    per_elem = (p * y) * T.softplus(-x) + (1.0 - y) * T.softplus(x)
    return per_elem.mean(), idx.size


def loss_expr(logits: Tensor, y_expr, weights: ClassWeights, mask) -> tuple[Tensor, int]:
    """Class-weighted cross entropy over valid samples. Returns (loss, n_valid)."""
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    y = np.asarray(y_expr)[idx].astype(np.int64)
    if np.any((y < 0) | (y >= N_EXPR)):
        bad = y[(y < 0) | (y >= N_EXPR)][0]
        raise LabelError(f"expression label {bad} outside 0..{N_EXPR - 1}")
    dtype = logits.data.dtype
    lsm = T.log_softmax(T.take_rows(logits, idx))
    onehot = np.zeros((idx.size, N_EXPR), dtype=dtype)
    onehot[np.arange(idx.size), y] = 1.0
    picked = (lsm * onehot).sum(axis=-1)
    return (picked * (-weights.expr_weight[y].astype(dtype))).mean(), idx.size


def ccc(x, y) -> float:
    """Concordance correlation coefficient with biased (population) moments."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"ccc expects equal-length vectors, got {x.shape}, {y.shape}")
    if x.size < 2:
        raise ValueError("ccc needs at least 2 samples")
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    return float(2.0 * cov / (vx + vy + (mx - my) ** 2 + CCC_EPS))


def _ccc_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable ccc of a predicted vector against a fixed target."""
    target = target.astype(pred.data.dtype)
    mt = float(target.mean())
    vt = float(((target - mt) ** 2).mean())
    mp = pred.mean()
    centered = pred - mp
    cov = (centered * (target - mt)).mean()
    vp = (centered * centered).mean()
    gap = mp - mt
    return 2.0 * cov / (vp + vt + gap * gap + CCC_EPS)


def loss_va(pred: Tensor, y_va, mask) -> tuple[Tensor, int]:
    """(1 - CCC_valence) + (1 - CCC_arousal) over the batch's valid samples;
    fewer than 2 valid samples contribute 0. Returns (loss, n_valid)."""
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size < 2:
        return Tensor(np.zeros((), dtype=pred.data.dtype)), int(idx.size)
    y = np.asarray(y_va, dtype=np.float64)[idx]
    chosen = T.take_rows(pred, idx)
    ccc_v = _ccc_tensor(chosen[:, 0], y[:, 0])
    ccc_a = _ccc_tensor(chosen[:, 1], y[:, 1])
    return 2.0 - ccc_v - ccc_a, idx.size


@dataclass
class BatchLosses:
    au: Tensor
    expr: Tensor
    va: Tensor
    total: Tensor
    n_valid_au: int
    n_valid_expr: int
    n_valid_va: int


def loss_total(au_logits: Tensor, expr_logits: Tensor, va_pred: Tensor,
               y_au, y_expr, y_va, weights: ClassWeights,
               masks: ValidityMask | None = None) -> BatchLosses:
    """Unweighted sum of the three task losses; empty-valid tasks add 0."""
    if masks is None:
        masks = ValidityMask.from_arrays(y_va, y_expr, y_au)
    la, na = loss_au(au_logits, y_au, weights, masks.au_valid)
    le, ne = loss_expr(expr_logits, y_expr, weights, masks.expr_valid)
    lv, nv = loss_va(va_pred, y_va, masks.va_valid)
    return BatchLosses(au=la, expr=le, va=lv, total=la + le + lv,
                       n_valid_au=na, n_valid_expr=ne, n_valid_va=nv)
