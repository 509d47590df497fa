"""Official evaluation protocol: per-AU F1, macro expression F1, VA CCC,
the composite multi-task score, and cross-fold aggregation.

Conventions pinned here (they change scores on sparse classes):
  * F1 with an all-zero denominator (no true positives possible and none
    predicted) counts as 0.
  * AU probabilities are thresholded at 0.5 (logit >= 0).
  * Invalid labels are filtered per task before any thresholding.
  * Metric CCC is computed over the whole evaluation set, not per batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import N_AU, N_EXPR, ValidityMask, ccc

AU_THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    """Too few valid samples to evaluate a metric."""


def f1_binary(pred, truth) -> float:
    """F1 = 2TP / (2TP + FP + FN); zero denominator counts as 0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def f1_macro_expr(pred, truth) -> tuple[np.ndarray, float]:
    """One-vs-rest F1 per expression class plus their arithmetic mean."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= N_EXPR):
            raise ValueError(f"{name} class outside 0..{N_EXPR - 1}")
    per_class = [f1_binary(pred == c, truth == c) for c in range(N_EXPR)]
    return np.array(per_class), sum(per_class) / N_EXPR


def p_va(pred_v, pred_a, truth_v, truth_a) -> float:
    """Mean of the valence and arousal CCCs over the full valid set."""
    pred_v = np.asarray(pred_v, dtype=np.float64)
    if pred_v.size < 2:
        raise UndefinedMetricError(
            f"VA CCC needs >=2 valid samples, got {pred_v.size}"
        )
    return 0.5 * (ccc(pred_v, truth_v) + ccc(pred_a, truth_a))


def p_mtl(p_au: float, p_expr: float, p_va_score: float) -> float:
    return p_au + p_expr + p_va_score


@dataclass
class EvalReport:
    per_au_f1: np.ndarray
    per_expr_f1: np.ndarray
    ccc_v: float
    ccc_a: float
    p_au: float
    p_expr: float
    p_va: float
    p_mtl: float
    valid_counts: dict = field(default_factory=dict)

    @classmethod
    def from_parts(cls, per_au_f1, per_expr_f1, ccc_v, ccc_a,
                   valid_counts=None) -> "EvalReport":
        per_au_f1 = np.asarray(per_au_f1, dtype=np.float64)
        per_expr_f1 = np.asarray(per_expr_f1, dtype=np.float64)
        pau = float(per_au_f1.mean())
        pexpr = float(per_expr_f1.mean())
        pva = 0.5 * (ccc_v + ccc_a)
        return cls(per_au_f1=per_au_f1, per_expr_f1=per_expr_f1,
                   ccc_v=float(ccc_v), ccc_a=float(ccc_a),
                   p_au=pau, p_expr=pexpr, p_va=pva,
                   p_mtl=p_mtl(pau, pexpr, pva),
                   valid_counts=dict(valid_counts or {}))

    @classmethod
    def from_scores(cls, p_au: float, p_expr: float, p_va_score: float) -> "EvalReport":
        """Build a report from the three sub-scores alone (per-class arrays
        degenerate to constants); used to reproduce published score tables."""
        return cls.from_parts(np.full(N_AU, p_au), np.full(N_EXPR, p_expr),
                              p_va_score, p_va_score)

    def to_dict(self) -> dict:
        return {
            "per_au_f1": [float(v) for v in self.per_au_f1],
            "per_expr_f1": [float(v) for v in self.per_expr_f1],
            "ccc_v": self.ccc_v,
            "ccc_a": self.ccc_a,
            "p_au": self.p_au,
            "p_expr": self.p_expr,
            "p_va": self.p_va,
            "p_mtl": self.p_mtl,
            "valid_counts": self.valid_counts,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(per_au_f1=np.asarray(d["per_au_f1"], dtype=np.float64),
                   per_expr_f1=np.asarray(d["per_expr_f1"], dtype=np.float64),
                   ccc_v=d["ccc_v"], ccc_a=d["ccc_a"], p_au=d["p_au"],
                   p_expr=d["p_expr"], p_va=d["p_va"], p_mtl=d["p_mtl"],
                   valid_counts=dict(d.get("valid_counts", {})))


def evaluate_predictions(au_logits, expr_logits, va_pred,
                         y_au, y_expr, y_va) -> EvalReport:
    """Score raw model outputs against labels under the official protocol."""
    au_logits = np.asarray(au_logits, dtype=np.float64)
    expr_logits = np.asarray(expr_logits, dtype=np.float64)
    va_pred = np.asarray(va_pred, dtype=np.float64)
    y_au = np.asarray(y_au)
    y_expr = np.asarray(y_expr)
    y_va = np.asarray(y_va, dtype=np.float64)

    masks = ValidityMask.from_arrays(y_va, y_expr, y_au)
    n = len(y_expr)
    counts = {
        "au_valid": int(masks.au_valid.sum()),
        "au_invalid": int(n - masks.au_valid.sum()),
        "expr_valid": int(masks.expr_valid.sum()),
        "expr_invalid": int(n - masks.expr_valid.sum()),
        "va_valid": int(masks.va_valid.sum()),
        "va_invalid": int(n - masks.va_valid.sum()),
    }

    au_pred = au_logits[masks.au_valid] >= 0.0  # sigmoid(x) >= 0.5
    au_truth = y_au[masks.au_valid].astype(np.int64)
    per_au = np.array(
        [f1_binary(au_pred[:, i], au_truth[:, i] == 1) for i in range(N_AU)]
    )

    expr_pred = expr_logits[masks.expr_valid].argmax(axis=-1)
    per_expr, _ = f1_macro_expr(expr_pred, y_expr[masks.expr_valid])

    va_p = va_pred[masks.va_valid]
    va_t = y_va[masks.va_valid]
    if va_p.shape[0] < 2:
        raise UndefinedMetricError(
            f"VA CCC needs >=2 valid samples, got {va_p.shape[0]}"
        )
    ccc_v = ccc(va_p[:, 0], va_t[:, 0])
    ccc_a = ccc(va_p[:, 1], va_t[:, 1])

    return EvalReport.from_parts(per_au, per_expr, ccc_v, ccc_a, counts)


def fold_aggregate(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean of every report field across folds."""
    if not reports:
        raise ValueError("fold_aggregate needs at least one report")
    per_au = np.mean([r.per_au_f1 for r in reports], axis=0)
    per_expr = np.mean([r.per_expr_f1 for r in reports], axis=0)
    ccc_v = float(np.mean([r.ccc_v for r in reports]))
    ccc_a = float(np.mean([r.ccc_a for r in reports]))
    keys = set().union(*(r.valid_counts for r in reports))
    counts = {
        k: float(np.mean([r.valid_counts.get(k, 0) for r in reports])) for k in keys
    }
    return EvalReport.from_parts(per_au, per_expr, ccc_v, ccc_a, counts)
