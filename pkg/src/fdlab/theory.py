"""Closed-form gradient factors for a two-logit sigmoid-BCE fusion head.

A fused head receives the sum of two per-branch logit contributions plus a
bias.  For a BCE loss the gradient reaching a branch backbone is proportional
to ``sigmoid(l1 + l2 + b) - 1`` on positive cells and ``sigmoid(l1 + l2 + b)``
on negative cells, whereas a single-branch model sees ``sigmoid(l1 + b) - 1``
(resp. ``sigmoid(l1 + b)``).  With both logit contributions nonnegative (the
range produced by SiLU-activated features) the fused positive-sample factor is
smaller in magnitude and the fused negative-sample factor is larger, and the
branch with the smaller logit loses more.  This module evaluates those
factors, the margins of the two inequalities, and cross-checks the closed
forms against the autodiff tape.

Everything here is pure-functional and safe for concurrent use.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from . import autodiff as ad

SampleSign = Literal["positive", "negative"]

__all__ = [
    "LogitDecomposition",
    "GradientFactors",
    "SuppressionGap",
    "PremiseViolationError",
    "multimodal_factor",
    "unimodal_factor",
    "gradient_factors",
    "suppression_margins",
    "check_suppression",
    "weak_modality_gap_ordering",
    "autodiff_crosscheck",
    "crosscheck_grid",
    "GridResult",
    "sweep_suppression_grid",
    "sweep_gap_ordering_grid",
    "write_grid_csv",
]


class PremiseViolationError(ValueError):
    """The nonnegative-partner-logit premise does not hold."""


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def _require_finite(name: str, value: float):
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class LogitDecomposition:
    """Per-branch logit contributions and the (collapsed) bias of a fused head."""

    m1_logit: float
    m2_logit: float
    bias: float = 0.0

    def __post_init__(self):
        _require_finite("m1_logit", self.m1_logit)
        _require_finite("m2_logit", self.m2_logit)
        _require_finite("bias", self.bias)


@dataclass(frozen=True)
class GradientFactors:
    """Scalar gradient factors for fused and single-branch heads.

    Positive-sample factors lie in (-1, 0), negative-sample factors in (0, 1);
    ``detection_scale`` is the positive scalar standing in for the detection
    head's depth and multiplies every factor.
    """

    multimodal_positive: float
    multimodal_negative: float
    unimodal_positive: float
    unimodal_negative: float
    detection_scale: float = 1.0


@dataclass(frozen=True)
class SuppressionGap:
    """Fused-minus-unimodal positive factor for one branch (nonnegative when
    the partner logit is nonnegative)."""

    modality_id: str
    gap: float


def multimodal_factor(ld: LogitDecomposition, sample_sign: SampleSign,
                      detection_scale: float = 1.0) -> float:
    """Gradient factor of the fused head toward branch 1 features."""
    z = ld.m1_logit + ld.m2_logit + ld.bias
    if sample_sign == "positive":
        return (_sigmoid(z) - 1.0) * detection_scale
    if sample_sign == "negative":
        return _sigmoid(z) * detection_scale
    raise ValueError(f"sample_sign must be 'positive' or 'negative', got {sample_sign!r}")


def unimodal_factor(logit: float, bias: float, sample_sign: SampleSign,
                    detection_scale: float = 1.0) -> float:
    """Gradient factor of a single-branch head toward its own features."""
    _require_finite("logit", logit)
    _require_finite("bias", bias)
    z = logit + bias
    if sample_sign == "positive":
        return (_sigmoid(z) - 1.0) * detection_scale
    if sample_sign == "negative":
        return _sigmoid(z) * detection_scale
    raise ValueError(f"sample_sign must be 'positive' or 'negative', got {sample_sign!r}")


def gradient_factors(ld: LogitDecomposition, detection_scale: float = 1.0) -> GradientFactors:
    """All four factors for branch 1 of the decomposition."""
    return GradientFactors(
        multimodal_positive=multimodal_factor(ld, "positive", detection_scale),
        multimodal_negative=multimodal_factor(ld, "negative", detection_scale),
        unimodal_positive=unimodal_factor(ld.m1_logit, ld.bias, "positive", detection_scale),
        unimodal_negative=unimodal_factor(ld.m1_logit, ld.bias, "negative", detection_scale),
        detection_scale=detection_scale,
    )


def suppression_margins(ld: LogitDecomposition) -> tuple:
    """(positive_margin, negative_margin) for branch 1.

    positive_margin = |unimodal positive factor| - |multimodal positive factor|
    negative_margin = multimodal negative factor - unimodal negative factor

    Both are nonnegative iff the fused head suppresses the positive-sample
    gradient and amplifies the negative-sample gradient; both are exactly the
    same quantity sigmoid(l1+l2+b) - sigmoid(l1+b), evaluated independently
    here so the identity is a checked property rather than an assumption.
    """
    f = gradient_factors(ld)
    pos_margin = abs(f.unimodal_positive) - abs(f.multimodal_positive)
    neg_margin = f.multimodal_negative - f.unimodal_negative
    return pos_margin, neg_margin


def check_suppression(ld: LogitDecomposition) -> bool:
    """True iff the fused head suppresses branch 1's positive-sample gradient
    and amplifies its negative-sample gradient.

    Margins are compared non-strictly: at ``m2_logit == 0`` the fused and
    single-branch factors coincide and the check passes with margin 0.
    Requires ``m2_logit >= 0``; the small negative tail a SiLU can emit is
    outside the analysed regime and rejected.
    """
    if ld.m2_logit < 0:
        raise PremiseViolationError(
            f"partner logit must be nonnegative, got m2_logit={ld.m2_logit}"
        )
    pos_margin, neg_margin = suppression_margins(ld)
    return pos_margin >= 0.0 and neg_margin >= 0.0


def weak_modality_gap_ordering(weak_logit: float, strong_logit: float,
                               bias: float = 0.0):
    """Suppression gaps of the weak and strong branches, and their ordering.

    Returns ``(weak_gap, strong_gap, ordering_holds)`` where each gap is the
    fused-minus-unimodal positive factor for that branch and
    ``ordering_holds`` is True iff the weak branch's gap is strictly larger.
    Requires ``0 <= weak_logit < strong_logit``.
    """
    _require_finite("weak_logit", weak_logit)
    _require_finite("strong_logit", strong_logit)
    _require_finite("bias", bias)
    if not 0.0 <= weak_logit:
        raise PremiseViolationError(f"weak_logit must be >= 0, got {weak_logit}")
    if not weak_logit < strong_logit:
        raise PremiseViolationError(
            f"weak_logit must be < strong_logit, got {weak_logit} >= {strong_logit}"
        )
    fused = _sigmoid(weak_logit + strong_logit + bias)
    weak_gap = fused - _sigmoid(weak_logit + bias)
    strong_gap = fused - _sigmoid(strong_logit + bias)
    return (
        SuppressionGap("weak", weak_gap),
        SuppressionGap("strong", strong_gap),
        weak_gap > strong_gap,
    )


def autodiff_crosscheck(ld: LogitDecomposition, sample_sign: SampleSign) -> float:
    """Relative error between the tape gradient and the closed form.

    Builds the literal two-logit sigmoid-BCE graph (projection weights times
    per-branch features, summed with the bias, through the stable BCE form),
    backpropagates, and compares the gradient at the branch-1 feature with
    ``multimodal_factor(ld, sign) * w1``.
    """
    w1, w2 = 1.3, 0.7  # arbitrary nonzero projection weights
    f1 = ad.Tensor(np.asarray(ld.m1_logit / w1), requires_grad=True)
    f2 = ad.Tensor(np.asarray(ld.m2_logit / w2), requires_grad=True)
    z = ad.add(ad.add(ad.mul(f1, w1), ad.mul(f2, w2)), ld.bias)
    y = 1.0 if sample_sign == "positive" else 0.0
    # per-entry BCE: softplus(z) - z*y  (n = 1)
    loss = ad.sub(ad.softplus(z), ad.mul(z, y))
    ad.backward(loss)
    tape_grad = float(np.asarray(f1.grad))
    closed = multimodal_factor(ld, sample_sign) * w1
    return abs(tape_grad - closed) / max(abs(closed), 1e-12)


def crosscheck_grid(logit_lo: float = 0.0, logit_hi: float = 3.0,
                    step: float = 0.5,
                    biases: Iterable[float] = (-1.0, 0.0, 1.0)) -> float:
    """Worst autodiff_crosscheck deviation over a coarse logit grid."""
    worst = 0.0
    for b in biases:
        for m1 in _grid_values(logit_lo, logit_hi, step):
            for m2 in _grid_values(logit_lo, logit_hi, step):
                ld = LogitDecomposition(m1, m2, b)
                for sign in ("positive", "negative"):
                    worst = max(worst, autodiff_crosscheck(ld, sign))
    return worst


# ---------------------------------------------------------------------------
# verification grids
# ---------------------------------------------------------------------------


@dataclass
class GridRow:
    m1_logit: float
    m2_logit: float
    bias: float
    multimodal_positive: float
    multimodal_negative: float
    unimodal_positive: float
    unimodal_negative: float
    positive_margin: float
    negative_margin: float
    weak_gap: float
    strong_gap: float
    suppression_ok: bool
    ordering_ok: bool


@dataclass
class GridResult:
    rows: list
    counterexamples: list

    @property
    def passed(self) -> bool:
        return not self.counterexamples


def _grid_values(lo: float, hi: float, step: float) -> list:
    n = int(round((hi - lo) / step))
    return [lo + i * step for i in range(n + 1)]


def sweep_suppression_grid(logit_lo: float = 0.0, logit_hi: float = 5.0,
                           step: float = 0.1,
                           biases: Iterable[float] = (-1.0, 0.0, 1.0)) -> GridResult:
    """Evaluate the suppression margins over a logit grid.

    Margins are evaluated directly (no nonnegativity gate) so extending the
    grid into negative partner logits reports counterexamples instead of
    raising.  A row is a counterexample when either margin is negative.
    """
    rows, bad = [], []
    for b in biases:
        for m1 in _grid_values(logit_lo, logit_hi, step):
            for m2 in _grid_values(logit_lo, logit_hi, step):
                ld = LogitDecomposition(m1, m2, b)
                f = gradient_factors(ld)
                pos_margin, neg_margin = suppression_margins(ld)
                row = GridRow(
                    m1_logit=m1, m2_logit=m2, bias=b,
                    multimodal_positive=f.multimodal_positive,
                    multimodal_negative=f.multimodal_negative,
                    unimodal_positive=f.unimodal_positive,
                    unimodal_negative=f.unimodal_negative,
                    positive_margin=pos_margin,
                    negative_margin=neg_margin,
                    weak_gap=float("nan"), strong_gap=float("nan"),
                    suppression_ok=(pos_margin >= 0.0 and neg_margin >= 0.0),
                    ordering_ok=True,
                )
                rows.append(row)
                if not row.suppression_ok:
                    bad.append(row)
    return GridResult(rows, bad)


def sweep_gap_ordering_grid(logit_lo: float = 0.0, logit_hi: float = 5.0,
                            step: float = 0.1,
                            biases: Iterable[float] = (-1.0, 0.0, 1.0)) -> GridResult:
    """Evaluate the weak-vs-strong gap ordering over all weak < strong pairs.

    Pairs with a negative weak logit fall outside the claim's premise and are
    skipped rather than reported as counterexamples."""
    rows, bad = [], []
    values = [v for v in _grid_values(logit_lo, logit_hi, step) if v >= 0]
    for b in biases:
        for i, weak in enumerate(values):
            for strong in values[i + 1:]:
                wg, sg, ok = weak_modality_gap_ordering(weak, strong, b)
                row = GridRow(
                    m1_logit=weak, m2_logit=strong, bias=b,
                    multimodal_positive=float("nan"),
                    multimodal_negative=float("nan"),
                    unimodal_positive=float("nan"),
                    unimodal_negative=float("nan"),
                    positive_margin=float("nan"),
                    negative_margin=float("nan"),
                    weak_gap=wg.gap, strong_gap=sg.gap,
                    suppression_ok=True, ordering_ok=ok,
                )
                rows.append(row)
                if not ok:
                    bad.append(row)
    return GridResult(rows, bad)


_CSV_FIELDS = [
    "m1_logit", "m2_logit", "bias",
    "multimodal_positive", "multimodal_negative",
    "unimodal_positive", "unimodal_negative",
    "positive_margin", "negative_margin",
    "weak_gap", "strong_gap",
    "suppression_ok", "ordering_ok",
]


def write_grid_csv(path, result: GridResult):
    """Write sweep rows as CSV (one row per grid point)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for row in result.rows:
            writer.writerow([getattr(row, f) for f in _CSV_FIELDS])
