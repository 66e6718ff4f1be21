"""Localization / classification losses and the learned balance weights.

The localization term penalizes the squared shortfall of the predicted-box
overlap on well-covered cells; classification is per-cell binary cross
entropy (focal variant available for the ablation).  Totals are weighted by
trainable multipliers, one pair globally and one pair per (class, anchor)
grid, parameterized as lambda = exp(-s) so they stay positive.  A
regularizer of the s values keeps the multipliers from collapsing to zero,
and grids that saw no positive label in an iteration have their s entries
frozen (gradient zeroed, regularizer included) so easy all-negative grids
cannot inflate their own weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MODES = ("learned", "unit", "retina_norm")

# Gate for the localization loss and for counting positive anchors: a cell
# participates once its normalized overlap exceeds this.
LOC_GATE = 0.5


@dataclass
class BalanceWeights:
    """Trainable balance parameters; lambda = exp(-s) for every entry."""

    s_cls: float
    s_loc: float
    s_cls_grid: np.ndarray
    s_loc_grid: np.ndarray

    @classmethod
    def initial(cls, n_classes: int, n_anchors: int,
                value: float = 1.0) -> "BalanceWeights":
        return cls(s_cls=value, s_loc=value,
                   s_cls_grid=np.full((n_classes, n_anchors), value),
                   s_loc_grid=np.full((n_classes, n_anchors), value))

    def lambda_cls(self) -> float:
        return math.exp(-self.s_cls)

    def lambda_loc(self) -> float:
        return math.exp(-self.s_loc)

    def lambda_cls_grid(self) -> np.ndarray:
        return np.exp(-self.s_cls_grid)

    def lambda_loc_grid(self) -> np.ndarray:
        return np.exp(-self.s_loc_grid)


@dataclass
class WeightGradients:
    """d(total)/d(s) for every balance parameter."""

    s_cls: float
    s_loc: float
    s_cls_grid: np.ndarray
    s_loc_grid: np.ndarray


@dataclass
class LossReport:
    total: float
    loc: float
    cls: float
    reg: float
    n_pos: int
    per_grid_pos: np.ndarray

    CSV_HEADER = "iteration,total,loc,cls,reg,n_pos,lr"

    def csv_row(self, iteration: int, lr: float) -> str:
        return (f"{iteration},{self.total!r},{self.loc!r},{self.cls!r},"
                f"{self.reg!r},{self.n_pos},{lr!r}")


# ---------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------

def loc_loss_elem(o: float, o_hat: float) -> float:
    """Squared overlap shortfall (1 - o_hat)^2, active only where o > 0.5."""
    return (1.0 - o_hat) ** 2 if o > LOC_GATE else 0.0


def cls_loss_elem(p: int, p_hat: float) -> float:
    """Binary cross entropy for a probability in (0, 1)."""
    return -p * math.log(p_hat) - (1 - p) * math.log1p(-p_hat)


def focal_loss_elem(p: int, p_hat: float, alpha: float = 0.25,
                    gamma: float = 2.0) -> float:
    """Focal modulation of the cross entropy (ablation only)."""
    p_t = p_hat if p == 1 else 1.0 - p_hat
    alpha_t = alpha if p == 1 else 1.0 - alpha
    return alpha_t * (1.0 - p_t) ** gamma * (-math.log(p_t))


def loc_loss_map(gate, o_hat):
    """Gated squared-shortfall map; generic over ndarray/Tensor `o_hat`.

    `gate` is the 0/1 array of cells whose normalized overlap beats the
    threshold; it carries no gradient.
    """
    return gate * (1.0 - o_hat) ** 2.0


def bce_logits(p, z):
    """Binary cross entropy from logits, in the saturation-safe form
    max(z, 0) - z*p + log(1 + exp(-|z|)); generic over ndarray/Tensor."""
    mag = ad.maximum(z, -z)
    return ad.maximum(z, 0.0) - z * p + ad.log1p(ad.exp(-mag))


def focal_logits(p, z, alpha: float = 0.25, gamma: float = 2.0):
    """Focal loss from logits for hard labels p in {0, 1}."""
    sign = 2.0 * p - 1.0
    one_minus_pt = ad.sigmoid(-sign * z)
    alpha_t = alpha * p + (1.0 - alpha) * (1.0 - p)
    return alpha_t * one_minus_pt ** gamma * bce_logits(p, z)


# ---------------------------------------------------------------------
# weighted totals
# ---------------------------------------------------------------------

def weighted_totals(loc_sums, cls_sums, n_pos: float, n_total: float,
                    mode: str, s_cls=None, s_loc=None,
                    s_cls_grid=None, s_loc_grid=None):
    """Combine per-grid loss sums [n_classes, n_anchors] into the three
    loss terms.  Generic over ndarray/Tensor inputs.

    learned      -- every term scaled by its exp(-s) multiplier, plus the
                    s regularizer.
    unit         -- all multipliers 1, no regularizer.
    retina_norm  -- multipliers 1 except the classification weight pinned
                    at n_total / n_pos, no regularizer.
    """
    if mode == "learned":
        loc = ad.exp(-s_loc) * ((ad.exp(-s_loc_grid) * loc_sums).sum() / n_pos)
        cls = ad.exp(-s_cls) * ((ad.exp(-s_cls_grid) * cls_sums).sum() / n_total)
        reg = s_cls + s_loc + (s_cls_grid + s_loc_grid).mean()
    elif mode == "unit":
        loc = loc_sums.sum() / n_pos
        cls = cls_sums.sum() / n_total
        reg = 0.0
    elif mode == "retina_norm":
        loc = loc_sums.sum() / n_pos
        cls = (n_total / n_pos) * (cls_sums.sum() / n_total)
        reg = 0.0
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return loc, cls, reg


def balanced_totals(loc_map: np.ndarray, cls_map: np.ndarray,
                    weights: BalanceWeights, mode: str,
                    gate: np.ndarray, labels: np.ndarray) -> LossReport:
    """Reduce elementwise loss maps into a weighted LossReport.

    `gate` marks cells counted as positives for the localization
    normalizer (floored at 1); `labels` drive the per-grid positive counts
    used by the freeze rule.
    """
    if not (loc_map.shape == cls_map.shape == gate.shape == labels.shape):
        raise ValueError(
            f"map shapes differ: loc {loc_map.shape}, cls {cls_map.shape}, "
            f"gate {gate.shape}, labels {labels.shape}")
    if loc_map.ndim != 4:
        raise ValueError(f"expected [h, w, n_classes, n_anchors] maps, got {loc_map.shape}")
    n_pos = int(np.asarray(gate, dtype=bool).sum())
    n_pos_eff = max(1, n_pos)
    n_total = loc_map.size
    loc_sums = loc_map.sum(axis=(0, 1))
    cls_sums = cls_map.sum(axis=(0, 1))
    loc, cls, reg = weighted_totals(
        loc_sums, cls_sums, n_pos_eff, n_total, mode,
        s_cls=weights.s_cls, s_loc=weights.s_loc,
        s_cls_grid=weights.s_cls_grid, s_loc_grid=weights.s_loc_grid)
    loc, cls, reg = float(loc), float(cls), float(reg)
    per_grid_pos = np.asarray(labels, dtype=bool).sum(axis=(0, 1)).astype(np.int64)
    return LossReport(total=loc + cls + reg, loc=loc, cls=cls, reg=reg,
                      n_pos=n_pos, per_grid_pos=per_grid_pos)


def weight_gradients(loc_sums: np.ndarray, cls_sums: np.ndarray,
                     n_pos: float, n_total: float,
                     per_grid_pos: np.ndarray,
                     weights: BalanceWeights) -> WeightGradients:
    """Closed-form d(total)/d(s) for the learned mode.

    Grids with zero positive labels get exactly zero gradient on both of
    their s entries, regularizer contribution included, so frozen weights
    cannot drift.
    """
    nc, na = weights.s_cls_grid.shape
    lam_cls, lam_loc = weights.lambda_cls(), weights.lambda_loc()
    lam_cls_g, lam_loc_g = weights.lambda_cls_grid(), weights.lambda_loc_grid()

    g_s_loc = 1.0 - lam_loc * float((lam_loc_g * loc_sums).sum()) / n_pos
    g_s_cls = 1.0 - lam_cls * float((lam_cls_g * cls_sums).sum()) / n_total
    g_loc_grid = 1.0 / (nc * na) - lam_loc * lam_loc_g * loc_sums / n_pos
    g_cls_grid = 1.0 / (nc * na) - lam_cls * lam_cls_g * cls_sums / n_total

    frozen = np.asarray(per_grid_pos) == 0
    g_loc_grid = np.where(frozen, 0.0, g_loc_grid)
    g_cls_grid = np.where(frozen, 0.0, g_cls_grid)
    return WeightGradients(s_cls=g_s_cls, s_loc=g_s_loc,
                           s_cls_grid=g_cls_grid, s_loc_grid=g_loc_grid)
