"""Class-balanced cross-entropy and the deeply-supervised objective.

For one image with ground truth ``G`` the balancing weight is the negative
fraction ``beta = |negatives| / |pixels|``. The per-map loss is

    -beta * sum_{k in positives} log p(k) - (1 - beta) * sum_{k in negatives} log(1 - p(k))

and the training objective adds the weighted side losses to the loss of the
final prediction. Losses are sums over pixels, evaluated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_SIDES = 5
CLAMP_EPS = 1e-12


@dataclass
class LossConfig:
    alpha: tuple[float, ...] = field(default_factory=lambda: (1.0,) * N_SIDES)
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if len(self.alpha) != N_SIDES:
            raise ValueError(f"need {N_SIDES} side weights, got {len(self.alpha)}")
        if min(self.alpha) < 0:
            raise ValueError("side weights must be non-negative")
        if not 0 < self.clamp_eps <= 1e-3:
            raise ValueError(f"clamp_eps must lie in (0, 1e-3], got {self.clamp_eps}")


@dataclass(frozen=True)
class BalancedTarget:
    gt: np.ndarray
    beta: float
    pos_count: int
    neg_count: int

    @property
    def total(self) -> int:
        return self.pos_count + self.neg_count

    @property
    def positive(self) -> np.ndarray:
        return self.gt > 0.5


def compute_beta(gt) -> BalancedTarget:
    """Per-image balancing weight for a binary map (any shape)."""
    gt = np.asarray(gt)
    if gt.size == 0:
        raise ValueError("empty ground-truth map")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    pos = int(np.count_nonzero(gt))
    neg = gt.size - pos
    return BalancedTarget(gt=gt, beta=neg / gt.size, pos_count=pos, neg_count=neg)


def _check_pair(pred, target: BalancedTarget) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.shape != target.gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {target.gt.shape}")
    return pred


def balanced_bce(pred, target: BalancedTarget, clamp_eps: float = CLAMP_EPS) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. ``pred`` (same dtype as ``pred``).

    ``pred`` is clamped to ``[clamp_eps, 1 - clamp_eps]`` before taking logs;
    the gradient is that of the log terms at the clamped probabilities.
    """
    pred = _check_pair(pred, target)
    p = np.clip(pred.astype(np.float64), clamp_eps, 1.0 - clamp_eps)
    pos = target.positive
    beta = target.beta
    loss = -beta * np.log(p[pos]).sum() - (1.0 - beta) * np.log1p(-p[~pos]).sum()
    grad = np.where(pos, -beta / p, (1.0 - beta) / (1.0 - p))
    return float(loss), grad.astype(pred.dtype, copy=False)


def balanced_bce_logits(prob, logits_like_dtype, target: BalancedTarget, clamp_eps: float = CLAMP_EPS):
    """Loss at ``prob`` and its gradient w.r.t. the logits that produced it.

    The gradient is the closed form ``beta * (p - 1)`` on positives and
    ``(1 - beta) * p`` on negatives, which stays informative where the
    sigmoid saturates.
    """
    loss, _ = balanced_bce(prob, target, clamp_eps)
    p = np.asarray(prob, dtype=np.float64)
    pos = target.positive
    grad = np.where(pos, target.beta * (p - 1.0), (1.0 - target.beta) * p)
    return loss, grad.astype(logits_like_dtype, copy=False)


def side_loss(sides, target: BalancedTarget, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    if len(sides) != N_SIDES:
        raise ValueError(f"expected {N_SIDES} side outputs, got {len(sides)}")
    total = 0.0
    for a, side in zip(cfg.alpha, sides):
        total += a * balanced_bce(side, target, cfg.clamp_eps)[0]
    return total


def total_loss(pred, sides, target: BalancedTarget, cfg: LossConfig | None = None) -> tuple[float, float, float]:
    """Returns ``(total, side_loss, pred_loss)`` with ``total = side + pred``."""
    cfg = cfg or LossConfig()
    l_side = side_loss(sides, target, cfg)
    l_pred = balanced_bce(pred, target, cfg.clamp_eps)[0]
    return l_side + l_pred, l_side, l_pred


def network_loss_and_grads(out: dict, target: BalancedTarget, cfg: LossConfig | None = None):
    """Objective of a training-mode forward pass plus logit gradients for backward.

    Returns ``(total, side_loss, pred_loss, grad_pred_logits, [grad_side_logits])``.
    """
    cfg = cfg or LossConfig()
    dtype = out["pred"].dtype
    l_pred, g_pred = balanced_bce_logits(out["pred"], dtype, target, cfg.clamp_eps)
    l_side = 0.0
    g_sides = []
    for a, side in zip(cfg.alpha, out["sides"]):
        l, g = balanced_bce_logits(side, dtype, target, cfg.clamp_eps)
        l_side += a * l
        g_sides.append((g * a).astype(dtype, copy=False))
    return l_side + l_pred, l_side, l_pred, g_pred, g_sides
