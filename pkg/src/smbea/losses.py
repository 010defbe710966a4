"""Metric primitives and the output-space / combined attack objectives.

Every metric reduces over all axes of a single ``(C, H, W)`` tensor, or over
all but the leading axis of an ``(N, C, H, W)`` batch, returning one value
per sample.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, lift

TASKS = ("translation", "saliency")


class LossError(ValueError):
    pass


def _sample_axes(x: Tensor) -> tuple[int, ...]:
    return (1, 2, 3) if x.ndim == 4 else tuple(range(x.ndim))


def _check_same(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise LossError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


@dataclass
class ObjectiveConfig:
    task: str = "saliency"
    lambda1: float = 1e-2
    lambda2: float = 1.0
    epsilon_kl: float = 1e-8
    # "guide_adv" is KL(guide || adversary); "adv_guide" flips it
    kl_order: str = "guide_adv"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise LossError(f"unknown task {self.task!r}")
        for name in ("lambda1", "lambda2", "epsilon_kl"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise LossError(f"{name} must be finite and non-negative, got {value}")
        if self.kl_order not in ("guide_adv", "adv_guide"):
            raise LossError(f"unknown kl_order {self.kl_order!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def mae(x, y) -> Tensor:
    x, y = lift(x), lift(y)
    _check_same(x, y, "mae")
    return T.tabs(x - y).mean(axis=_sample_axes(x))


def mse_eval(x, y) -> Tensor:
    x, y = lift(x), lift(y)
    _check_same(x, y, "mse")
    d = x - y
    return (d * d).mean(axis=_sample_axes(x))


def l1_perceptual(clean, adv) -> Tensor:
    """Mean absolute perturbation per pixel element."""
    return mae(clean, adv)


def neg_cc(x, y) -> Tensor:
    """Negative Pearson correlation; raises on a constant input."""
    x, y = lift(x), lift(y)
    _check_same(x, y, "neg_cc")
    axes = _sample_axes(x)
    xc = x - x.mean(axis=axes, keepdims=True)
    yc = y - y.mean(axis=axes, keepdims=True)
    sxx = (xc * xc).sum(axis=axes)
    syy = (yc * yc).sum(axis=axes)
    if np.any(sxx.data <= 0) or np.any(syy.data <= 0):
        raise LossError("neg_cc undefined for a constant input (zero variance)")
    return -((xc * yc).sum(axis=axes) / T.sqrt(sxx * syy))


def to_distribution(x, eps: float = 0.0) -> Tensor:
    """Smooth by ``eps`` and renormalise every 2D map to sum 1."""
    x = lift(x)
    if np.any(x.data < 0):
        raise LossError("distributions need non-negative entries")
    x = x + eps
    return x / x.sum(axis=(-2, -1), keepdims=True)


def kl_div(p, q, eps: float = 0.0) -> Tensor:
    """KL(p || q) summed over each map and averaged over maps."""
    p, q = lift(p), lift(q)
    _check_same(p, q, "kl_div")
    p = to_distribution(p, eps)
    q = to_distribution(q, eps)
    # 0 * log 0 is taken as 0
    safe_p = np.where(p.data > 0, 1.0, 0.0)
    ratio = (p + (1.0 - safe_p)) / q
    terms = p * T.log(ratio) * safe_p
    per_map = terms.sum(axis=(-2, -1))
    if per_map.ndim == 2:
        return per_map.mean(axis=1)
    return per_map.mean()


def output_fooling_terms(pred, guide_target, cfg: ObjectiveConfig, surrogate=None,
                         adv_image=None, guide_image=None) -> dict[str, Tensor]:
    """Task-specific output-space fooling components, each weighted equally.

    ``surrogate`` (translation only) is a frozen zoo model whose deepest
    features stand in for a pretrained perceptual network: the term is the
    MAE between its features on the ensemble prediction and on the guide target.
    """
    pred, guide_target = lift(pred), lift(guide_target)
    terms = {"mae": mae(pred, guide_target), "neg_cc": neg_cc(pred, guide_target)}
    if cfg.task == "saliency":
        terms["kl"] = kl_div(guide_target, pred, cfg.epsilon_kl)
    elif surrogate is not None:
        tap = surrogate.spec.default_tap
        _, (f_pred,) = surrogate(pred, [tap])
        _, (f_goal,) = surrogate(guide_target, [tap])
        terms["feature"] = mae(f_pred, f_goal.detach())
    return terms


def objective_output(ensemble_pred, guide_target, clean, adv, cfg: ObjectiveConfig,
                     surrogate=None, return_terms: bool = False):
    """Fooling loss toward the guide target plus ``lambda1`` times the L1 perturbation."""
    terms = output_fooling_terms(ensemble_pred, guide_target, cfg, surrogate)
    fooling = None
    for value in terms.values():
        fooling = value if fooling is None else fooling + value
    perceptual = l1_perceptual(clean, adv)
    total = fooling + perceptual * cfg.lambda1
    if return_terms:
        terms = dict(terms, fooling=fooling, l1=perceptual)
        return total, terms
    return total


def feature_loss(fused_adv, fused_guide, cfg: ObjectiveConfig) -> Tensor:
    if cfg.kl_order == "guide_adv":
        return kl_div(fused_guide, fused_adv, cfg.epsilon_kl)
    return kl_div(fused_adv, fused_guide, cfg.epsilon_kl)


def objective_combined(ensemble_pred, guide_target, clean, adv, fused_adv_features,
                       fused_guide_features, cfg: ObjectiveConfig, surrogate=None,
                       return_terms: bool = False):
    """Output objective plus ``lambda2`` times the feature-space KL term."""
    total, terms = objective_output(ensemble_pred, guide_target, clean, adv, cfg, surrogate,
                                    return_terms=True)
    if cfg.lambda2 and fused_adv_features is not None:
        feat = feature_loss(fused_adv_features, fused_guide_features, cfg)
        total = total + feat * cfg.lambda2
        terms["feature_kl"] = feat
    if return_terms:
        return total, terms
    return total
