"""Output-space and feature-space fusion of the models in one mini-batch."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, lift

STRATEGIES = ("S1_even_sample", "S2_channel_pool", "S3_group_pool")
_ALIASES = {"S1": "S1_even_sample", "S2": "S2_channel_pool", "S3": "S3_group_pool"}


class EnsembleError(ValueError):
    pass


def canonical_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise EnsembleError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return name


def check_weights(weights: Sequence[float], k: int, what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise EnsembleError(f"{what}: expected {k} weights, got {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise EnsembleError(f"{what}: weights must be non-negative and sum to 1, got sum {w.sum()!r}")
    return w


@dataclass
class EnsembleSpec:
    """Per-batch fusion settings.

    ``sigma``/``omega`` default to uniform weights, ``taps`` to each model's
    deepest feature layer and ``target_hw`` to the smallest tap resolution.
    """

    models: list[str] = field(default_factory=list)
    sigma: list[float] | None = None
    omega: list[float] | None = None
    strategy: str = "S3_group_pool"
    p: int = 8
    target_hw: tuple[int, int] | None = None
    taps: list[str] | None = None
    use_features: bool = True

    def resolved(self, models) -> "EnsembleSpec":
        k = len(models)
        if k == 0:
            raise EnsembleError("an ensemble needs at least one model")
        sigma = list(self.sigma) if self.sigma is not None else [1.0 / k] * k
        omega = list(self.omega) if self.omega is not None else [1.0 / k] * k
        check_weights(sigma, k, "sigma")
        check_weights(omega, k, "omega")
        taps = list(self.taps) if self.taps is not None else [m.spec.default_tap for m in models]
        if len(taps) != k:
            raise EnsembleError(f"expected {k} taps, got {len(taps)}")
        strategy = canonical_strategy(self.strategy)
        if self.p < 1 or self.p & (self.p - 1):
            raise EnsembleError(f"p must be a power of two, got {self.p}")
        if strategy != "S2_channel_pool":
            for m, tap in zip(models, taps):
                pn = m.spec.tap_channels(tap)
                if pn % self.p:
                    raise EnsembleError(f"p={self.p} does not divide {m.name}.{tap} channel count {pn}")
        return EnsembleSpec([m.name for m in models], sigma, omega, strategy, self.p,
                            self.target_hw, taps, self.use_features)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        d = dict(d)
        if d.get("target_hw") is not None:
            d["target_hw"] = tuple(d["target_hw"])
        return cls(**d)


def output_ensemble(predictions: Sequence, sigma: Sequence[float]) -> Tensor:
    """Elementwise ``sum_n sigma_n * prediction_n``."""
    preds = [lift(p) for p in predictions]
    w = check_weights(sigma, len(preds), "sigma")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise EnsembleError(f"prediction shape mismatch: {p.shape} vs {shape}")
    out = preds[0] * float(w[0])
    for p, wn in zip(preds[1:], w[1:]):
        out = out + p * float(wn)
    return out


def _channel_axis(x: Tensor) -> int:
    return x.ndim - 3


def select_features_s1(features, p: int) -> Tensor:
    """Evenly sample ``p`` channels with interval ``P_n / p``."""
    x = lift(features)
    pn = x.shape[_channel_axis(x)]
    if p < 1 or pn % p:
        raise EnsembleError(f"p={p} does not divide channel count {pn}")
    step = pn // p
    idx = list(range(0, pn, step))
    if x.ndim == 3:
        return T.index_channels(x.reshape((1,) + x.shape), idx).reshape((p,) + x.shape[1:])
    return T.index_channels(x, idx)


def select_features_s2(features) -> Tensor:
    """Average all channels into one map."""
    return T.channel_avg_pool(lift(features), 1)


def select_features_s3(features, p: int) -> Tensor:
    """Average ``p`` contiguous channel groups."""
    x = lift(features)
    pn = x.shape[_channel_axis(x)]
    if p < 1 or pn % p:
        raise EnsembleError(f"p={p} does not divide channel count {pn}")
    return T.channel_avg_pool(x, p)


def unify_channels(features, strategy: str, p: int) -> Tensor:
    strategy = canonical_strategy(strategy)
    if strategy == "S1_even_sample":
        return select_features_s1(features, p)
    if strategy == "S2_channel_pool":
        return select_features_s2(features)
    return select_features_s3(features, p)


def fuse_features(selected: Sequence, omega: Sequence[float], target_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize, spatial softmax, then weighted sum across models."""
    feats = [lift(f) for f in selected]
    w = check_weights(omega, len(feats), "omega")
    channels = {f.shape[_channel_axis(f)] for f in feats}
    if len(channels) != 1:
        raise EnsembleError(f"models contribute different channel counts: {sorted(channels)}")
    out = None
    for f, wn in zip(feats, w):
        normed = T.softmax2d(T.bilinear_resize(f, *target_hw)) * float(wn)
        out = normed if out is None else out + normed
    return out


def smallest_resolution(feature_list: Sequence[Tensor]) -> tuple[int, int]:
    return min((tuple(f.shape[-2:]) for f in feature_list), key=lambda hw: hw[0] * hw[1])


def ensemble_forward(models, espec: EnsembleSpec, image, with_features: bool = True):
    """Forward every model; return ``(fused prediction, fused features or None, per-model preds)``."""
    spec = espec if espec.taps is not None else espec.resolved(models)
    feats_wanted = with_features and spec.use_features
    preds, raw = [], []
    for m, tap in zip(models, spec.taps):
        pred, feats = m(image, [tap] if feats_wanted else [])
        preds.append(pred)
        if feats_wanted:
            raw.append(feats[0])
    fused_pred = output_ensemble(preds, spec.sigma)
    if not feats_wanted:
        return fused_pred, None, preds
    selected = [unify_channels(f, spec.strategy, spec.p) for f in raw]
    hw = tuple(spec.target_hw) if spec.target_hw is not None else smallest_resolution(selected)
    return fused_pred, fuse_features(selected, spec.omega, hw), preds
