"""Serial mini-batch ensemble attack plus baseline attacks and optimizer variants.

All image arrays may be a single ``(C, H, W)`` image or an ``(N, C, H, W)``
stack; L1 norms and stopping guards are evaluated per image.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ensemble import EnsembleSpec, ensemble_forward
from .losses import ObjectiveConfig, objective_combined
from .tensor import Tensor

logger = logging.getLogger(__name__)

IMG_AXES = (-3, -2, -1)
BASELINES = ("fgsm", "ifgsm", "mim", "pgd")
OPTIMIZERS = ("sgd", "msgd", "adagrad", "rmsprop", "adam")

GradFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, dict]]


class AttackError(ValueError):
    pass


@dataclass
class AttackConfig:
    mu1: float = 0.9
    mu2: float = 0.99
    eps: float = 1e-8
    X: int = 20
    alpha: float = 2e-4
    beta1: float = 0.10
    beta2: float = 0.01
    beta3: float = 0.60
    N: int = 5
    T1_first: float = 1e-2
    K: int = 4
    # fixed per-batch bounds override the beta3 schedule when given
    budgets: list[float] | None = None

    def validate(self) -> None:
        if not (0 <= self.mu1 < 1 and 0 <= self.mu2 < 1):
            raise AttackError("mu1 and mu2 must lie in [0, 1)")
        for name in ("beta1", "beta2", "beta3"):
            if not 0 <= getattr(self, name) <= 1:
                raise AttackError(f"{name} must lie in [0, 1]")
        if self.alpha <= 0 or self.eps < 0:
            raise AttackError("alpha must be > 0 and eps >= 0")
        if self.X < 0 or self.N < 1 or self.K < 1:
            raise AttackError("X must be >= 0 and N, K >= 1")
        if self.T1_first <= 0:
            raise AttackError("T1_first must be positive")

    def bound(self, i: int) -> float:
        return constraint_schedule(self, i)[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def constraint_schedule(cfg: AttackConfig, n: int) -> list[float]:
    """Perceptual bounds for batches ``1..n``.

    Evaluated in decimal arithmetic on the configured values so that, e.g.,
    ``T1 = 0.01, beta3 = 0.6`` gives exactly ``0.0136`` and ``0.01576``.
    """
    if cfg.budgets is not None:
        if len(cfg.budgets) < n:
            raise AttackError(f"fixed budgets cover {len(cfg.budgets)} batches, need {n}")
        return [float(b) for b in cfg.budgets[:n]]
    first = Decimal(repr(float(cfg.T1_first)))
    beta3 = Decimal(repr(float(cfg.beta3)))
    bounds = [first]
    for i in range(2, n + 1):
        bounds.append(bounds[-1] + beta3 ** i * first)
    return [float(b) for b in bounds]


def l1_distance(clean: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Averaged per-element L1 distance, one value per image."""
    return np.abs(np.asarray(adv) - np.asarray(clean)).mean(axis=IMG_AXES)


def _per_image(values, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    """Divide each image's gradient by its L1 norm; an all-zero gradient stays zero."""
    g = np.asarray(g, dtype=np.float64)
    norm = np.abs(g).sum(axis=IMG_AXES, keepdims=True)
    if np.any(norm == 0):
        logger.warning("zero gradient encountered; normalised gradient left at zero")
    safe = np.where(norm == 0, 1.0, norm)
    return g / safe


def clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


# -- objective gradient ---------------------------------------------------------------

class EnsembleObjective:
    """Gradient of the combined objective for one mini-batch of frozen models.

    Image stacks are evaluated in chunks holding at most ``max_model_images``
    (model, image) pairs, which bounds the memory held by one autodiff graph.
    Every term is per image, so chunking does not change the result.
    """

    def __init__(self, models, espec: EnsembleSpec, ocfg: ObjectiveConfig, clean: np.ndarray,
                 guide: np.ndarray, guide_target: np.ndarray, surrogate=None, max_model_images: int = 200):
        ocfg.validate()
        self.models = list(models)
        if not self.models:
            raise AttackError("a mini-batch needs at least one model")
        self.chunk = max(1, max_model_images // len(self.models))
        for m in self.models:
            if not m.frozen:
                raise AttackError(f"model {m.name} must be frozen before attacking")
        self.espec = espec.resolved(self.models)
        self.ocfg = ocfg
        self.clean = np.asarray(clean, dtype=np.float64)
        self.guide_target = np.asarray(guide_target, dtype=np.float64)
        self.surrogate = surrogate
        guide = np.asarray(guide, dtype=np.float64)
        if guide.shape != self.clean.shape:
            raise AttackError(f"guide shape {guide.shape} differs from image shape {self.clean.shape}")
        out_ch = self.models[0].spec.output_channels
        if self.guide_target.shape[-3] != out_ch:
            raise AttackError(f"guide target has {self.guide_target.shape[-3]} channels, models emit {out_ch}")
        self.guide_features = None
        if self.espec.use_features and ocfg.lambda2:
            parts = [ensemble_forward(self.models, self.espec, Tensor(part))[1].data
                     for part in self._chunks(guide)]
            self.guide_features = parts[0] if guide.ndim < 4 else np.concatenate(parts)

    def _rows(self, arr, idx):
        if arr is None:
            return None
        return arr if idx is None else arr[idx]

    def _chunks(self, images: np.ndarray):
        if images.ndim < 4:
            return [images]
        return [images[s:s + self.chunk] for s in range(0, len(images), self.chunk)]

    def value_and_grad(self, adv: np.ndarray, idx: np.ndarray | None = None):
        """Objective terms and gradient w.r.t. ``adv`` (restricted to rows ``idx`` of a stack)."""
        adv = np.asarray(adv, dtype=np.float64)
        if adv.ndim < 4 or len(adv) <= self.chunk:
            return self._value_and_grad(adv, idx)
        rows = np.arange(len(adv)) if idx is None else np.asarray(idx)
        parts = [self._value_and_grad(adv[s:s + self.chunk], rows[s:s + self.chunk])
                 for s in range(0, len(adv), self.chunk)]
        info = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
        return np.concatenate([p[0] for p in parts]), info

    def _value_and_grad(self, adv: np.ndarray, idx: np.ndarray | None):
        x = Tensor(np.array(adv, dtype=np.float64), requires_grad=True)
        pred, fused, _ = ensemble_forward(self.models, self.espec, x,
                                          with_features=self.guide_features is not None)
        total, terms = objective_combined(
            pred, self._rows(self.guide_target, idx), self._rows(self.clean, idx), x,
            fused, self._rows(self.guide_features, idx), self.ocfg,
            surrogate=self.surrogate, return_terms=True)
        (g,) = T.backward(total.sum(), [x])
        info = {k: np.asarray(v.data) for k, v in terms.items()}
        info["objective"] = np.asarray(total.data)
        return g, info

    def __call__(self, adv: np.ndarray, idx: np.ndarray | None = None):
        return self.value_and_grad(adv, idx)


# -- state and report --------------------------------------------------------------------

@dataclass
class AttackState:
    I_clean: np.ndarray
    G: np.ndarray
    guide_target: np.ndarray
    I_adv: np.ndarray
    m: np.ndarray
    v: np.ndarray
    m_carry: np.ndarray | None = None
    v_carry: np.ndarray | None = None
    t: np.ndarray | int = 0
    i: int = 1
    T1_i: float = 0.0

    @classmethod
    def start(cls, clean, guide, guide_target, acfg: AttackConfig) -> "AttackState":
        clean = np.asarray(clean, dtype=np.float64)
        z = np.zeros_like(clean)
        t0 = np.zeros(clean.shape[:-3], dtype=int)
        return cls(clean, np.asarray(guide, dtype=np.float64), np.asarray(guide_target, dtype=np.float64),
                   clean.copy(), z, z.copy(), None, None, t0, 1, constraint_schedule(acfg, 1)[0])

    @property
    def batched(self) -> bool:
        return self.I_clean.ndim == 4


@dataclass
class AttackReport:
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def log(self, batch: int, it: int, info: dict, l1: np.ndarray, active: int, bound: float) -> None:
        rec = {"batch": int(batch), "iter": int(it), "n_active": int(active), "bound": float(bound),
               "l1": float(np.mean(l1))}
        for k, v in info.items():
            rec[k] = float(np.mean(v))
        if self.records:
            last = self.records[-1]
            if (last["batch"], last["iter"]) >= (rec["batch"], rec["iter"]):
                raise AttackError("trace records must be strictly ordered by (batch, iter)")
        self.records.append(rec)

    def extend(self, other: "AttackReport") -> None:
        for rec in other.records:
            self.records.append(rec)


# -- update rules ---------------------------------------------------------------------------

def adam_update(adv, m, v, g_hat, t, acfg: AttackConfig, m_carry=None, v_carry=None):
    """One Adam-style step with optional long-term carries in the bias corrections.

    Returns ``(new_adv, m, v, m_hat, v_hat)``. ``t`` may be per image.
    """
    m = acfg.mu1 * m + (1.0 - acfg.mu1) * g_hat
    v = acfg.mu2 * v + (1.0 - acfg.mu2) * g_hat * g_hat
    tt = _per_image(t, m)
    m_hat = m / (1.0 - acfg.mu1 ** tt)
    v_hat = v / (1.0 - acfg.mu2 ** tt)
    if m_carry is not None:
        m_hat = m_hat + acfg.beta1 * m_carry
    if v_carry is not None:
        v_hat = v_hat + acfg.beta2 * v_carry
    new_adv = clip01(adv - acfg.alpha * (1.0 / (np.sqrt(v_hat) + acfg.eps)) * m_hat)
    return new_adv, m, v, m_hat, v_hat


def _objective_for(state: AttackState, batch_models, espec, ocfg, surrogate=None) -> EnsembleObjective:
    return EnsembleObjective(batch_models, espec, ocfg, state.I_clean, state.G, state.guide_target,
                             surrogate=surrogate)


def _batch_loop(state: AttackState, grad_fn: GradFn, acfg: AttackConfig, carries: bool,
                report: AttackReport | None) -> AttackState:
    adv = state.I_adv.copy()
    m, v = state.m.copy(), state.v.copy()
    t = np.array(state.t, dtype=int, copy=True)
    active = np.ones(t.shape, dtype=bool)
    step = 0
    while True:
        # guard order: (i <= N) is checked by the caller, then t < X, then the L1 bound
        l1 = l1_distance(state.I_clean, adv)
        active &= (t < acfg.X) & (l1 <= state.T1_i)
        if not np.any(active):
            break
        step += 1
        idx = np.flatnonzero(active) if state.batched else None
        rows = adv if idx is None else adv[idx]
        g, info = grad_fn(rows, idx)
        g_hat = normalize_gradient(g)
        t_next = t + active
        sel = (lambda a: a) if idx is None else (lambda a: a[idx])
        new_rows, m_rows, v_rows, _, _ = adam_update(
            rows, sel(m), sel(v), g_hat, sel(t_next), acfg,
            sel(state.m_carry) if carries else None, sel(state.v_carry) if carries else None)
        if idx is None:
            adv, m, v = new_rows, m_rows, v_rows
        else:
            adv[idx], m[idx], v[idx] = new_rows, m_rows, v_rows
        t = t_next
        if report is not None:
            report.log(state.i, step, info, l1_distance(state.I_clean, adv), int(np.sum(active)), state.T1_i)
    return replace(state, I_adv=adv, m=m, v=v, t=t)


def intra_batch_run(state: AttackState, batch_models=None, espec: EnsembleSpec | None = None,
                    ocfg: ObjectiveConfig | None = None, acfg: AttackConfig | None = None,
                    grad_fn: GradFn | None = None, report: AttackReport | None = None,
                    surrogate=None) -> AttackState:
    """First mini-batch: Adam-style iterations from zero momentums under bound ``T1``.

    ``grad_fn`` (adv rows, row indices) -> (raw gradient, term values) replaces
    the model-based objective when given.
    """
    acfg = acfg or AttackConfig()
    acfg.validate()
    if state.i != 1:
        raise AttackError(f"intra-batch rules apply to batch 1, state is at batch {state.i}")
    if grad_fn is None:
        grad_fn = _objective_for(state, batch_models, espec or EnsembleSpec(), ocfg or ObjectiveConfig(),
                                 surrogate)
    zero = np.zeros_like(state.I_clean)
    state = replace(state, I_adv=state.I_clean.copy(), m=zero, v=zero.copy(),
                    t=np.zeros(state.I_clean.shape[:-3], dtype=int), T1_i=constraint_schedule(acfg, 1)[0])
    return _batch_loop(state, grad_fn, acfg, carries=False, report=report)


def inter_batch_run(state: AttackState, batch_models=None, espec: EnsembleSpec | None = None,
                    ocfg: ObjectiveConfig | None = None, acfg: AttackConfig | None = None,
                    grad_fn: GradFn | None = None, report: AttackReport | None = None,
                    surrogate=None) -> AttackState:
    """Batch ``i >= 2``: carried momentums, widened bound, modified bias corrections.

    ``state`` holds the previous batch's adversary and final momentums in
    ``I_adv``/``m``/``v`` and its batch index ``i - 1`` in ``state.i``.
    Returns the state for the next batch with ``i`` incremented.
    """
    acfg = acfg or AttackConfig()
    acfg.validate()
    if state.m is None or state.v is None:
        raise AttackError("inter-batch run needs the previous batch's momentums")
    i = state.i + 1
    if i > acfg.N:
        # the while-guard's first clause: nothing to do past N
        return replace(state, i=i)
    m_prev, v_prev = state.m, state.v
    new = replace(state, i=i, m=acfg.beta1 * m_prev, v=acfg.beta2 * v_prev, m_carry=m_prev, v_carry=v_prev,
                  t=np.zeros(state.I_clean.shape[:-3], dtype=int), T1_i=constraint_schedule(acfg, i)[-1])
    if grad_fn is None:
        grad_fn = _objective_for(new, batch_models, espec or EnsembleSpec(), ocfg or ObjectiveConfig(),
                                 surrogate)
    return _batch_loop(new, grad_fn, acfg, carries=True, report=report)


def run_smbea(clean, guide, guide_target, batches: Sequence[Sequence], espec=None,
              ocfg: ObjectiveConfig | None = None, acfg: AttackConfig | None = None,
              grad_fns: Sequence[GradFn] | None = None, surrogate=None):
    """Attack ``batches`` of models serially; returns ``(adversary, report)``.

    ``espec`` is one template for every batch or a list with one per batch.
    """
    acfg = acfg or AttackConfig()
    ocfg = ocfg or ObjectiveConfig()
    n = len(batches) if grad_fns is None else len(grad_fns)
    if n == 0:
        raise AttackError("need at least one mini-batch")
    if n > acfg.N:
        raise AttackError(f"{n} batches exceed the configured maximum N={acfg.N}")
    especs = list(espec) if isinstance(espec, (list, tuple)) else [espec or EnsembleSpec()] * n
    report = AttackReport()
    state = AttackState.start(clean, guide, guide_target, acfg)
    for b in range(n):
        kwargs = dict(espec=especs[b], ocfg=ocfg, acfg=acfg, report=report, surrogate=surrogate,
                      grad_fn=None if grad_fns is None else grad_fns[b],
                      batch_models=None if grad_fns is not None else batches[b])
        state = intra_batch_run(state, **kwargs) if b == 0 else inter_batch_run(state, **kwargs)
    l1 = l1_distance(state.I_clean, state.I_adv)
    report.summary = {"attack": "smbea", "batches": n, "final_bound": state.T1_i,
                      "l1_mean": float(np.mean(l1)), "l1_max": float(np.max(l1))}
    return state.I_adv, report


# -- baselines ---------------------------------------------------------------------------------

def project_l1(delta: np.ndarray, budget: float) -> np.ndarray:
    """Euclidean projection of each image's perturbation onto ``mean|delta| <= budget``."""
    delta = np.asarray(delta, dtype=np.float64)
    flat = delta.reshape(delta.shape[:-3] + (-1,))
    radius = budget * flat.shape[-1]
    out = flat.copy()
    for idx in np.ndindex(flat.shape[:-1]):
        row = flat[idx]
        a = np.abs(row)
        if a.sum() <= radius:
            continue
        u = np.sort(a)[::-1]
        css = np.cumsum(u)
        k = np.arange(1, u.size + 1)
        rho = np.nonzero(u * k > css - radius)[0][-1]
        theta = (css[rho] - radius) / (rho + 1.0)
        out[idx] = np.sign(row) * np.maximum(a - theta, 0.0)
    return out.reshape(delta.shape)


def run_baseline(kind: str, clean, guide, guide_target, models, espec=None,
                 ocfg: ObjectiveConfig | None = None, budget: float = 1e-2, iters: int = 20,
                 step: float | None = None, momentum: float = 1.0, seed: int = 0,
                 grad_fn: GradFn | None = None, surrogate=None):
    """Targeted ensemble baselines minimising the same objective under the same L1 guard.

    All models are attacked in parallel. ``step`` defaults to ``budget / iters``
    (``budget`` for one-shot FGSM). PGD starts from a random point inside the
    budget ball and projects back onto it after every step.
    """
    if kind not in BASELINES:
        raise AttackError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    ocfg = ocfg or ObjectiveConfig()
    clean = np.asarray(clean, dtype=np.float64)
    if grad_fn is None:
        grad_fn = EnsembleObjective(models, espec or EnsembleSpec(), ocfg, clean, guide, guide_target,
                                    surrogate=surrogate)
    if kind == "fgsm":
        iters = 1
    if step is None:
        step = budget if kind == "fgsm" else budget / max(iters, 1)
    batched = clean.ndim == 4
    adv = clean.copy()
    if kind == "pgd":
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-budget, budget, size=clean.shape)
        adv = clip01(clean + project_l1(noise, budget))
    acc = np.zeros_like(clean)
    t = np.zeros(clean.shape[:-3], dtype=int)
    active = np.ones(t.shape, dtype=bool)
    report = AttackReport()
    it = 0
    while True:
        l1 = l1_distance(clean, adv)
        active &= (t < iters) & (l1 <= budget)
        if not np.any(active):
            break
        it += 1
        idx = np.flatnonzero(active) if batched else None
        rows = adv if idx is None else adv[idx]
        g, info = grad_fn(rows, idx)
        if kind == "mim":
            prev = acc if idx is None else acc[idx]
            direction = momentum * prev + normalize_gradient(g)
            if idx is None:
                acc = direction
            else:
                acc[idx] = direction
        else:
            direction = g
        new_rows = clip01(rows - step * np.sign(direction))
        if kind == "pgd":
            c = clean if idx is None else clean[idx]
            new_rows = clip01(c + project_l1(new_rows - c, budget))
        if idx is None:
            adv = new_rows
        else:
            adv[idx] = new_rows
        t = t + active
        report.log(1, it, info, l1_distance(clean, adv), int(np.sum(active)), budget)
    l1 = l1_distance(clean, adv)
    report.summary = {"attack": kind, "budget": budget, "l1_mean": float(np.mean(l1)),
                      "l1_max": float(np.max(l1))}
    return adv, report


def random_noise(clean, budget: float, seed: int = 0) -> np.ndarray:
    """Random-sign perturbation of magnitude ``budget`` per element, clipped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=clean.shape)
    return clip01(clean + budget * signs)


# -- optimizer variants ---------------------------------------------------------------------------

def init_optimizer_state(kind: str, adv: np.ndarray) -> dict:
    if kind not in OPTIMIZERS:
        raise AttackError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
    z = np.zeros_like(adv)
    return {"kind": kind, "adv": np.array(adv, dtype=np.float64), "t": 0, "m": z, "v": z.copy()}


def optimizer_variant_step(kind: str, state: dict, g_hat: np.ndarray, acfg: AttackConfig | None = None,
                           m_carry=None, v_carry=None) -> dict:
    """One update of the adversary with the named optimiser on a normalised gradient."""
    acfg = acfg or AttackConfig()
    if kind not in OPTIMIZERS:
        raise AttackError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
    s = dict(state)
    s["t"] = state["t"] + 1
    adv, a = state["adv"], acfg.alpha
    if kind == "sgd":
        s["adv"] = clip01(adv - a * g_hat)
    elif kind == "msgd":
        s["m"] = acfg.mu1 * state["m"] + g_hat
        s["adv"] = clip01(adv - a * s["m"])
    elif kind == "adagrad":
        s["v"] = state["v"] + g_hat * g_hat
        s["adv"] = clip01(adv - a * g_hat / (np.sqrt(s["v"]) + acfg.eps))
    elif kind == "rmsprop":
        s["v"] = acfg.mu2 * state["v"] + (1.0 - acfg.mu2) * g_hat * g_hat
        s["adv"] = clip01(adv - a * g_hat / (np.sqrt(s["v"]) + acfg.eps))
    else:
        s["adv"], s["m"], s["v"], _, _ = adam_update(adv, state["m"], state["v"], g_hat, s["t"], acfg,
                                                      m_carry, v_carry)
    return s


def run_optimizer_attack(kind: str, clean, guide, guide_target, models, espec=None,
                         ocfg: ObjectiveConfig | None = None, acfg: AttackConfig | None = None,
                         budget: float | None = None, grad_fn: GradFn | None = None):
    """Single-batch attack driven by one of the five optimisers, same guard as the intra-batch rules."""
    acfg = acfg or AttackConfig()
    ocfg = ocfg or ObjectiveConfig()
    budget = acfg.T1_first if budget is None else budget
    clean = np.asarray(clean, dtype=np.float64)
    if grad_fn is None:
        grad_fn = EnsembleObjective(models, espec or EnsembleSpec(), ocfg, clean, guide, guide_target)
    state = init_optimizer_state(kind, clean)
    report = AttackReport()
    # whole-stack guard keeps per-image optimiser state aligned; stops once every image is out of budget
    for it in range(1, acfg.X + 1):
        l1 = l1_distance(clean, state["adv"])
        if np.all(l1 > budget):
            break
        g, info = grad_fn(state["adv"], None)
        g_hat = normalize_gradient(g)
        new = optimizer_variant_step(kind, state, g_hat, acfg)
        keep = _per_image(l1 > budget, clean)
        new["adv"] = np.where(keep, state["adv"], new["adv"])
        state = new
        report.log(1, it, info, l1_distance(clean, state["adv"]), int(np.sum(l1 <= budget)), budget)
    return state["adv"], report
