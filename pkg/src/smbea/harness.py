"""Experiment orchestration: black-box transfer evaluation with reports and ablation sweeps.

An experiment attacks a synthetic test set with source-model mini-batches and
measures how much the adversaries degrade hold-out models that were never
queried for gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack as A
from . import tsr
from .data import gen_dataset, model_targets, save_png
from .ensemble import STRATEGIES, EnsembleSpec, canonical_strategy, output_ensemble
from .losses import ObjectiveConfig, output_fooling_terms
from .tensor import Tensor
from .zoo import Model, ZooError, load_zoo, predict

logger = logging.getLogger(__name__)

ATTACKS = ("none", "noise", "smbea", "fgsm", "ifgsm", "mim", "pgd") + tuple(f"opt:{k}" for k in A.OPTIMIZERS)
SWEEPS = ("strategy", "tap_depth", "momentum", "optimizer")


class HarnessError(RuntimeError):
    pass


class IsolationError(HarnessError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "saliency"
    zoo: str = ""
    batches: list[list[str]] = field(default_factory=list)
    holdouts: list[str] = field(default_factory=list)
    attacks: list[str] = field(default_factory=lambda: ["none", "noise", "smbea", "mim", "pgd"])
    # columns of the comparison table: how many of the leading batches to attack with
    batch_counts: list[int] | None = None
    ensemble: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    n_test: int = 50
    hw: int = 64
    data_seed: int = 20_000
    seed: int = 0
    baseline_iters: int | None = None
    mim_momentum: float = 1.0
    surrogate: str | None = None
    n_panels: int = 2
    out: str | None = None

    @property
    def counts(self) -> list[int]:
        return list(self.batch_counts) if self.batch_counts else [len(self.batches)]

    def attack_config(self) -> A.AttackConfig:
        return A.AttackConfig(**self.attack)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(**dict({"task": self.task}, **self.objective))

    def ensemble_template(self) -> EnsembleSpec:
        return EnsembleSpec(**self.ensemble)

    def validate(self) -> None:
        try:
            acfg = self.attack_config()
            acfg.validate()
            ocfg = self.objective_config()
            ocfg.validate()
            canonical_strategy(self.ensemble_template().strategy)
        except (TypeError, ValueError) as exc:
            raise HarnessError(f"invalid config: {exc}") from exc
        if not self.batches:
            raise HarnessError("config lists no source batches")
        for b, names in enumerate(self.batches, 1):
            if len(names) != acfg.K:
                raise HarnessError(f"batch {b} has {len(names)} models, expected K={acfg.K}")
        sources = [n for names in self.batches for n in names]
        if len(set(sources)) != len(sources):
            raise HarnessError("a model appears in more than one source batch")
        if not self.holdouts:
            raise HarnessError("config lists no hold-out models")
        leaked = sorted(set(self.holdouts) & set(sources))
        if leaked:
            raise HarnessError(f"hold-out models also used as sources: {leaked}")
        if self.surrogate is not None and self.surrogate in self.holdouts:
            raise HarnessError("the perceptual surrogate must not be a hold-out model")
        for n in self.counts:
            if not 1 <= n <= len(self.batches):
                raise HarnessError(f"batch count {n} outside 1..{len(self.batches)}")
            if n > acfg.N:
                raise HarnessError(f"batch count {n} exceeds N={acfg.N}")
        unknown = [a for a in self.attacks if a not in ATTACKS]
        if unknown:
            raise HarnessError(f"unknown attacks {unknown}; expected some of {ATTACKS}")
        if self.n_test < 1:
            raise HarnessError("n_test must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise HarnessError(f"unknown config keys: {extra}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise HarnessError(f"cannot read config {path}: {exc}") from exc

    def with_overrides(self, ensemble=None, objective=None, attack=None, **kw) -> "ExperimentConfig":
        return replace(self, ensemble=dict(self.ensemble, **(ensemble or {})),
                       objective=dict(self.objective, **(objective or {})),
                       attack=dict(self.attack, **(attack or {})), **kw)


@dataclass
class TransferResult:
    target: str
    metric: str
    clean: float
    adversarial: float
    drop: float
    l1: float


@dataclass
class RunResult:
    key: str
    attack: str
    batches: int
    budget: float
    l1_mean: float
    l1_max: float
    transfers: list[TransferResult]
    fooling_clean: float
    fooling_adv: float
    report: A.AttackReport
    panels: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def mean_drop(self) -> float:
        return float(np.mean([t.drop for t in self.transfers]))

    @property
    def strength(self) -> float:
        """Mean drop with the sign flipped where needed so that larger is stronger."""
        sign = -1.0 if self.transfers[0].metric == "cc" else 1.0
        return sign * self.mean_drop

    @property
    def fooling_reduction(self) -> float:
        return self.fooling_clean - self.fooling_adv

    def row(self) -> dict:
        out = {"run": self.key, "attack": self.attack, "batches": self.batches, "budget": self.budget,
               "l1_mean": self.l1_mean, "l1_max": self.l1_max}
        for t in self.transfers:
            out[f"drop[{t.target}]"] = t.drop
        out.update(mean_drop=self.mean_drop, strength=self.strength,
                   fooling_reduction=self.fooling_reduction)
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult]
    isolation: dict[str, int]

    def table(self) -> list[dict]:
        return [r.row() for r in self.runs]

    def run(self, attack: str, batches: int) -> RunResult:
        for r in self.runs:
            if r.attack == attack and r.batches == batches:
                return r
        raise KeyError((attack, batches))


# -- metrics -------------------------------------------------------------------------------------

def pearson_cc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image linear correlation coefficient; 0 for a constant map."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    denom = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    return np.where(denom > 0, (a * b).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)


def per_image_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)


def task_metric(task: str):
    return ("cc", pearson_cc) if task == "saliency" else ("mse", per_image_mse)


def evaluate_transfer(models: dict[str, Model], holdouts: Sequence[str], task: str, clean: np.ndarray,
                      adv: np.ndarray, truth: np.ndarray) -> list[TransferResult]:
    """Drop of each hold-out model's metric against ground truth (adversarial minus clean)."""
    name, fn = task_metric(task)
    l1 = float(np.mean(A.l1_distance(clean, adv)))
    out = []
    for h in holdouts:
        c = float(np.mean(fn(predict(models[h], clean), truth)))
        a = float(np.mean(fn(predict(models[h], adv), truth)))
        out.append(TransferResult(h, name, c, a, a - c, l1))
    return out


def source_fooling(models: Sequence[Model], images: np.ndarray, guide_target: np.ndarray,
                   ocfg: ObjectiveConfig, surrogate=None) -> float:
    """Mean output-space fooling loss of the uniform source ensemble (no gradients)."""
    preds = [Tensor(predict(m, images)) for m in models]
    fused = output_ensemble(preds, [1.0 / len(preds)] * len(preds))
    terms = output_fooling_terms(fused, guide_target, ocfg, surrogate)
    total = sum(np.asarray(v.data) for v in terms.values())
    return float(np.mean(total))


# -- experiment ----------------------------------------------------------------------------------

def load_models(cfg: ExperimentConfig, models: dict[str, Model] | None = None) -> dict[str, Model]:
    names = [n for b in cfg.batches for n in b] + list(cfg.holdouts)
    if cfg.surrogate:
        names.append(cfg.surrogate)
    if models is not None:
        missing = [n for n in names if n not in models]
        if missing:
            raise HarnessError(f"models missing from the supplied zoo: {missing}")
        return models
    try:
        index = json.loads((Path(cfg.zoo) / "zoo.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise HarnessError(f"no zoo at {cfg.zoo!r}: {exc}") from exc
    if index.get("task") != cfg.task:
        raise HarnessError(f"zoo {cfg.zoo} was built for task {index.get('task')!r}, not {cfg.task!r}")
    try:
        return load_zoo(cfg.zoo, sorted(set(names)))
    except ZooError as exc:
        raise HarnessError(str(exc)) from exc


def eval_split(cfg: ExperimentConfig):
    """Test images, their ground truth, and derangement guides (sample k is guided by k+1)."""
    ds = gen_dataset(cfg.task, cfg.n_test, cfg.hw, seed=cfg.data_seed)
    order = np.roll(np.arange(cfg.n_test), -1)
    guide = ds.inputs[order]
    guide_target = model_targets(cfg.task, ds.targets[order])
    return ds.inputs, ds.targets, guide, guide_target


def _craft(name: str, n: int, cfg: ExperimentConfig, models: dict[str, Model], clean, guide, guide_target,
           acfg: A.AttackConfig, ocfg: ObjectiveConfig, surrogate):
    batches = [[models[m] for m in b] for b in cfg.batches[:n]]
    flat = [m for b in batches for m in b]
    budget = A.constraint_schedule(acfg, n)[-1]
    espec = cfg.ensemble_template()
    iters = cfg.baseline_iters or acfg.X
    if name == "none":
        return clean.copy(), A.AttackReport(), 0.0
    if name == "noise":
        return A.random_noise(clean, budget, seed=cfg.seed), A.AttackReport(), budget
    if name == "smbea":
        adv, rep = A.run_smbea(clean, guide, guide_target, batches, espec, ocfg, acfg, surrogate=surrogate)
        return adv, rep, budget
    if name.startswith("opt:"):
        adv, rep = A.run_optimizer_attack(name[4:], clean, guide, guide_target, flat, espec, ocfg, acfg,
                                          budget=budget)
        return adv, rep, budget
    adv, rep = A.run_baseline(name, clean, guide, guide_target, flat, espec, ocfg, budget=budget, iters=iters,
                              momentum=cfg.mim_momentum, seed=cfg.seed, surrogate=surrogate)
    return adv, rep, budget


def run_experiment(cfg: ExperimentConfig, models: dict[str, Model] | None = None) -> ExperimentResult:
    """Attack the test set with every configured attack at every batch count and measure transfer."""
    cfg.validate()
    models = load_models(cfg, models)
    acfg, ocfg = cfg.attack_config(), cfg.objective_config()
    surrogate = models[cfg.surrogate] if cfg.surrogate else None
    clean, truth, guide, guide_target = eval_split(cfg)
    for m in models.values():
        m.freeze()
        m.grad_calls = 0
    runs = []
    for n in cfg.counts:
        sources = [models[m] for b in cfg.batches[:n] for m in b]
        fool_clean = source_fooling(sources, clean, guide_target, ocfg, surrogate)
        for name in cfg.attacks:
            logger.info("attack %s with %d batch(es)", name, n)
            adv, rep, budget = _craft(name, n, cfg, models, clean, guide, guide_target, acfg, ocfg, surrogate)
            leaked = {h: models[h].grad_calls for h in cfg.holdouts if models[h].grad_calls}
            if leaked:
                raise IsolationError(f"hold-out gradients computed during crafting: {leaked}")
            l1 = A.l1_distance(clean, adv)
            k = min(cfg.n_panels, len(clean))
            head = models[cfg.holdouts[0]]
            panels = {"clean": clean[:k], "adv": adv[:k], "clean_out": predict(head, clean[:k]),
                      "adv_out": predict(head, adv[:k]), "guide_out": predict(head, guide[:k])}
            runs.append(RunResult(
                key=f"{name.replace(':', '-')}-b{n}", attack=name, batches=n, budget=budget,
                l1_mean=float(np.mean(l1)), l1_max=float(np.max(l1)),
                transfers=evaluate_transfer(models, cfg.holdouts, cfg.task, clean, adv, truth),
                fooling_clean=fool_clean,
                fooling_adv=source_fooling(sources, adv, guide_target, ocfg, surrogate),
                report=rep, panels=panels))
    isolation = {h: models[h].grad_calls for h in cfg.holdouts}
    result = ExperimentResult(cfg, runs, isolation)
    if cfg.out:
        write_report(result, cfg.out)
    return result


# -- reports ---------------------------------------------------------------------------------

PANEL_ORDER = ("clean", "adv", "perturbation", "clean_out", "adv_out", "guide_out")


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_report(result: ExperimentResult, path: str | Path) -> list[Path]:
    """Persist the raw run data, then render the summary tables and PNG panels from it."""
    if not result.runs:
        raise HarnessError("report: no results to write")
    path = Path(path)
    try:
        (path / "arrays").mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(_json(result.config.to_dict()))
        runs = []
        with open(path / "trace.jsonl", "w") as fh:
            for r in result.runs:
                for rec in r.report.records:
                    fh.write(json.dumps(dict(rec, run=r.key), sort_keys=True) + "\n")
                runs.append({"row": r.row(), "summary": r.report.summary,
                             "transfers": [asdict(t) for t in r.transfers],
                             "fooling_clean": r.fooling_clean, "fooling_adv": r.fooling_adv})
                for kind, arr in r.panels.items():
                    tsr.save(path / "arrays" / f"{r.key}.{kind}.tsr", arr)
        (path / "runs.json").write_text(_json({"runs": runs, "isolation": result.isolation}))
    except OSError as exc:
        raise HarnessError(f"report: cannot write to {path}: {exc}") from exc
    return render_report(path)


def summary_table(rows: Sequence[dict]) -> str:
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def pivot_table(rows: Sequence[dict], value: str = "mean_drop") -> str:
    """Markdown table: one row per attack, one column per batch count."""
    counts = sorted({r["batches"] for r in rows})
    attacks = list(dict.fromkeys(r["attack"] for r in rows))
    budgets = {n: next(r["budget"] for r in rows if r["batches"] == n and r["attack"] != "none")
               for n in counts if any(r["batches"] == n and r["attack"] != "none" for r in rows)}
    head = "| attack | " + " | ".join(f"{n} batch(es), L1 <= {budgets.get(n, 0):.4g}" for n in counts) + " |"
    lines = [head, "|" + "---|" * (len(counts) + 1)]
    for a in attacks:
        cells = []
        for n in counts:
            hit = [r for r in rows if r["attack"] == a and r["batches"] == n]
            cells.append(f"{hit[0][value]:+.4f}" if hit else "")
        lines.append(f"| {a} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def panel_image(arrays: dict[str, np.ndarray], k: int) -> np.ndarray:
    """Side-by-side RGB strip for test image ``k``."""
    def rgb(x):
        x = np.clip(x, 0.0, 1.0)
        return np.repeat(x, 3, axis=0) if x.shape[0] == 1 else x

    tiles = {name: arrays[name][k] for name in ("clean", "adv", "clean_out", "adv_out", "guide_out")}
    tiles["perturbation"] = perturbation_panel(arrays["clean"][k], arrays["adv"][k])
    return np.concatenate([rgb(tiles[name]) for name in PANEL_ORDER], axis=2)


def perturbation_panel(clean: np.ndarray, adv: np.ndarray) -> np.ndarray:
    return np.clip(10.0 * np.abs(clean - adv), 0.0, 1.0)


def render_report(path: str | Path) -> list[Path]:
    """Regenerate tables and panels from a saved trace directory (byte-deterministic)."""
    path = Path(path)
    try:
        data = json.loads((path / "runs.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise HarnessError(f"report: no readable run data in {path}: {exc}") from exc
    rows = [r["row"] for r in data["runs"]]
    if not rows:
        raise HarnessError("report: no results to render")
    written = [path / "summary.tsv", path / "summary.md"]
    written[0].write_text(summary_table(rows))
    written[1].write_text("# Mean hold-out drop\n\n" + pivot_table(rows) + "\n# Source fooling-loss reduction\n\n"
                          + pivot_table(rows, "fooling_reduction"))
    (path / "panels").mkdir(exist_ok=True)
    for r in rows:
        arrays = {}
        for kind in ("clean", "adv", "clean_out", "adv_out", "guide_out"):
            f = path / "arrays" / f"{r['run']}.{kind}.tsr"
            if f.exists():
                arrays[kind] = tsr.load(f)
        if len(arrays) < 5:
            continue
        for k in range(arrays["clean"].shape[0]):
            out = path / "panels" / f"{r['run']}-{k}.png"
            save_png(panel_image(arrays, k), out)
            written.append(out)
    return written


# -- ablations -----------------------------------------------------------------------------------

def _sweep_settings(sweep: str, cfg: ExperimentConfig, models: dict[str, Model]) -> list[dict]:
    if sweep == "strategy":
        return [{"label": s, "ensemble": {"strategy": s}} for s in STRATEGIES]
    if sweep == "momentum":
        return [
            {"label": "full", "attack": {}},
            {"label": "no_carry", "attack": {"beta1": 0.0, "beta2": 0.0}},
            {"label": "no_carry_m", "attack": {"beta1": 0.0}},
            {"label": "no_carry_v", "attack": {"beta2": 0.0}},
            {"label": "no_intra_m", "attack": {"mu1": 0.0}},
        ]
    if sweep == "optimizer":
        return [{"label": k, "attacks": [f"opt:{k}"]} for k in A.OPTIMIZERS]
    if sweep == "tap_depth":
        sources = [models[n] for b in cfg.batches for n in b]
        common = [t for t in sources[0].spec.tap_layers if all(t in m.spec.tap_layers for m in sources)]
        if not common:
            raise HarnessError("source models share no tap layer")
        ordered = sorted(common, key=sources[0].spec.tap_depth)
        return [{"label": t, "depth": sources[0].spec.tap_depth(t),
                 "ensemble": {"taps": [t] * cfg.attack_config().K}} for t in ordered]
    raise HarnessError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def ablation_run(cfg: ExperimentConfig, sweep: str, settings: Sequence[dict] | None = None,
                 models: dict[str, Model] | None = None) -> list[dict]:
    """Run SMBEA once per sweep setting (same data and seeds); one row per setting and batch count."""
    models = load_models(cfg, models)
    if settings is None:
        settings = _sweep_settings(sweep, cfg, models)
    if not settings:
        raise HarnessError("empty sweep")
    rows = []
    for s in settings:
        sub = cfg.with_overrides(ensemble=s.get("ensemble"), attack=s.get("attack"),
                                 attacks=list(s.get("attacks", ["smbea"])), out=None)
        res = run_experiment(sub, models)
        for r in res.runs:
            row = {"sweep": sweep, "setting": s["label"]}
            if "depth" in s:
                row["depth"] = s["depth"]
            row.update(r.row())
            rows.append(row)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation-{sweep}.tsv").write_text(summary_table(rows))
        (out / f"ablation-{sweep}.json").write_text(_json(rows))
    return rows
