"""Command-line entry point: ``smbea <group> <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .data import gen_dataset, save_dataset, save_png
from .zoo import ZooBuildConfig, build_zoo


def _zoo_build(args) -> None:
    cfg = ZooBuildConfig(task=args.task, seed=args.seed, n_specs=args.n_specs, n_train=args.n_train,
                         epochs=args.epochs, hw=args.hw)
    index = build_zoo(cfg, args.out)
    print(f"built {len(index['models'])} models in {args.out}")


def _dataset_gen(args) -> None:
    ds = gen_dataset(args.task, args.n, args.hw, args.seed)
    path = save_dataset(ds, args.out)
    if args.png:
        png_dir = Path(args.out) / "png"
        png_dir.mkdir(parents=True, exist_ok=True)
        for k in range(len(ds)):
            save_png(ds.inputs[k], png_dir / f"{k:04d}-input.png")
            target = ds.targets[k]
            if args.task == "saliency":
                target = target / target.max()
            save_png(target, png_dir / f"{k:04d}-target.png")
    print(f"wrote {len(ds)} {args.task} pairs to {path}")


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.out = args.out
    return cfg


def _attack_run(args) -> None:
    cfg = _load_config(args)
    result = harness.run_experiment(cfg)
    sys.stdout.write(harness.pivot_table(result.table()))
    if cfg.out:
        print(f"report written to {cfg.out}")


def _ablate(args) -> None:
    cfg = _load_config(args)
    rows = harness.ablation_run(cfg, args.sweep)
    sys.stdout.write(harness.summary_table(rows))


def _report_render(args) -> None:
    files = harness.render_report(args.trace)
    print(f"rendered {len(files)} files in {args.trace}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smbea", description="Serial mini-batch ensemble attack toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    groups = p.add_subparsers(dest="group", required=True)

    zoo = groups.add_parser("zoo", help="model zoo").add_subparsers(dest="command", required=True)
    zb = zoo.add_parser("build", help="train the source/target model zoo")
    zb.add_argument("--task", choices=("saliency", "translation"), required=True)
    zb.add_argument("--out", required=True)
    zb.add_argument("--seed", type=int, default=0)
    zb.add_argument("--n-specs", type=int, default=16)
    zb.add_argument("--n-train", type=int, default=200)
    zb.add_argument("--epochs", type=int, default=8)
    zb.add_argument("--hw", type=int, default=64)
    zb.set_defaults(func=_zoo_build, stage="zoo build")

    ds = groups.add_parser("dataset", help="synthetic data").add_subparsers(dest="command", required=True)
    dg = ds.add_parser("gen", help="generate a paired dataset")
    dg.add_argument("--task", choices=("saliency", "translation"), required=True)
    dg.add_argument("--n", type=int, default=50)
    dg.add_argument("--hw", type=int, default=64)
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--out", required=True)
    dg.add_argument("--png", action="store_true", help="also write every pair as PNG")
    dg.set_defaults(func=_dataset_gen, stage="dataset gen")

    at = groups.add_parser("attack", help="attacks").add_subparsers(dest="command", required=True)
    ar = at.add_parser("run", help="run a transfer experiment from a JSON config")
    ar.add_argument("--config", required=True)
    ar.add_argument("--out", help="override the config's output directory")
    ar.set_defaults(func=_attack_run, stage="attack run")

    ab = groups.add_parser("ablate", help="run an ablation sweep")
    ab.add_argument("--config", required=True)
    ab.add_argument("--sweep", choices=harness.SWEEPS, required=True)
    ab.add_argument("--out", help="override the config's output directory")
    ab.set_defaults(func=_ablate, stage="ablate")

    rp = groups.add_parser("report", help="reports").add_subparsers(dest="command", required=True)
    rr = rp.add_parser("render", help="re-render tables and panels from a saved trace directory")
    rr.add_argument("--trace", required=True)
    rr.set_defaults(func=_report_render, stage="report render")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError, json.JSONDecodeError) as exc:
        print(f"smbea: {args.stage} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
