"""Command-line entry point: ``mscon <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ContractViolation, DegenerateInputError, TrainingDivergenceError
from .evaluate import ProbeConfig, linear_probe
from .experiments import ExperimentManifest, run_manifest
from .model import load_checkpoint, save_checkpoint
from .report import report
from .synthdata import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .train import METHODS, TrainConfig, extract_embeddings, train

log = logging.getLogger("mscon")

SWEEPS = {
    "sweep-corruption": "corruption",
    "table-indomain": "indomain",
    "eval-ood": "ood",
    "sweep-hparams": "hparam",
}


def _read_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _dataset_spec(cfg: dict, seed: int | None) -> DatasetSpec:
    spec = DatasetSpec.from_dict(cfg.get("dataset", cfg))
    return replace(spec, seed=seed) if seed is not None else spec


def _resolve_task(ds, task: str) -> int:
    names = [t.name for t in ds.task_specs]
    if task in names:
        return names.index(task)
    try:
        col = int(task)
    except ValueError:
        raise ContractViolation(f"unknown task {task!r}; known: {names}") from None
    if not 0 <= col < len(names):
        raise ContractViolation(f"task column {col} out of range")
    return col


def cmd_generate_data(args) -> None:
    cfg = _read_json(args.config)
    ds = generate_dataset(_dataset_spec(cfg, args.seed))
    save_dataset(ds, args.out)
    print(f"wrote dataset ({ds.inputs.shape[0]} x {ds.inputs.shape[1]}) to {args.out}")


def cmd_train(args) -> None:
    cfg = _read_json(args.config)
    ds = load_dataset(args.data) if args.data else generate_dataset(_dataset_spec(cfg.get("dataset", {}), None))
    tcfg = dict(cfg.get("train", {}))
    for key in ("method", "epochs"):
        if getattr(args, key) is not None:
            tcfg[key] = getattr(args, key)
    if args.task is not None:
        tcfg["task"] = _resolve_task(ds, args.task)
    if args.seed is not None:
        tcfg["seed"] = args.seed
    res = train(ds, TrainConfig(**tcfg))
    out = Path(args.out)
    save_checkpoint(res.params, out / "checkpoint")
    res.write_log(out / "train_log.csv")
    print(f"final sigma^2: {res.params.sigma_sq.round(4).tolist()}; checkpoint in {out / 'checkpoint'}")


def cmd_probe(args) -> None:
    cfg = _read_json(args.config)
    ds = load_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    col = _resolve_task(ds, args.task)
    pcfg = ProbeConfig(**cfg.get("probe", {}))
    if args.seed is not None:
        pcfg = replace(pcfg, seed=args.seed)
    pr = linear_probe(extract_embeddings(params, ds.inputs), ds.labels[:, col], ds.split, pcfg, ds.num_classes(col))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "metric", "value"])
        w.writerow([ds.task_specs[col].name, "top1", repr(pr.accuracy)])
        w.writerow([ds.task_specs[col].name, "top1_std", repr(pr.std)])
    print(f"{ds.task_specs[col].name}: top-1 {pr.accuracy:.4f} (std {pr.std:.4f})")


def cmd_sweep(args) -> None:
    kind = SWEEPS[args.command]
    cfg = _read_json(args.config)
    cfg["kind"] = kind
    manifest = ExperimentManifest.from_dict(cfg)
    if args.seed is not None:
        manifest = replace(manifest, seeds=tuple(args.seed + i for i in range(len(manifest.seeds))))
    out = args.out or manifest.out_dir
    res = run_manifest(manifest, out, threads=args.threads)
    print(f"wrote {len(res.rows)} rows to {Path(out) / (kind + '.csv')}")


def cmd_report(args) -> None:
    path, gaps = report(args.out)
    print(f"wrote {path}" + (f" ({len(gaps)} gaps)" if gaps else ""))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mscon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config / manifest")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        return sp

    common(sub.add_parser("generate-data", help="generate and save a synthetic dataset")).set_defaults(
        func=cmd_generate_data
    )

    sp = common(sub.add_parser("train", help="train one model and save a checkpoint"))
    sp.add_argument("--data", help="dataset directory (default: generate from --config)")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--task", help="task name or column for single-task methods")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("probe", help="linear probe on a frozen checkpoint"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp.set_defaults(func=cmd_probe)

    for name, kind in SWEEPS.items():
        common(sub.add_parser(name, help=f"run the {kind} experiment"), out_required=False).set_defaults(
            func=cmd_sweep
        )

    common(sub.add_parser("report", help="aggregate result CSVs in --out")).set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ContractViolation, DegenerateInputError, TrainingDivergenceError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
