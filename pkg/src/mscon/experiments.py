"""Experiment manifests and runners for the corruption, in-domain, OOD and hyperparameter studies.

Each runner expands a manifest into independent cells, runs them (optionally
in worker processes), and appends the rows of every cell to a CSV in cell
order, so a rerun with the same manifest reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .evaluate import ProbeConfig, linear_probe
from .synthdata import CorruptionSpec, DatasetSpec, corrupt_dataset, generate_dataset
from .train import TrainConfig, TrainResult, extract_embeddings, train

log = logging.getLogger(__name__)

KINDS = ("corruption", "indomain", "ood", "hparam")
RESULT_FIELDS = ("kind", "method", "setting", "rho", "seed", "task", "metric", "value")
RESULT_FILES = {kind: f"{kind}.csv" for kind in KINDS}

DEFAULT_RHOS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_TEMPERATURES = (0.05, 0.07, 0.1, 0.2, 0.5)
DEFAULT_EPOCH_GRID = (25, 50, 100, 200)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
# Epoch budget for the sweeps at desk scale; single runs keep the 200-epoch default.
SWEEP_EPOCHS = 50


@dataclass(frozen=True)
class ExperimentManifest:
    kind: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=SWEEP_EPOCHS))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    rhos: tuple[float, ...] = DEFAULT_RHOS
    corrupt_task: int = 1
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    methods: tuple[str, ...] | None = None
    temperatures: tuple[float, ...] = DEFAULT_TEMPERATURES
    epoch_grid: tuple[int, ...] = DEFAULT_EPOCH_GRID
    out_dir: str = "results"

    def __post_init__(self):
        for name in ("rhos", "seeds", "temperatures", "epoch_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.methods is not None:
            object.__setattr__(self, "methods", tuple(self.methods))
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ContractViolation("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractViolation(f"seeds must be distinct: {self.seeds}")
        if self.kind == "corruption" and not self.rhos:
            raise ContractViolation("rho grid must be nonempty")
        for rho in self.rhos:
            CorruptionSpec(self.corrupt_task, rho)
        if self.kind == "hparam" and not (self.temperatures or self.epoch_grid):
            raise ContractViolation("hparam sweep needs a temperature or epoch grid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentManifest:
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "probe" in d:
            d["probe"] = ProbeConfig(**d["probe"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentManifest:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class ExperimentResult:
    """Append-only list of result rows, keyed as in ``RESULT_FIELDS``."""

    rows: list[dict] = field(default_factory=list)

    def add(self, kind, method, task, metric, value, *, seed, rho="", setting="") -> None:
        self.rows.append(
            {
                "kind": kind,
                "method": method,
                "setting": setting,
                "rho": rho,
                "seed": seed,
                "task": task,
                "metric": metric,
                "value": float(value),
            }
        )

    def extend(self, other: ExperimentResult) -> None:
        self.rows.extend(other.rows)

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def value(self, **where) -> float:
        hits = self.select(**where)
        if len(hits) != 1:
            raise KeyError(f"expected one row for {where}, found {len(hits)}")
        return hits[0]["value"]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def append_rows(path: Path, rows: Iterable[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in RESULT_FIELDS])


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
        r["seed"] = int(r["seed"])
        r["rho"] = float(r["rho"]) if r["rho"] != "" else ""
    return rows


def _run_cells(
    cells: Sequence, fn: Callable, out_file: Path | None, threads: int
) -> ExperimentResult:
    """Run ``fn`` on every cell; rows are appended to ``out_file`` in cell order."""
    result = ExperimentResult()
    if out_file is not None:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        if out_file.exists():
            out_file.unlink()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = pool.map(fn, cells)
            for cell_result in outputs:
                result.extend(cell_result)
                if out_file is not None:
                    append_rows(out_file, cell_result.rows)
    else:
        for cell in cells:
            cell_result = fn(cell)
            result.extend(cell_result)
            if out_file is not None:
                append_rows(out_file, cell_result.rows)
    return result


def _cell_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def _probe(ds, result: TrainResult, column: int, cfg: ProbeConfig, labels=None):
    E = extract_embeddings(result.params, ds.inputs)
    y = ds.labels[:, column] if labels is None else labels
    return linear_probe(E, y, ds.split, cfg, num_classes=ds.num_classes(column))


def _record_probe(out: ExperimentResult, kind, method, task, pr, **keys) -> None:
    out.add(kind, method, task, "top1", pr.accuracy, **keys)
    out.add(kind, method, task, "top1_std", pr.std, **keys)


def _check_no_ood_reads(ds, result: TrainResult) -> None:
    leaked = set(result.label_reads) & set(ds.ood_columns)
    if leaked:
        raise ContractViolation(f"held-out label columns {sorted(leaked)} were read during training")


# -- corruption sweep --------------------------------------------------------


def _corruption_cell(args) -> ExperimentResult:
    manifest, rho, seed = args
    clean = generate_dataset(manifest.dataset)
    ct = manifest.corrupt_task
    if clean.num_training_tasks < 2 or not clean.ood_columns:
        raise ContractViolation("corruption sweep needs >= 2 training tasks and >= 1 held-out task")
    spec = CorruptionSpec(ct, rho, seed=_cell_seed(seed, round(rho * 1000), ct))
    ds = corrupt_dataset(clean, spec, rows=clean.split.train)
    names = [t.name for t in ds.task_specs]
    probe_cfg = replace(manifest.probe, seed=seed)
    out = ExperimentResult()
    for method in ("mscon-weighted", "mscon-unweighted"):
        res = train(ds, replace(manifest.train, method=method, task=None, seed=seed))
        _check_no_ood_reads(ds, res)
        keys = {"seed": seed, "rho": rho}
        for c in range(ds.num_training_tasks):
            out.add("corruption", method, names[c], "sigma_sq", res.params.sigma_sq[c], **keys)
            out.add("corruption", method, names[c], "weight", np.exp(-res.params.arrays["log_var"][c]), **keys)
        # In-domain probe: trained on the corrupted training labels, scored on clean test labels.
        _record_probe(out, "corruption", method, names[ct], _probe(ds, res, ct, probe_cfg), **keys)
        for col in ds.ood_columns:
            _record_probe(out, "corruption", method, names[col], _probe(ds, res, col, probe_cfg), **keys)
    log.info("corruption cell rho=%.2f seed=%d done", rho, seed)
    return out


def run_corruption_sweep(
    manifest: ExperimentManifest, out_dir: str | Path | None = None, threads: int = 1
) -> ExperimentResult:
    cells = [(manifest, float(rho), seed) for rho in manifest.rhos for seed in manifest.seeds]
    out_file = None if out_dir is None else Path(out_dir) / RESULT_FILES["corruption"]
    return _run_cells(cells, _corruption_cell, out_file, threads)


# -- in-domain table ---------------------------------------------------------


def method_grid(num_training_tasks: int, names: Sequence[str], only: Sequence[str] | None = None):
    """(label, method, task) for every method in the in-domain comparison."""
    grid = [(f"xent:{names[c]}", "xent", c) for c in range(num_training_tasks)]
    grid.append(("xent-multitask", "xent-multitask", None))
    grid.append(("simclr", "simclr", None))
    grid += [(f"supcon:{names[c]}", "supcon", c) for c in range(num_training_tasks)]
    grid.append(("mscon", "mscon-weighted", None))
    if only is not None:
        grid = [g for g in grid if g[0] in only or g[1] in only]
    return grid


def _indomain_cell(args) -> ExperimentResult:
    manifest, label, method, task, seed = args
    ds = generate_dataset(manifest.dataset)
    names = [t.name for t in ds.task_specs]
    res = train(ds, replace(manifest.train, method=method, task=task, seed=seed))
    _check_no_ood_reads(ds, res)
    probe_cfg = replace(manifest.probe, seed=seed)
    out = ExperimentResult()
    for c in range(ds.num_training_tasks):
        _record_probe(out, "indomain", label, names[c], _probe(ds, res, c, probe_cfg), seed=seed)
    log.info("indomain cell %s seed=%d done", label, seed)
    return out


def run_indomain_table(
    manifest: ExperimentManifest, out_dir: str | Path | None = None, threads: int = 1
) -> ExperimentResult:
    spec = manifest.dataset
    names = [t.name for t in spec.all_tasks]
    grid = method_grid(spec.num_training_tasks, names, manifest.methods)
    cells = [(manifest, *g, seed) for seed in manifest.seeds for g in grid]
    out_file = None if out_dir is None else Path(out_dir) / RESULT_FILES["indomain"]
    return _run_cells(cells, _indomain_cell, out_file, threads)


# -- out-of-domain evaluation ------------------------------------------------


def _ood_cell(args) -> ExperimentResult:
    manifest, label, method, seed = args
    ds = generate_dataset(manifest.dataset)
    if not ds.ood_columns:
        raise ContractViolation("OOD evaluation needs at least one held-out task")
    names = [t.name for t in ds.task_specs]
    res = train(ds, replace(manifest.train, method=method, task=None, seed=seed))
    _check_no_ood_reads(ds, res)
    probe_cfg = replace(manifest.probe, seed=seed)
    out = ExperimentResult()
    for col in ds.ood_columns:
        _record_probe(out, "ood", label, names[col], _probe(ds, res, col, probe_cfg), seed=seed)
    return out


def run_ood_eval(
    manifest: ExperimentManifest, out_dir: str | Path | None = None, threads: int = 1
) -> ExperimentResult:
    methods = [("xent-multitask", "xent-multitask"), ("mscon", "mscon-weighted")]
    if manifest.methods is not None:
        methods = [m for m in methods if m[0] in manifest.methods or m[1] in manifest.methods]
    cells = [(manifest, label, method, seed) for seed in manifest.seeds for label, method in methods]
    out_file = None if out_dir is None else Path(out_dir) / RESULT_FILES["ood"]
    return _run_cells(cells, _ood_cell, out_file, threads)


# -- hyperparameter sweep ----------------------------------------------------


def _hparam_cell(args) -> ExperimentResult:
    manifest, axis, value, seed = args
    ds = generate_dataset(manifest.dataset)
    names = [t.name for t in ds.task_specs]
    probe_cfg = replace(manifest.probe, seed=seed)
    base = replace(manifest.train, method="mscon-weighted", task=None, seed=seed)
    out = ExperimentResult()
    if axis == "tau":
        runs = {f"tau={value!r}": train(ds, replace(base, temperature=value)).params}
    else:
        # One run to the largest budget; shorter budgets are exact prefixes of it.
        grid = sorted(value)
        res = train(ds, replace(base, epochs=grid[-1]), snapshot_epochs=grid)
        runs = {f"epochs={e}": res.snapshots[e] for e in grid}
    for setting, params in runs.items():
        E = extract_embeddings(params, ds.inputs)
        for c in range(ds.num_training_tasks):
            pr = linear_probe(E, ds.labels[:, c], ds.split, probe_cfg, ds.num_classes(c))
            _record_probe(out, "hparam", "mscon", names[c], pr, seed=seed, setting=setting)
    return out


def run_hparam_sweep(
    manifest: ExperimentManifest, out_dir: str | Path | None = None, threads: int = 1
) -> ExperimentResult:
    cells = []
    for seed in manifest.seeds:
        cells += [(manifest, "tau", float(t), seed) for t in manifest.temperatures]
        if manifest.epoch_grid:
            cells.append((manifest, "epochs", tuple(manifest.epoch_grid), seed))
    out_file = None if out_dir is None else Path(out_dir) / RESULT_FILES["hparam"]
    return _run_cells(cells, _hparam_cell, out_file, threads)


RUNNERS = {
    "corruption": run_corruption_sweep,
    "indomain": run_indomain_table,
    "ood": run_ood_eval,
    "hparam": run_hparam_sweep,
}


def run_manifest(
    manifest: ExperimentManifest, out_dir: str | Path | None = None, threads: int = 1
) -> ExperimentResult:
    out_dir = Path(out_dir if out_dir is not None else manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.dump(out_dir / f"{manifest.kind}_manifest.json")
    return RUNNERS[manifest.kind](manifest, out_dir, threads)
