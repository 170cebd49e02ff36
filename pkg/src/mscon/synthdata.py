"""Synthetic multi-similarity datasets.

Each task (training or held-out) owns a latent block. A sample draws one label
per task, places its block at that class's centroid plus Gaussian noise, and
the concatenated latent vector is mixed into ``input_dim`` dimensions by a
fixed matrix with orthonormal columns, plus isotropic mixing noise. Task
labels are therefore mutually independent and each one is linearly
recoverable from the inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation

DEFAULT_FRACTIONS = (0.70, 0.10, 0.20)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    num_classes: int
    latent_block_dim: int = 4
    centroid_separation: float = 1.0
    within_class_noise: float = 0.3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation(f"task {self.name!r}: num_classes must be >= 2")
        if self.latent_block_dim < 1:
            raise ContractViolation(f"task {self.name!r}: latent_block_dim must be >= 1")
        if not self.centroid_separation > 0:
            raise ContractViolation(f"task {self.name!r}: centroid_separation must be > 0")
        if self.within_class_noise < 0:
            raise ContractViolation(f"task {self.name!r}: within_class_noise must be >= 0")


def default_tasks() -> tuple[list[TaskSpec], list[TaskSpec]]:
    training = [
        TaskSpec("category", 4),
        TaskSpec("closure", 5),
        TaskSpec("gender", 3),
    ]
    ood = [TaskSpec("brand", 5)]
    return training, ood


@dataclass(frozen=True)
class DatasetSpec:
    training_tasks: tuple[TaskSpec, ...] = field(default_factory=lambda: tuple(default_tasks()[0]))
    ood_tasks: tuple[TaskSpec, ...] = field(default_factory=lambda: tuple(default_tasks()[1]))
    num_samples: int = 6000
    input_dim: int = 64
    mixing_noise: float = 0.1
    seed: int = 0
    split_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self):
        object.__setattr__(self, "training_tasks", tuple(self.training_tasks))
        object.__setattr__(self, "ood_tasks", tuple(self.ood_tasks))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if not self.training_tasks:
            raise ContractViolation("at least one training task is required")
        latent = sum(t.latent_block_dim for t in self.all_tasks)
        if self.input_dim < latent:
            raise ContractViolation(
                f"input_dim {self.input_dim} is smaller than the total latent dimension {latent}"
            )
        max_k = max(t.num_classes for t in self.all_tasks)
        if self.num_samples < 10 * max_k:
            raise ContractViolation(
                f"num_samples {self.num_samples} must be >= 10 * max classes ({10 * max_k})"
            )
        if self.mixing_noise < 0:
            raise ContractViolation("mixing_noise must be >= 0")

    @property
    def all_tasks(self) -> tuple[TaskSpec, ...]:
        return self.training_tasks + self.ood_tasks

    @property
    def num_training_tasks(self) -> int:
        return len(self.training_tasks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        d = dict(d)
        for key in ("training_tasks", "ood_tasks"):
            if key in d:
                d[key] = tuple(TaskSpec(**t) for t in d[key])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass(frozen=True)
class CorruptionSpec:
    task_index: int
    rho: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ContractViolation(f"rho must lie in [0, 1], got {self.rho}")


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class MultiSimDataset:
    inputs: np.ndarray  # (M, input_dim)
    labels: np.ndarray  # (M, C + n_ood), training tasks first
    spec: DatasetSpec
    split: SplitIndices
    latents: np.ndarray
    mixing: np.ndarray
    centroids: list[np.ndarray]

    @property
    def task_specs(self) -> tuple[TaskSpec, ...]:
        return self.spec.all_tasks

    @property
    def num_training_tasks(self) -> int:
        return self.spec.num_training_tasks

    @property
    def ood_columns(self) -> list[int]:
        c = self.num_training_tasks
        return list(range(c, c + len(self.spec.ood_tasks)))

    def num_classes(self, column: int) -> int:
        return self.task_specs[column].num_classes

    def with_labels(self, labels: np.ndarray) -> MultiSimDataset:
        return MultiSimDataset(
            self.inputs, labels, self.spec, self.split, self.latents, self.mixing, self.centroids
        )


def _centroids(rng: np.random.Generator, task: TaskSpec) -> np.ndarray:
    # Random directions scaled to the separation; redraw on the (measure-zero) chance of a tie.
    while True:
        c = rng.normal(size=(task.num_classes, task.latent_block_dim))
        norms = np.linalg.norm(c, axis=1, keepdims=True)
        if np.all(norms > 1e-12):
            c = task.centroid_separation * c / norms
            d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
            if np.all(d[~np.eye(len(c), dtype=bool)] > 1e-9):
                return c


def split_dataset(
    num_samples: int, fractions=DEFAULT_FRACTIONS, seed: int = 0
) -> SplitIndices:
    """Shuffled disjoint train/val/test cover; val and test get ``floor(f*M)``, train the rest."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"split fractions must be 3 positive numbers summing to 1, got {fractions}")
    if num_samples < 3:
        raise ContractViolation("need at least 3 samples to split")
    n_val = int(np.floor(f[1] * num_samples + 1e-9))
    n_test = int(np.floor(f[2] * num_samples + 1e-9))
    perm = np.random.default_rng(seed).permutation(num_samples)
    n_train = num_samples - n_val - n_test
    return SplitIndices(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
    )


def generate_dataset(spec: DatasetSpec) -> MultiSimDataset:
    root = np.random.SeedSequence(spec.seed)
    structure_ss, sample_ss, split_ss = root.spawn(3)
    structure = np.random.default_rng(structure_ss)
    sample = np.random.default_rng(sample_ss)

    tasks = spec.all_tasks
    centroids = [_centroids(structure, t) for t in tasks]
    latent_dim = sum(t.latent_block_dim for t in tasks)
    q, r = np.linalg.qr(structure.normal(size=(spec.input_dim, latent_dim)))
    mixing = q * np.sign(np.diag(r))  # orthonormal columns, sign-fixed

    M = spec.num_samples
    labels = np.empty((M, len(tasks)), dtype=np.int64)
    blocks = []
    for col, (task, cents) in enumerate(zip(tasks, centroids)):
        y = sample.integers(0, task.num_classes, size=M)
        labels[:, col] = y
        noise = sample.normal(size=(M, task.latent_block_dim)) * task.within_class_noise
        blocks.append(cents[y] + noise)
    latents = np.concatenate(blocks, axis=1)
    inputs = latents @ mixing.T + sample.normal(size=(M, spec.input_dim)) * spec.mixing_noise

    split = split_dataset(M, spec.split_fractions, int(np.random.default_rng(split_ss).integers(2**63)))
    return MultiSimDataset(inputs, labels, spec, split, latents, mixing, centroids)


def corrupt_labels(labels, num_classes: int, spec: CorruptionSpec) -> np.ndarray:
    """With probability ``rho`` per sample, redraw the label uniformly from all classes.

    The redraw may return the original label, so the expected fraction left
    unchanged is ``1 - rho * (1 - 1/K)``.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractViolation(f"labels must lie in [0, {num_classes})")
    rng = np.random.default_rng(spec.seed)
    hit = rng.random(labels.shape) < spec.rho
    fresh = rng.integers(0, num_classes, size=labels.shape)
    return np.where(hit, fresh, labels).astype(labels.dtype)


def corrupt_dataset(
    ds: MultiSimDataset, spec: CorruptionSpec, rows: np.ndarray | None = None
) -> MultiSimDataset:
    """Copy of ``ds`` with one label column corrupted (optionally only on ``rows``)."""
    col = spec.task_index
    if not 0 <= col < ds.labels.shape[1]:
        raise ContractViolation(f"no label column {col}")
    labels = ds.labels.copy()
    rows = np.arange(len(labels)) if rows is None else np.asarray(rows)
    labels[rows, col] = corrupt_labels(labels[rows, col], ds.num_classes(col), spec)
    return ds.with_labels(labels)


def augment_pair(x, jitter_sigma: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Two independent Gaussian-jittered views of ``x`` (a row or a batch of rows).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if jitter_sigma < 0:
        raise ContractViolation(f"jitter_sigma must be >= 0, got {jitter_sigma}")
    x = np.asarray(x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n1 = rng.normal(size=x.shape)
    n2 = rng.normal(size=x.shape)
    return x + jitter_sigma * n1, x + jitter_sigma * n2


# -- persistence -------------------------------------------------------------


def save_dataset(ds: MultiSimDataset, directory: str | Path) -> Path:
    """inputs.bin (header line ``M input_dim`` then little-endian f64), labels.csv, split.csv, spec.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    M, D = ds.inputs.shape
    with open(directory / "inputs.bin", "wb") as fh:
        fh.write(f"{M} {D}\n".encode())
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([t.name for t in ds.task_specs])
        w.writerows(ds.labels.tolist())
    with open(directory / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "split"])
        rows = [(int(i), name) for name in ("train", "val", "test") for i in getattr(ds.split, name)]
        w.writerows(sorted(rows))
    (directory / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2) + "\n")
    return directory


def load_dataset(directory: str | Path) -> MultiSimDataset:
    """Reload a saved dataset; the generator's ground truth is rebuilt from the spec."""
    directory = Path(directory)
    spec = DatasetSpec.from_dict(json.loads((directory / "spec.json").read_text()))
    regen = generate_dataset(spec)
    with open(directory / "inputs.bin", "rb") as fh:
        M, D = (int(v) for v in fh.readline().split())
        inputs = np.frombuffer(fh.read(), dtype="<f8").reshape(M, D).astype(np.float64)
    with open(directory / "labels.csv", newline="") as fh:
        r = csv.reader(fh)
        next(r)
        labels = np.array([[int(v) for v in row] for row in r], dtype=np.int64)
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    with open(directory / "split.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            parts[row["split"]].append(int(row["index"]))
    split = SplitIndices(*(np.array(parts[k], dtype=np.int64) for k in ("train", "val", "test")))
    return MultiSimDataset(inputs, labels, spec, split, regen.latents, regen.mixing, regen.centroids)
