"""Training loops: contrastive methods (MSCon, SupCon, SimCLR) and cross-entropy baselines."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, TrainingDivergenceError
from .losses import LossConfig, build_positive_mask, mscon_total, simclr_loss, supcon_loss, xent_loss
from .model import LOG_VAR, EncoderConfig, ModelParams, encode, init_params, project
from .optim import sgd_momentum_step
from .synthdata import MultiSimDataset, augment_pair

log = logging.getLogger(__name__)

CONTRASTIVE_METHODS = ("mscon-weighted", "mscon-unweighted", "supcon", "simclr")
XENT_METHODS = ("xent", "xent-multitask")
METHODS = CONTRASTIVE_METHODS + XENT_METHODS

LOG_FIELDS = ("step", "epoch", "task", "loss", "sigma_sq", "weight", "total")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mscon-weighted"
    task: int | None = None  # required by the single-task methods
    tasks: tuple[int, ...] | None = None  # MSCon / multitask columns; default all training tasks
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.05
    xent_lr: float = 0.01
    momentum: float = 0.9
    temperature: float = 0.1
    jitter_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method in ("supcon", "xent") and self.task is None:
            raise ContractViolation(f"method {self.method!r} needs a task index")
        if self.tasks is not None:
            object.__setattr__(self, "tasks", tuple(int(t) for t in self.tasks))
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        for name in ("lr", "xent_lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be > 0")
        if self.jitter_sigma < 0:
            raise ContractViolation("jitter_sigma must be >= 0")

    @property
    def weighted(self) -> bool:
        return self.method == "mscon-weighted"

    def supervised_columns(self, num_training_tasks: int) -> tuple[int, ...]:
        """Label columns the method reads during training (empty for SimCLR)."""
        if self.method == "simclr":
            return ()
        if self.method in ("supcon", "xent"):
            cols: tuple[int, ...] = (self.task,)
        else:
            cols = self.tasks if self.tasks is not None else tuple(range(num_training_tasks))
        for c in cols:
            if not 0 <= c < num_training_tasks:
                raise ContractViolation(f"task column {c} is not a training task")
        return cols

    def num_heads(self, num_training_tasks: int) -> int:
        return max(1, len(self.supervised_columns(num_training_tasks)))


class LabelGuard:
    """Read-only view of a label matrix that only serves whitelisted columns.

    Every served column is recorded in :attr:`reads`, so callers can assert
    after the fact that held-out columns were never touched.
    """

    def __init__(self, labels: np.ndarray, allowed: Iterable[int]):
        self._labels = labels
        self.allowed = frozenset(int(c) for c in allowed)
        self.reads: list[int] = []

    def column(self, c: int) -> np.ndarray:
        if c not in self.allowed:
            raise ContractViolation(f"label column {c} is not accessible during encoder training")
        self.reads.append(c)
        return self._labels[:, c].copy()


@dataclass
class TrainResult:
    params: ModelParams
    log_rows: list[tuple] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    label_reads: tuple[int, ...] = ()
    selected_epoch: int | None = None
    snapshots: dict[int, ModelParams] = field(default_factory=dict)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            w.writerows(self.log_rows)

    @property
    def final_sigma_sq(self) -> np.ndarray:
        return self.params.sigma_sq


def encoder_config_for(
    ds: MultiSimDataset, cfg: TrainConfig, seed: int | None = None, **overrides
) -> EncoderConfig:
    return EncoderConfig(
        input_dim=ds.inputs.shape[1],
        num_tasks=cfg.num_heads(ds.num_training_tasks),
        seed=cfg.seed if seed is None else seed,
        **overrides,
    )


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle_ss, augment_ss = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(augment_ss)


def _batches(train_idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(train_idx)
    n_full = len(perm) // batch_size  # incomplete last batch is dropped
    for b in range(n_full):
        yield perm[b * batch_size : (b + 1) * batch_size]


def train_contrastive(
    ds: MultiSimDataset,
    params: ModelParams,
    cfg: TrainConfig,
    snapshot_epochs: Iterable[int] = (),
) -> TrainResult:
    """Jointly train encoder and projection heads (and log-variances when weighted).

    ``snapshot_epochs`` lists epoch counts after which a copy of the
    parameters is kept in ``result.snapshots``; a snapshot at ``k`` is
    identical to a separate ``k``-epoch run with the same seed.
    """
    if cfg.method not in CONTRASTIVE_METHODS:
        raise ContractViolation(f"{cfg.method!r} is not a contrastive method")
    cols = cfg.supervised_columns(ds.num_training_tasks)
    n_heads = max(1, len(cols))
    if params.num_heads != n_heads:
        raise ContractViolation(f"params have {params.num_heads} heads, method needs {n_heads}")
    train_idx = ds.split.train
    if len(train_idx) < cfg.batch_size:
        raise ContractViolation("training split is smaller than one batch")

    guard = LabelGuard(ds.labels, allowed=range(ds.num_training_tasks))
    task_labels = [guard.column(c) for c in cols]
    loss_cfg = LossConfig(cfg.temperature, "mean")
    trainable = [k for k in params.arrays if k != LOG_VAR or cfg.weighted]
    shuffle_rng, aug_rng = _streams(cfg.seed)
    arrays = dict(params.arrays)
    state: dict[str, np.ndarray] = {}
    result = TrainResult(params)
    n = cfg.batch_size
    source = np.concatenate([np.arange(n), np.arange(n)])
    step = 0
    snapshot_epochs = set(snapshot_epochs)

    for epoch in range(cfg.epochs):
        totals = []
        for idx in _batches(train_idx, n, shuffle_rng):
            x1, x2 = augment_pair(ds.inputs[idx], cfg.jitter_sigma, aug_rng)
            X = np.concatenate([x1, x2], axis=0)
            leaves = {
                k: ad.Tensor(v, requires_grad=k in trainable, name=k) for k, v in arrays.items()
            }
            with ad.Tape() as tape:
                H = encode(leaves, X)
                if cfg.method == "simclr":
                    losses = [simclr_loss(project(leaves, H, 0), source, loss_cfg)]
                else:
                    losses = []
                    for head, y in enumerate(task_labels):
                        mask = build_positive_mask(np.concatenate([y[idx], y[idx]]))
                        losses.append(supcon_loss(project(leaves, H, head), mask, loss_cfg))
                total, report = mscon_total(losses, leaves[LOG_VAR], cfg.weighted)
                if not np.isfinite(report.total):
                    raise TrainingDivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
                ad.backward(tape, total)
            grads = {k: leaves[k].grad for k in trainable if leaves[k].grad is not None}
            arrays, state = sgd_momentum_step(arrays, grads, cfg.lr, cfg.momentum, state)
            for row in report.rows(step):
                result.log_rows.append(
                    (step, epoch, row["task"], row["loss"], row["sigma_sq"], row["weight"], row["total"])
                )
            totals.append(report.total)
            step += 1
        result.epoch_losses.append(float(np.mean(totals)))
        log.debug("%s epoch %d mean loss %.4f", cfg.method, epoch, result.epoch_losses[-1])
        if epoch + 1 in snapshot_epochs:
            result.snapshots[epoch + 1] = params.replace(arrays)

    result.params = params.replace(arrays)
    result.label_reads = tuple(guard.reads)
    return result


# -- cross-entropy baselines -------------------------------------------------


def init_classifiers(params: ModelParams, num_classes: Sequence[int], seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = params.config.embedding_dim
    out = {}
    for head, k in enumerate(num_classes):
        out[f"cls.{head}.w"] = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, k))
        out[f"cls.{head}.b"] = np.zeros(k)
    return out


def train_xent(ds: MultiSimDataset, params: ModelParams, cfg: TrainConfig) -> TrainResult:
    """Encoder plus linear classifiers trained with cross-entropy.

    The returned encoder is the one from the epoch with the best mean
    validation accuracy over the supervised tasks.
    """
    if cfg.method not in XENT_METHODS:
        raise ContractViolation(f"{cfg.method!r} is not a cross-entropy method")
    cols = cfg.supervised_columns(ds.num_training_tasks)
    guard = LabelGuard(ds.labels, allowed=range(ds.num_training_tasks))
    task_labels = [guard.column(c) for c in cols]
    ks = [ds.num_classes(c) for c in cols]
    arrays = dict(params.arrays)
    arrays.update(init_classifiers(params, ks, cfg.seed + 1))
    trainable = [k for k in arrays if k != LOG_VAR and not k.startswith("head.")]
    shuffle_rng, aug_rng = _streams(cfg.seed)
    state: dict[str, np.ndarray] = {}
    result = TrainResult(params)
    best = (-1.0, None, None)
    val = ds.split.val
    step = 0

    for epoch in range(cfg.epochs):
        totals = []
        for idx in _batches(ds.split.train, cfg.batch_size, shuffle_rng):
            x, _ = augment_pair(ds.inputs[idx], cfg.jitter_sigma, aug_rng)
            leaves = {
                k: ad.Tensor(v, requires_grad=k in trainable, name=k) for k, v in arrays.items()
            }
            with ad.Tape() as tape:
                H = encode(leaves, x)
                terms = []
                for head, y in enumerate(task_labels):
                    logits = ad.matmul(H, leaves[f"cls.{head}.w"]) + leaves[f"cls.{head}.b"]
                    terms.append(xent_loss(logits, y[idx]))
                total = ad.reduce_sum(ad.concat_rows(terms))
                if not np.isfinite(total.values):
                    raise TrainingDivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
                ad.backward(tape, total)
            grads = {k: leaves[k].grad for k in trainable if leaves[k].grad is not None}
            arrays, state = sgd_momentum_step(arrays, grads, cfg.xent_lr, cfg.momentum, state)
            for head, t in enumerate(terms):
                result.log_rows.append((step, epoch, head, t.item(), 1.0, 1.0, total.item()))
            totals.append(total.item())
            step += 1
        result.epoch_losses.append(float(np.mean(totals)))

        H_val = encode(arrays, ds.inputs[val]).values
        accs = [
            np.mean(np.argmax(H_val @ arrays[f"cls.{h}.w"] + arrays[f"cls.{h}.b"], axis=1) == y[val])
            for h, y in enumerate(task_labels)
        ]
        score = float(np.mean(accs))
        if score > best[0]:
            best = (score, epoch, dict(arrays))

    _, best_epoch, best_arrays = best
    result.params = params.replace({k: v for k, v in best_arrays.items() if k in params.arrays})
    result.selected_epoch = best_epoch
    result.label_reads = tuple(guard.reads)
    return result


def train(
    ds: MultiSimDataset, cfg: TrainConfig, snapshot_epochs: Iterable[int] = (), **encoder_overrides
) -> TrainResult:
    """Initialize a model sized for ``cfg.method`` and train it."""
    params = init_params(encoder_config_for(ds, cfg, **encoder_overrides))
    if cfg.method in CONTRASTIVE_METHODS:
        return train_contrastive(ds, params, cfg, snapshot_epochs)
    return train_xent(ds, params, cfg)


def extract_embeddings(params: ModelParams, inputs) -> np.ndarray:
    """Encoder forward pass only; projection heads are not used."""
    return encode(params, np.asarray(inputs, dtype=np.float64)).values
