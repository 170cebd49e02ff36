"""Frozen-encoder evaluation: linear probe, top-1 accuracy, bootstrap spread."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, DegenerateInputError
from .losses import xent_loss
from .optim import sgd_momentum_step
from .synthdata import SplitIndices


@dataclass(frozen=True)
class ProbeConfig:
    probe_epochs: int = 20
    probe_lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    bootstrap_resamples: int = 1000
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.probe_epochs < 1 or self.batch_size < 1 or self.bootstrap_resamples < 1:
            raise ContractViolation("probe epochs, batch size and resamples must be >= 1")
        if not self.probe_lr > 0:
            raise ContractViolation("probe_lr must be > 0")


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    accuracy: float
    std: float
    correct: np.ndarray  # per test sample

    @property
    def stderr(self) -> float:
        """Binomial standard error of the test accuracy."""
        n = len(self.correct)
        return float(np.sqrt(self.accuracy * (1 - self.accuracy) / n))


def top1_accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractViolation(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ContractViolation("no predictions to score")
    return float(np.mean(predictions == labels))


def bootstrap_std(correct, resamples: int = 1000, seed: int = 0) -> float:
    """Std of accuracy over ``resamples`` with-replacement resamples of the test flags."""
    flags = np.asarray(correct, dtype=np.float64)
    if flags.size == 0:
        raise ContractViolation("bootstrap_std needs at least one flag")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, flags.size, size=(resamples, flags.size))
    return float(flags[idx].mean(axis=1).std())


def linear_probe(
    embeddings,
    labels,
    split: SplitIndices,
    cfg: ProbeConfig = ProbeConfig(),
    num_classes: int | None = None,
) -> ProbeResult:
    """Train one linear layer on frozen ``embeddings[split.train]``; score on ``split.test``.

    ``labels`` is a full-length label column. Training rows and test rows are
    read from the same column, so a caller that corrupted only the training
    rows gets evaluation against clean test labels.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if E.ndim != 2 or y.shape != (E.shape[0],):
        raise ContractViolation(f"embeddings {E.shape} and labels {y.shape} do not match")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    y_train = y[split.train]
    if np.unique(y_train).size < 2:
        raise DegenerateInputError("probe training labels contain a single class")

    if cfg.standardize:
        mu = E[split.train].mean(axis=0)
        sd = E[split.train].std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        E = (E - mu) / sd
    X_train = E[split.train]

    rng = np.random.default_rng(cfg.seed)
    arrays = {
        "w": np.zeros((E.shape[1], k)),
        "b": np.zeros(k),
    }
    state: dict[str, np.ndarray] = {}
    n = len(split.train)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.probe_epochs):
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            rows = perm[start : start + bs]
            w = ad.Tensor(arrays["w"], requires_grad=True)
            b = ad.Tensor(arrays["b"], requires_grad=True)
            with ad.Tape() as tape:
                loss = xent_loss(ad.matmul(X_train[rows], w) + b, y_train[rows])
                ad.backward(tape, loss)
            arrays, state = sgd_momentum_step(
                arrays, {"w": w.grad, "b": b.grad}, cfg.probe_lr, cfg.momentum, state
            )

    X_test = E[split.test]
    pred = np.argmax(X_test @ arrays["w"] + arrays["b"], axis=1)
    correct = pred == y[split.test]
    return ProbeResult(
        weight=arrays["w"],
        bias=arrays["b"],
        accuracy=top1_accuracy(pred, y[split.test]),
        std=bootstrap_std(correct, cfg.bootstrap_resamples, cfg.seed),
        correct=correct,
    )
