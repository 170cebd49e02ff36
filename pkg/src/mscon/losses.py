"""Contrastive and cross-entropy objectives built on :mod:`mscon.autodiff`.

All contrastive losses work from the tempered Gram matrix ``V V^T / tau`` of
unit-norm projections and use a masked, max-shifted log-sum-exp for the
denominator over ``A(i)`` (every row except the anchor itself).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DegenerateInputError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    reduction: str = "mean"  # "mean" over anchors with positives, or "sum"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractViolation(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in ("mean", "sum"):
            raise ContractViolation(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass(frozen=True)
class PositiveMask:
    matrix: np.ndarray  # (2N, 2N) bool, diagonal False

    @property
    def counts(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def empty_anchors(self) -> np.ndarray:
        """Indices of anchors with no positive partner; they contribute zero loss."""
        return np.flatnonzero(self.counts == 0)


@dataclass
class LossReport:
    task_losses: np.ndarray
    sigma_sq: np.ndarray
    weights: np.ndarray
    total: float

    def rows(self, step: int) -> list[dict]:
        return [
            {
                "step": step,
                "task": c,
                "loss": float(self.task_losses[c]),
                "sigma_sq": float(self.sigma_sq[c]),
                "weight": float(self.weights[c]),
                "total": self.total,
            }
            for c in range(len(self.task_losses))
        ]


def build_positive_mask(labels) -> PositiveMask:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractViolation(f"labels must be 1-D, got shape {labels.shape}")
    m = labels[:, None] == labels[None, :]
    np.fill_diagonal(m, False)
    return PositiveMask(m)


def _mask_matrix(mask) -> np.ndarray:
    return mask.matrix if isinstance(mask, PositiveMask) else np.asarray(mask, dtype=bool)


def _check_unit_rows(V: Tensor) -> None:
    if V.values.ndim != 2:
        raise ContractViolation(f"projections must be a matrix, got shape {V.shape}")
    norms = np.linalg.norm(V.values, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractViolation(f"row {worst} of projections has norm {norms[worst]:.8g}, expected 1")


def _tempered_gram(V: Tensor, tau: float) -> Tensor:
    return ad.scalar_mul(ad.matmul(V, ad.transpose(V)), 1.0 / tau)


def supcon_per_anchor(V, mask, temperature: float = 0.1) -> Tensor:
    """Per-anchor term ``-(1/|P(i)|) sum_p log softmax_A(i)(s_i)[p]``; zero when ``P(i)`` is empty."""
    V = ad.as_tensor(V)
    _check_unit_rows(V)
    pos = _mask_matrix(mask)
    n = V.shape[0]
    if pos.shape != (n, n):
        raise ContractViolation(f"mask shape {pos.shape} does not match {n} rows")
    if n < 2:
        raise DegenerateInputError("contrastive loss needs at least two rows")
    counts = pos.sum(axis=1)
    has_pos = (counts > 0).astype(np.float64)
    inv_count = np.divide(1.0, counts, out=np.zeros(n), where=counts > 0)
    S = _tempered_gram(V, temperature)
    others = ~np.eye(n, dtype=bool)
    lse = ad.log_sum_exp(S, axis=1, mask=others)
    pos_mean = ad.mul(ad.masked_sum(S, pos, axis=1), inv_count)
    return ad.sub(ad.mul(lse, has_pos), pos_mean)


def supcon_loss(V, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Supervised contrastive loss over a batch of unit-norm projections."""
    per_anchor = supcon_per_anchor(V, mask, cfg.temperature)
    total = ad.reduce_sum(per_anchor)
    if cfg.reduction == "sum":
        return total
    n_valid = int((_mask_matrix(mask).sum(axis=1) > 0).sum())
    return ad.scalar_mul(total, 1.0 / n_valid) if n_valid else total


def mscon_condition_loss(V, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Loss of one similarity condition: SupCon on that head's projections and labels."""
    return supcon_loss(V, mask, cfg)


def simclr_loss(V, source_index, cfg: LossConfig = LossConfig()) -> Tensor:
    """Self-supervised variant: the only positive is the other view of the same source."""
    return supcon_loss(V, build_positive_mask(source_index), cfg)


def mscon_total(
    task_losses: Sequence[Tensor], log_var, weighted: bool
) -> tuple[Tensor, LossReport]:
    """Combine per-condition losses.

    Unweighted: ``sum_c L_c``. Weighted: ``sum_c exp(-s_c) L_c + s_c`` with
    ``s_c = log sigma_c^2`` (so ``s_c`` equals ``2 log sigma_c``).
    """
    L = ad.concat_rows(task_losses)
    s = ad.as_tensor(log_var)
    if s.shape != L.shape:
        raise ContractViolation(f"log_var shape {s.shape} != number of losses {L.shape}")
    if weighted:
        total = ad.reduce_sum(ad.add(ad.mul(ad.exp(ad.scalar_mul(s, -1.0)), L), s))
    else:
        total = ad.reduce_sum(L)
    sv = s.values if weighted else np.zeros_like(s.values)
    report = LossReport(
        task_losses=L.values.copy(),
        sigma_sq=np.exp(sv),
        weights=np.exp(-sv),
        total=float(total.values),
    )
    return total, report


def _class_log_scores(v: Tensor, ref_V: Tensor, ref_labels, num_classes, scale, exclude):
    sims = ad.scalar_mul(ad.matmul(v, ad.transpose(ref_V)), scale)  # (1, R)
    ref_labels = np.asarray(ref_labels)
    member = ref_labels[None, :] == np.arange(num_classes)[:, None]  # (K, R)
    if exclude is not None:
        member[:, exclude] = False
    sizes = member.sum(axis=1)
    if np.any(sizes == 0):
        missing = int(np.flatnonzero(sizes == 0)[0])
        raise DegenerateInputError(f"pseudo_likelihood: class {missing} has no reference points")
    tiled = ad.concat_rows([sims] * num_classes)  # (K, R)
    return ad.sub(ad.log_sum_exp(tiled, axis=1, mask=member), np.log(sizes))


def pseudo_likelihood(
    v,
    ref_V,
    ref_labels,
    num_classes: int,
    temperature: float = 0.1,
    sigma_sq: float = 1.0,
    exclude: int | None = None,
) -> Tensor:
    """Class probabilities from mean exponentiated similarity to each class.

    ``score(y) = mean_{p in P_y} exp(v . v_p / (tau * sigma_sq))``, normalized
    over the ``num_classes`` classes. ``exclude`` drops one reference row
    (the query itself when it is part of the reference set).
    """
    if not sigma_sq > 0:
        raise ContractViolation(f"sigma_sq must be > 0, got {sigma_sq}")
    if not temperature > 0:
        raise ContractViolation(f"temperature must be > 0, got {temperature}")
    v = ad.as_tensor(v)
    if v.values.ndim == 1 and not v.requires_grad:
        v = Tensor(v.values[None, :])
    ref_V = ad.as_tensor(ref_V)
    if v.values.ndim != 2 or v.shape[0] != 1:
        raise ContractViolation(f"query must be a single row, got shape {v.shape}")
    logs = _class_log_scores(v, ref_V, ref_labels, num_classes, 1.0 / (temperature * sigma_sq), exclude)
    return ad.exp(ad.sub(logs, ad.log_sum_exp(logs)))


def pseudo_nll_per_anchor(V, mask, temperature: float = 0.1) -> np.ndarray:
    """``-log[ mean_p exp(s_ip) / sum_{a in A(i)} exp(s_ia) ]`` per anchor (NaN without positives).

    By Jensen's inequality this never exceeds :func:`supcon_per_anchor`.
    """
    V = np.asarray(V.values if isinstance(V, Tensor) else V, dtype=np.float64)
    pos = _mask_matrix(mask)
    n = V.shape[0]
    S = V @ V.T / temperature
    others = ~np.eye(n, dtype=bool)
    out = np.full(n, np.nan)
    for i in range(n):
        if not pos[i].any():
            continue
        sp = S[i, pos[i]]
        sa = S[i, others[i]]
        mp, ma = sp.max(), sa.max()
        log_mean_pos = mp + np.log(np.exp(sp - mp).mean())
        log_all = ma + np.log(np.exp(sa - ma).sum())
        out[i] = log_all - log_mean_pos
    return out


def xent_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(f"logits {logits.shape} and labels {labels.shape} do not match")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k})")
    if not np.all(np.isfinite(logits.values)):
        raise ContractViolation("logits must be finite")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    lse = ad.log_sum_exp(logits, axis=1)
    picked = ad.masked_sum(logits, onehot, axis=1)
    return ad.reduce_mean(ad.sub(lse, picked))


def xent_multitask_loss(logits_per_task: Sequence, labels_per_task: Sequence) -> Tensor:
    """Sum of per-task cross-entropies."""
    if len(logits_per_task) != len(labels_per_task):
        raise ContractViolation("one label vector is required per task head")
    terms = [xent_loss(lg, lb) for lg, lb in zip(logits_per_task, labels_per_task)]
    return ad.reduce_sum(ad.concat_rows(terms))
