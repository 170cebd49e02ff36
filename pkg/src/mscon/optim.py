"""Heavy-ball SGD with momentum over named parameter arrays."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .errors import ContractViolation, TrainingDivergenceError


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    state: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One update ``v <- momentum * v + g; w <- w - lr * v``.

    Parameters missing from ``grads`` are frozen: they are copied through and
    their velocity is left untouched. Returns fresh ``(params, state)`` dicts;
    the inputs are not mutated.
    """
    if not lr > 0:
        raise ContractViolation(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ContractViolation(f"momentum must be in [0, 1), got {momentum}")
    state = {} if state is None else state

    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")

    new_params: dict[str, np.ndarray] = {}
    new_state: dict[str, np.ndarray] = dict(state)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = w
            continue
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        new_state[name] = v
        new_params[name] = w - lr * v
    return new_params, new_state
