"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record onto the active :class:`Tape` (``with Tape() as tape:``)
whenever at least one input requires a gradient. Outside a tape, or when no
input requires a gradient, operations run as plain numpy code.

Only the primitives needed by the contrastive losses and the MLP encoder are
provided. Broadcasting is limited to what those need: a trailing-dims operand
(e.g. a bias row) or a scalar against a larger array.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateInputError

NORM_EPS = 1e-12

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """Dense float64 array that can take part in a differentiation tape."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr is values and requires_grad:
            arr = arr.copy()
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass(eq=False)
class Tape:
    """Ordered record of operations; nodes are appended in execution order."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, vjp)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.values.size == 1 or b.values.size == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise ContractViolation(f"{kind}: incompatible shapes {sa} and {sb}")


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.values + b.values,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.values - b.values,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scalar_mul", (a,), a.values * c, lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _record(
        "mul", (a, b), av * bv,
        lambda g: (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        ),
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.values, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (out > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if not np.all(av > 0):
        raise ContractViolation("log: inputs must be strictly positive")
    return _record("log", (a,), np.log(av), lambda g: (g / av,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _record(
        "matmul", (a, b), av @ bv,
        lambda g: (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        ),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ContractViolation(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def row_normalize(a) -> Tensor:
    """Scale every row to unit Euclidean norm.

    Rows with norm <= 1e-12 raise instead of being padded with an epsilon, so
    a collapsed projection shows up as an error rather than a silent NaN.
    """
    a = as_tensor(a)
    x = a.values
    if x.ndim not in (1, 2):
        raise ContractViolation(f"row_normalize: expected 1-D or 2-D input, got {a.shape}")
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    norms = np.sqrt(np.einsum("ij,ij->i", x2, x2))[:, None]
    bad = np.flatnonzero(norms[:, 0] <= NORM_EPS)
    if bad.size:
        raise DegenerateInputError(
            f"row_normalize: row(s) {bad[:5].tolist()} have norm <= {NORM_EPS:g}"
        )
    v = x2 / norms

    def vjp(g):
        g2 = g.reshape(v.shape)
        dot = np.einsum("ij,ij->i", v, g2)[:, None]
        return (((g2 - v * dot) / norms).reshape(x.shape),)

    return _record("row_normalize", (a,), v.reshape(x.shape), vjp)


# -- reductions --------------------------------------------------------------


def log_sum_exp(a, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``, optionally over masked entries only."""
    a = as_tensor(a)
    x = a.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ContractViolation(f"log_sum_exp: mask shape {mask.shape} != {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise DegenerateInputError("log_sum_exp: a slice has no unmasked entries")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = np.max(xm, axis=axis, keepdims=True)
    e = np.exp(xm - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    w = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _record("log_sum_exp", (a,), out, vjp)


def masked_sum(a, mask, axis: int | None = None) -> Tensor:
    """Sum of ``a * mask`` along ``axis``; ``mask`` is a constant (bool or float)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ContractViolation(f"masked_sum: mask shape {mask.shape} != {a.shape}")
    out = (a.values * mask).sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (g * mask,)
        return (np.expand_dims(g, axis) * mask,)

    return _record("masked_sum", (a,), out, vjp)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("reduce_sum", (a,), a.values.sum(axis=axis), vjp)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.values.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record("reduce_mean", (a,), a.values.mean(axis=axis), vjp)


def concat_rows(tensors: Sequence) -> Tensor:
    """Stack along axis 0. Scalars (0-d) are stacked into a vector."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractViolation("concat_rows: nothing to concatenate")
    if all(t.values.ndim == 0 for t in ts):
        out = np.array([t.values for t in ts], dtype=np.float64)
        return _record("concat_rows", ts, out, lambda g: tuple(g[i] for i in range(len(ts))))
    tails = {t.shape[1:] for t in ts}
    if len(tails) != 1 or any(t.values.ndim == 0 for t in ts):
        raise ContractViolation(f"concat_rows: mismatched shapes {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[0] for t in ts])[:-1]
    out = np.concatenate([t.values for t in ts], axis=0)
    return _record("concat_rows", ts, out, lambda g: tuple(np.split(g, sizes, axis=0)))


FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "scalar_mul": scalar_mul,
    "elementwise_mul": mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "row_normalize": row_normalize,
    "log_sum_exp": log_sum_exp,
    "masked_sum": masked_sum,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "transpose": transpose,
    "concat_rows": concat_rows,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ContractViolation(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.values.size != 1 or root.values.ndim > 1:
        raise ContractViolation(f"backward: root must be a scalar, got shape {root.shape}")
    if root._node is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.values) if root.grad is None else root.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# -- verification ------------------------------------------------------------


def grad_check(
    f: Callable,
    point,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``point`` is an array/Tensor or a mapping of name -> array; ``f`` receives
    the same structure wrapped in Tensors. Returns the maximum over checked
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``. With
    ``max_coords`` set, at most that many coordinates per input are sampled.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ContractViolation(f"grad_check: step {step} outside [1e-7, 1e-3]")
    single = not isinstance(point, Mapping)
    base = {"x": point} if single else dict(point)
    base = {
        k: np.array(v.values if isinstance(v, Tensor) else v, dtype=np.float64)
        for k, v in base.items()
    }

    def call(arrays, track):
        ts = {k: Tensor(v, requires_grad=track, name=k) for k, v in arrays.items()}
        out = f(ts["x"] if single else ts)
        return ts, out

    with Tape() as tape:
        leaves, out = call(base, True)
        backward(tape, out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in base.items():
        analytic = leaves[k].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(j, arr.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = {kk: vv for kk, vv in base.items()}
                moved = arr.copy()
                moved[idx] += sign * step
                probe[k] = moved
                _, y = call(probe, False)
                fy = y.item()
                if not np.isfinite(fy):
                    raise DegenerateInputError(f"grad_check: f is non-finite near {k}{list(idx)}")
                vals.append(fy)
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
