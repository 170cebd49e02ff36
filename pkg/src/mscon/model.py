"""Shared MLP encoder, per-task projection heads and per-task log-variances."""

from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

LOG_VAR = "log_var"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    num_tasks: int
    hidden_dims: tuple[int, ...] = (128, 128)
    embedding_dim: int = 64
    head_hidden_dim: int = 64
    projection_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.embedding_dim, self.head_hidden_dim, self.projection_dim)
        if min(dims + self.hidden_dims) < 1:
            raise ContractViolation(f"all dimensions must be >= 1: {self}")
        if self.num_tasks < 1:
            raise ContractViolation(f"num_tasks must be >= 1, got {self.num_tasks}")

    @property
    def encoder_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embedding_dim)


@dataclass
class ModelParams:
    """Named float64 arrays plus the config that shaped them.

    Names: ``enc.{l}.w``/``enc.{l}.b`` for encoder layers,
    ``head.{c}.{l}.w``/``head.{c}.{l}.b`` for the two layers of head ``c``
    and ``log_var`` (length C, ``s_c = log sigma_c^2``).
    """

    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_heads(self) -> int:
        return len({k.split(".")[1] for k in self.arrays if k.startswith("head.")})

    @property
    def sigma_sq(self) -> np.ndarray:
        return np.exp(self.arrays[LOG_VAR])

    def encoder_names(self) -> list[str]:
        return [k for k in self.arrays if k.startswith("enc.")]

    def replace(self, arrays: Mapping[str, np.ndarray]) -> ModelParams:
        return ModelParams(self.config, dict(arrays))

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.arrays.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def init_params(config: EncoderConfig) -> ModelParams:
    """He-scaled Gaussian weights, zero biases, all log-variances zero."""
    rng = np.random.default_rng(config.seed)
    arrays: dict[str, np.ndarray] = {}

    def linear(prefix: str, fan_in: int, fan_out: int) -> None:
        arrays[f"{prefix}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        arrays[f"{prefix}.b"] = np.zeros(fan_out)

    dims = config.encoder_dims
    for layer, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        linear(f"enc.{layer}", i, o)
    for c in range(config.num_tasks):
        linear(f"head.{c}.0", config.embedding_dim, config.head_hidden_dim)
        linear(f"head.{c}.1", config.head_hidden_dim, config.projection_dim)
    arrays[LOG_VAR] = np.zeros(config.num_tasks)
    return ModelParams(config, arrays)


def _weights(params) -> Mapping[str, Tensor | np.ndarray]:
    return params.arrays if isinstance(params, ModelParams) else params


def encode(params, X) -> Tensor:
    """Embed rows of ``X``: relu MLP with a linear final layer, no normalization.

    ``params`` is a :class:`ModelParams` or a mapping of (possibly tracked)
    Tensors keyed like ``ModelParams.arrays``.
    """
    w = _weights(params)
    x = ad.as_tensor(X)
    n_layers = sum(1 for k in w if k.startswith("enc.") and k.endswith(".w"))
    in_dim = ad.as_tensor(w["enc.0.w"]).shape[0]
    if x.values.ndim != 2 or x.shape[1] != in_dim:
        raise ContractViolation(f"encode: expected (batch, {in_dim}) input, got {x.shape}")
    h = x
    for layer in range(n_layers):
        h = ad.matmul(h, w[f"enc.{layer}.w"]) + w[f"enc.{layer}.b"]
        if layer < n_layers - 1:
            h = ad.relu(h)
    return h


def project(params, H, task: int) -> Tensor:
    """Map embeddings to head ``task``'s unit sphere (linear-relu-linear, then normalize)."""
    w = _weights(params)
    if f"head.{task}.0.w" not in w:
        raise ContractViolation(f"project: no head for task {task}")
    z = ad.relu(ad.matmul(H, w[f"head.{task}.0.w"]) + w[f"head.{task}.0.b"])
    z = ad.matmul(z, w[f"head.{task}.1.w"]) + w[f"head.{task}.1.b"]
    return ad.row_normalize(z)


# -- checkpoint --------------------------------------------------------------


def save_checkpoint(params: ModelParams, directory: str | Path) -> Path:
    """Write ``config.json``, ``params.bin`` (little-endian f64) and ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps(asdict(params.config), indent=2, sort_keys=True) + "\n"
    )
    offset = 0
    rows = []
    with open(directory / "params.bin", "wb") as fh:
        for name, arr in params.arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(data)
            rows.append((name, "x".join(str(s) for s in arr.shape), offset))
            offset += len(data)
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "shape", "byte_offset"])
        writer.writerows(rows)
    return directory


def load_checkpoint(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    cfg = json.loads((directory / "config.json").read_text())
    config = EncoderConfig(**cfg)
    blob = (directory / "params.bin").read_bytes()
    arrays = {}
    with open(directory / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            shape = tuple(int(s) for s in row["shape"].split("x")) if row["shape"] else ()
            count = int(np.prod(shape)) if shape else 1
            off = int(row["byte_offset"])
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            arrays[row["name"]] = arr.reshape(shape).astype(np.float64)
    return ModelParams(config, arrays)
