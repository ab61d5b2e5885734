"""Dense tensors, trainable parameters, the autodiff tape, and seeded RNG.

Everything above this module is built from these pieces. Arrays are plain
row-major numpy arrays in float64 ("double") or float32 ("single");
gradients are tracked by an explicit tape of per-op backward closures
(see ops.py), replayed in reverse. There is no graph optimizer.

Determinism contract: all array math goes through numpy kernels, whose
accumulation order is fixed per platform, so identical seeds give
bit-identical results across runs on the same machine. Tests rely only on
that run-to-run reproducibility.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError, ShapeError

PRECISION_DTYPES = {"double": np.float64, "single": np.float32}
_DTYPE_PRECISION = {np.dtype(np.float64): "double", np.dtype(np.float32): "single"}

PARAM_GROUPS = ("base", "memory_layers", "memory_bank")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A dense row-major numeric array with optional gradient tracking.

    ``data`` is the flat storage viewed through ``shape`` (numpy handles
    both); ``grad`` is allocated lazily during backward. Ops only record
    onto the tape when one is active, so inference runs allocation-free.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, precision: str | None = None, requires_grad: bool = False):
        if precision is not None:
            arr = np.asarray(data, dtype=PRECISION_DTYPES[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in _DTYPE_PRECISION:
                arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return _DTYPE_PRECISION[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.ndim else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor with a persistent zero-initialized grad.

    Every parameter belongs to exactly one group: base, memory_layers,
    or memory_bank (the per-group learning rates and freezing act on
    these).
    """

    __slots__ = ("value", "name", "group")

    def __init__(self, value: Tensor, name: str, group: str):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r} for {name!r}")
        value.requires_grad = True
        value.grad = np.zeros_like(value.data)
        self.value = value
        self.name = name
        self.group = group

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r})"


_ACTIVE_TAPE: list["Tape"] = []


class Tape:
    """Explicit record of applied ops, replayed in reverse for backward.

    Use as a context manager around the forward pass:

        with Tape() as tape:
            loss = forward(...)
        tape.backward(loss)

    Each op appends (output, backward_fn); backward_fn receives the
    output's upstream gradient and accumulates into the inputs. Outputs
    never reached by the loss keep grad None and their entries are
    skipped.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.pop()

    def record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE[-1] if _ACTIVE_TAPE else None


def _derive_seed(*parts) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


class RngState:
    """Seeded randomness with named, splittable substreams.

    Backed by numpy's PCG64 generator. A substream is derived from
    (seed, label) via SHA-256, so identical seeds give bit-identical
    draws in any consumption order, independent of how many other
    substreams exist.
    """

    algorithm = "pcg64-sha256-substreams"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def substream(self, *labels) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(_derive_seed(self.seed, *labels)))

    def split(self, *labels) -> "RngState":
        return RngState(_derive_seed(self.seed, *labels))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r})"
