"""Binary checkpoints: magic `MOCCKPT1`, length-prefixed JSON header,
raw little-endian tensor payloads.

The header carries the config echo, step counter, RNG seed, and a tensor
directory (name, shape, precision, byte offset/length). Weights live
under their parameter names; optimizer moments under `optim.m.<name>` /
`optim.v.<name>`. Round trips are bit-exact by construction: payloads are
the raw little-endian bytes of each array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import CheckpointMismatch, ConfigError

MAGIC = b"MOCCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"single": "<f4", "double": "<f8"}
_PRECISION = {"<f4": "single", "<f8": "double"}


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    seed: int
    tensors: dict[str, np.ndarray]  # weights, keyed by parameter name
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def checkpoint_from(model, step: int = 0, seed: int = 0, optimizer=None, metadata: dict | None = None) -> Checkpoint:
    tensors = {name: p.value.data.copy() for name, p in model.params.items()}
    moments = {}
    if optimizer is not None:
        moments = {name: (buf["m"].copy(), buf["v"].copy()) for name, buf in optimizer.state.items()}
    return Checkpoint(
        config=model.config,
        step=step,
        seed=seed,
        tensors=tensors,
        moments=moments,
        metadata=dict(metadata or {}),
    )


def _precision_of(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "single"
    if arr.dtype == np.float64:
        return "double"
    raise ConfigError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    payloads = []
    offset = 0

    def put(name: str, arr: np.ndarray):
        nonlocal offset
        precision = _precision_of(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[precision]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "precision": precision,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)

    for name in sorted(ckpt.tensors):
        put(name, ckpt.tensors[name])
    for name in sorted(ckpt.moments):
        m, v = ckpt.moments[name]
        put(f"optim.m.{name}", m)
        put(f"optim.v.{name}", v)

    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng": {"seed": ckpt.seed, "algorithm": "pcg64-sha256-substreams"},
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic {data[:8]!r})")
    (header_len,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {header['format_version']}")
    base = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    moments_flat: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["precision"]]).reshape(entry["shape"]).copy()
        if entry["name"].startswith("optim."):
            moments_flat[entry["name"]] = arr
        else:
            tensors[entry["name"]] = arr
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for key, arr in moments_flat.items():
        kind, name = key.split(".", 2)[1:]
        if kind == "m":
            moments[name] = (arr, moments_flat[f"optim.v.{name}"])
    return Checkpoint(
        config=ModelConfig.from_dict(header["model_config"]),
        step=header["step"],
        seed=header["rng"]["seed"],
        tensors=tensors,
        moments=moments,
        metadata=header.get("metadata", {}),
        version=header["format_version"],
    )


def config_diff(expected: ModelConfig, found: ModelConfig, ignore: set[str] = frozenset()) -> dict:
    a, b = expected.to_dict(), found.to_dict()
    return {
        key: {"expected": a[key], "checkpoint": b[key]}
        for key in a
        if key not in ignore and a[key] != b[key]
    }


def check_config_match(expected: ModelConfig, found: ModelConfig, ignore: set[str] = frozenset()) -> None:
    diff = config_diff(expected, found, ignore)
    if diff:
        raise CheckpointMismatch(diff)


def apply_checkpoint(model, ckpt: Checkpoint, ignore: set[str] = frozenset({"max_seq_len"})) -> None:
    """Copy checkpoint weights into a built model; configs must agree on
    every field not explicitly ignored."""
    check_config_match(model.config, ckpt.config, ignore)
    missing = set(model.params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(model.params)
    if missing or extra:
        raise CheckpointMismatch({"tensor_table": {"missing": sorted(missing), "unexpected": sorted(extra)}})
    for name, p in model.params.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointMismatch({name: {"expected": list(p.shape), "checkpoint": list(arr.shape)}})
        p.value.data[...] = arr.astype(p.value.data.dtype, copy=False)


def model_from_checkpoint(ckpt: Checkpoint, precision: str | None = None, max_seq_len: int | None = None):
    """Rebuild a model carrying the checkpoint's weights; max_seq_len may
    be raised for longer-context continuation."""
    from dataclasses import replace

    from .model import build_model
    from .tensor import RngState

    cfg = ckpt.config
    if max_seq_len is not None:
        cfg = replace(cfg, max_seq_len=max(max_seq_len, cfg.max_seq_len))
    if precision is None:
        any_arr = next(iter(ckpt.tensors.values()))
        precision = _precision_of(any_arr)
    model = build_model(cfg, RngState(ckpt.seed), precision=precision)
    apply_checkpoint(model, ckpt)
    return model
