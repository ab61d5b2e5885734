"""AdamW with parameter groups, frozen groups, and global-norm clipping.

Decoupled weight decay hits matrix-shaped weights only (ndim >= 2);
norm gains and biases are exempt. Frozen groups get no moment buffers
at all, so the optimizer-state footprint shrinks by exactly 2 elements
per frozen parameter element (the m and v buffers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import PARAM_GROUPS, Parameter


@dataclass(frozen=True)
class AdamWConfig:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1


class AdamW:
    """Holds per-parameter first/second moment buffers keyed by name.

    ``step`` takes the per-group learning rates already evaluated for the
    current schedule position and a 1-based step count for bias
    correction. Every applied update is logged to ``audit`` as
    (name, group, lr) so tests can verify group/LR bookkeeping.
    """

    def __init__(
        self,
        params: Mapping[str, Parameter],
        cfg: AdamWConfig = AdamWConfig(),
        frozen_groups: Iterable[str] = (),
    ):
        self.params = dict(params)
        self.cfg = cfg
        self.frozen_groups = frozenset(frozen_groups)
        unknown = self.frozen_groups - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown frozen groups: {sorted(unknown)}")
        self.state: dict[str, dict[str, np.ndarray]] = {}
        for name, p in self.params.items():
            if p.group in self.frozen_groups:
                continue
            zeros = np.zeros(p.shape, dtype=p.value.data.dtype)
            self.state[name] = {"m": zeros.copy(), "v": zeros.copy()}
        self.decay_names = frozenset(
            name for name, p in self.params.items() if p.value.ndim >= 2
        )
        self.audit: list[tuple[str, str, float]] = []

    def state_element_count(self) -> int:
        return sum(buf["m"].size + buf["v"].size for buf in self.state.values())

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.params.items() if p.group not in self.frozen_groups]

    def load_moments(self, moments: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
        for name, (m, v) in moments.items():
            if name not in self.state:
                raise ConfigError(f"moments for unknown or frozen parameter {name!r}")
            if m.shape != self.state[name]["m"].shape:
                raise ConfigError(f"moment shape {m.shape} does not match parameter {name!r}")
            self.state[name]["m"] = m.copy()
            self.state[name]["v"] = v.copy()

    def step(self, group_lrs: Mapping[str, float], t: int) -> None:
        if t < 1:
            raise ConfigError(f"bias correction needs step >= 1, got {t}")
        b1, b2 = self.cfg.betas
        wd = self.cfg.weight_decay
        trainable = self.trainable()
        for name, p in trainable:
            if not np.all(np.isfinite(p.value.grad)):
                raise NumericError(f"non-finite gradient in {name}; step aborted")
        inv1 = 1.0 / (1.0 - b1**t)
        inv2 = 1.0 / (1.0 - b2**t)
        for name, p in trainable:
            lr = float(group_lrs[p.group])
            g = p.value.grad
            buf = self.state[name]
            buf["m"] *= b1
            buf["m"] += (1.0 - b1) * g
            buf["v"] *= b2
            buf["v"] += (1.0 - b2) * np.square(g)
            update = (buf["m"] * inv1) / (np.sqrt(buf["v"] * inv2) + self.cfg.eps)
            if wd != 0.0 and name in self.decay_names:
                update = update + wd * p.value.data
            p.value.data -= lr * update
            self.audit.append((name, p.group, lr))


def adamw_step(optimizer: AdamW, group_lrs: Mapping[str, float], t: int) -> None:
    optimizer.step(group_lrs, t)


def global_grad_norm(params: Mapping[str, Parameter], frozen_groups: Iterable[str] = ()) -> float:
    frozen = frozenset(frozen_groups)
    total = 0.0
    for p in params.values():
        if p.group in frozen:
            continue
        g = p.value.grad.astype(np.float64, copy=False)
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params: Mapping[str, Parameter], max_norm: float, frozen_groups: Iterable[str] = ()) -> float:
    """Scale all trainable grads by max_norm/norm when norm exceeds
    max_norm; returns the applied scale factor."""
    norm = global_grad_norm(params, frozen_groups)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    frozen = frozenset(frozen_groups)
    for p in params.values():
        if p.group in frozen:
            continue
        p.value.grad *= scale
    return scale
