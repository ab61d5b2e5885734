"""Deterministic training loop: grad accumulation, clipping, per-group
scheduled AdamW, periodic eval, in-memory checkpoints.

Batch order is a pure function of (seed, step, micro-step), so identical
configs give bit-identical trajectories and a resumed run replays the
exact batches the uninterrupted run would have seen. Metrics rows are
kept as dataclasses and serialized by ``metrics_csv``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import Checkpoint, check_config_match, checkpoint_from, model_from_checkpoint
from .config import ModelConfig
from .errors import ConfigError, NumericError, TrainingAborted
from .model import Model
from .optim import AdamW, AdamWConfig, clip_grad_norm, global_grad_norm
from .schedule import Schedule, cosine, lr_at_step
from .tensor import RngState, Tape

BANK_MODES = ("frozen", "low_lr", "equal_lr", "custom")
METRICS_HEADER = "step,split,lm_loss,lb_loss,z_loss,total_loss,lr_base,lr_mem,lr_bank,grad_norm"
EVAL_BATCHES = 4
EVAL_FRACTION = 0.1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    grad_accum: int = 1
    seq_len: int = 64
    lr_base: float = 1e-3
    lr_memory_layers: float | None = None  # None: same as base
    lr_memory_bank: float | None = None  # used by bank_mode=custom
    bank_mode: str = "equal_lr"
    schedule: Schedule = field(default_factory=lambda: cosine(10))
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 10

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be >= 1")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2 for next-token loss, got {self.seq_len}")
        if self.bank_mode not in BANK_MODES:
            raise ConfigError(f"bank_mode must be one of {BANK_MODES}, got {self.bank_mode!r}")
        if self.bank_mode == "custom" and self.lr_memory_bank is None:
            raise ConfigError("bank_mode=custom requires lr_memory_bank")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.steps > 0 and self.schedule.kind == "wsd" and self.schedule.decay_start >= self.steps:
            raise ConfigError(
                f"wsd decay_start {self.schedule.decay_start} must be < steps {self.steps}"
            )

    def group_lrs(self) -> dict[str, float]:
        bank = {
            "frozen": 0.0,
            "low_lr": self.lr_base / 10.0,
            "equal_lr": self.lr_base,
            "custom": self.lr_memory_bank,
        }[self.bank_mode]
        return {
            "base": self.lr_base,
            "memory_layers": self.lr_memory_layers if self.lr_memory_layers is not None else self.lr_base,
            "memory_bank": bank,
        }

    @property
    def frozen_groups(self) -> frozenset[str]:
        return frozenset({"memory_bank"}) if self.bank_mode == "frozen" else frozenset()

    def to_dict(self) -> dict:
        d = {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "grad_accum": self.grad_accum,
            "seq_len": self.seq_len,
            "lr_base": self.lr_base,
            "lr_memory_layers": self.lr_memory_layers,
            "lr_memory_bank": self.lr_memory_bank,
            "bank_mode": self.bank_mode,
            "schedule": self.schedule.to_dict(),
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = Schedule.from_dict(d["schedule"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Corpus:
    tokens: np.ndarray  # 1-D int64 token stream
    vocab: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ConfigError(f"corpus tokens must be 1-D, got shape {self.tokens.shape}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab):
            raise ConfigError(f"corpus token ids must lie in [0, {self.vocab})")

    def __len__(self) -> int:
        return int(self.tokens.size)

    def split(self, eval_fraction: float = EVAL_FRACTION) -> tuple[np.ndarray, np.ndarray]:
        cut = len(self) - max(1, int(len(self) * eval_fraction))
        return self.tokens[:cut], self.tokens[cut:]


def make_synthetic_corpus(vocab: int, length: int = 8192, seed: int = 0, period: int = 97) -> Corpus:
    """Tiled random pattern: next-token is (mostly) a deterministic
    function of the current token, so small models learn it fast."""
    if period < 2 or period > length:
        raise ConfigError(f"period {period} must be in [2, length {length}]")
    gen = RngState(seed).substream("synthetic-corpus")
    pattern = gen.integers(0, vocab, size=period, dtype=np.int64)
    reps = -(-length // period)
    return Corpus(np.tile(pattern, reps)[:length], vocab)


@dataclass(frozen=True)
class MetricsRow:
    step: int
    split: str  # "train" | "eval"
    lm_loss: float
    lb_loss: float
    z_loss: float
    total_loss: float
    lr_base: float
    lr_mem: float
    lr_bank: float
    grad_norm: float

    def to_csv_line(self) -> str:
        vals = [
            str(self.step),
            self.split,
            repr(self.lm_loss),
            repr(self.lb_loss),
            repr(self.z_loss),
            repr(self.total_loss),
            repr(self.lr_base),
            repr(self.lr_mem),
            repr(self.lr_bank),
            repr(self.grad_norm),
        ]
        return ",".join(vals)


def metrics_csv(rows: list[MetricsRow]) -> str:
    return "\n".join([METRICS_HEADER] + [r.to_csv_line() for r in rows]) + "\n"


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    checkpoint: Checkpoint
    model: Model
    optimizer: AdamW

    def eval_rows(self) -> list[MetricsRow]:
        return [r for r in self.metrics if r.split == "eval"]


def _sample_batch(region: np.ndarray, gen: np.random.Generator, batch_size: int, seq_len: int) -> np.ndarray:
    starts = gen.integers(0, region.size - seq_len + 1, size=batch_size)
    return np.stack([region[s : s + seq_len] for s in starts])


def _eval_batches(region: np.ndarray, rng: RngState, cfg: TrainConfig) -> list[np.ndarray]:
    gen = rng.substream("eval-batches")
    n = min(cfg.batch_size, 4)
    return [_sample_batch(region, gen, n, cfg.seq_len) for _ in range(EVAL_BATCHES)]


def _eval_losses(model: Model, batches: list[np.ndarray]) -> tuple[float, float, float, float]:
    lm = lb = z = total = 0.0
    for batch in batches:
        trace = model.forward(batch, batch)
        lm += trace.lm_loss
        lb += trace.lb_loss
        z += trace.z_loss
        total += trace.total_loss
    n = len(batches)
    return lm / n, lb / n, z / n, total / n


def train(
    model: Model,
    corpus: Corpus,
    cfg: TrainConfig,
    *,
    start_step: int = 0,
    optimizer: AdamW | None = None,
) -> TrainResult:
    cfg.validate()
    if len(corpus) < cfg.batch_size * cfg.seq_len:
        raise ConfigError(
            f"corpus length {len(corpus)} below batch_size*seq_len = {cfg.batch_size * cfg.seq_len}"
        )
    if corpus.vocab > model.config.vocab:
        raise ConfigError(f"corpus vocab {corpus.vocab} exceeds model vocab {model.config.vocab}")
    if cfg.seq_len > model.config.max_seq_len:
        raise ConfigError(f"seq_len {cfg.seq_len} exceeds model max_seq_len {model.config.max_seq_len}")

    frozen = cfg.frozen_groups
    if optimizer is None:
        optimizer = AdamW(
            model.params,
            AdamWConfig(betas=cfg.betas, weight_decay=cfg.weight_decay),
            frozen_groups=frozen,
        )
    rng = RngState(cfg.seed)
    train_region, eval_region = corpus.split()
    if train_region.size < cfg.seq_len or eval_region.size < cfg.seq_len:
        raise ConfigError("corpus too short to carve train and eval regions of seq_len")
    eval_batches = _eval_batches(eval_region, rng, cfg)
    sched = None
    if cfg.steps > start_step:
        sched = cfg.schedule if cfg.schedule.total_steps is not None else cfg.schedule.with_total_steps(cfg.steps)
    base_lrs = cfg.group_lrs()

    rows: list[MetricsRow] = []
    last_ckpt = checkpoint_from(model, step=start_step, seed=cfg.seed, optimizer=optimizer)

    for step in range(start_step, cfg.steps):
        lrs = {g: lr_at_step(sched, step, base) for g, base in base_lrs.items()}
        model.zero_grads()
        lm = lb = z = total = 0.0
        for micro in range(cfg.grad_accum):
            batch = _sample_batch(
                train_region, rng.substream("batch", step, micro), cfg.batch_size, cfg.seq_len
            )
            try:
                with Tape() as tape:
                    trace = model.forward(batch, batch)
                    if not math.isfinite(trace.total_loss):
                        raise NumericError(f"non-finite loss {trace.total_loss}")
                    tape.backward(ops.scale(trace.loss, 1.0 / cfg.grad_accum))
            except NumericError as e:
                raise TrainingAborted(f"step {step}: {e}", last_ckpt, step) from e
            lm += trace.lm_loss
            lb += trace.lb_loss
            z += trace.z_loss
            total += trace.total_loss
        grad_norm = global_grad_norm(model.params, frozen)
        clip_grad_norm(model.params, cfg.clip_norm, frozen)
        try:
            optimizer.step(lrs, t=step + 1)
        except NumericError as e:
            raise TrainingAborted(str(e), last_ckpt, step) from e
        done = step + 1
        a = cfg.grad_accum
        rows.append(
            MetricsRow(done, "train", lm / a, lb / a, z / a, total / a,
                       lrs["base"], lrs["memory_layers"], lrs["memory_bank"], grad_norm)
        )
        if done % cfg.eval_every == 0 or done == cfg.steps:
            elm, elb, ez, etotal = _eval_losses(model, eval_batches)
            rows.append(
                MetricsRow(done, "eval", elm, elb, ez, etotal,
                           lrs["base"], lrs["memory_layers"], lrs["memory_bank"], grad_norm)
            )
            last_ckpt = checkpoint_from(model, step=done, seed=cfg.seed, optimizer=optimizer)

    final = checkpoint_from(model, step=cfg.steps, seed=cfg.seed, optimizer=optimizer)
    return TrainResult(metrics=rows, checkpoint=final, model=model, optimizer=optimizer)


def resume_train(ckpt: Checkpoint, corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Continue the same run from a mid-run checkpoint: restores weights
    and optimizer moments, replays the original batch stream from the
    saved step."""
    if cfg.seed != ckpt.seed:
        raise ConfigError(f"resume seed {cfg.seed} differs from checkpoint seed {ckpt.seed}")
    if ckpt.step > cfg.steps:
        raise ConfigError(f"checkpoint step {ckpt.step} beyond configured steps {cfg.steps}")
    model = model_from_checkpoint(ckpt)
    optimizer = AdamW(
        model.params,
        AdamWConfig(betas=cfg.betas, weight_decay=cfg.weight_decay),
        frozen_groups=cfg.frozen_groups,
    )
    optimizer.load_moments(ckpt.moments)
    return train(model, corpus, cfg, start_step=ckpt.step, optimizer=optimizer)


def continue_train(
    ckpt: Checkpoint,
    corpus: Corpus,
    cfg: TrainConfig,
    expected_config: ModelConfig | None = None,
) -> TrainResult:
    """Second-phase training: fresh optimizer state and scheduler, with
    the context window re-opened to cfg.seq_len when it grew."""
    if expected_config is not None:
        check_config_match(expected_config, ckpt.config, ignore={"max_seq_len"})
    model = model_from_checkpoint(ckpt, max_seq_len=cfg.seq_len)
    return train(model, corpus, cfg)
