"""Two-phase forgetting harness on synthetic corpora.

Phase A trains on key->value fact strings; phase B trains on a
sequence-transform instruction task with disjoint marker and symbol
tokens and a doubled context window. Recall of phase-A facts is measured
by greedy decoding before and after phase B; the report carries
per-variant deltas (post-B minus post-A). Three variants run: a
memory-free backbone, the memory model, and the memory model with its
bank frozen during phase B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig, preset
from .errors import ConfigError, TrainingAborted
from .model import Model, build_model
from .schedule import cosine
from .tensor import RngState
from .train import Corpus, TrainConfig, _eval_batches, _eval_losses, continue_train, train

FACT_OPEN, FACT_SEP, FACT_CLOSE = 1, 2, 3
INSTR_OPEN, INSTR_SEP, INSTR_CLOSE = 4, 5, 6
FACT_MARKERS = (FACT_OPEN, FACT_SEP, FACT_CLOSE)
INSTR_MARKERS = (INSTR_OPEN, INSTR_SEP, INSTR_CLOSE)
VARIANTS = ("vanilla-like", "moc", "moc-frozen-bank")
TRANSFORMS = ("reverse", "shift")


@dataclass(frozen=True)
class FactSpec:
    n_facts: int = 12
    key_alphabet: int = 12
    value_alphabet: int = 12
    key_len: int = 2
    value_len: int = 3
    repeats: int = 40
    seed: int = 0
    key_base: int = 10  # key symbol token ids start here
    value_base: int = 96  # value symbol token ids start here

    def validate(self, vocab: int) -> None:
        if self.n_facts < 1:
            raise ConfigError(f"n_facts must be >= 1, got {self.n_facts}")
        if self.key_alphabet < 2 or self.value_alphabet < 2:
            raise ConfigError("key and value alphabets must have >= 2 symbols")
        if self.key_len < 1 or self.value_len < 1:
            raise ConfigError("key_len and value_len must be >= 1")
        if self.key_alphabet**self.key_len < self.n_facts:
            raise ConfigError(
                f"{self.n_facts} unique keys do not fit in alphabet {self.key_alphabet}^{self.key_len}"
            )
        if self.key_base + self.key_alphabet > self.value_base:
            raise ConfigError("key symbol range overlaps value symbol range")
        if self.value_base + self.value_alphabet > vocab:
            raise ConfigError(
                f"value symbols reach {self.value_base + self.value_alphabet}, beyond vocab {vocab}"
            )

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "FactSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fact spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class InstructionSpec:
    n_examples: int = 16
    src_len: int = 4
    alphabet: int = 20
    repeats: int = 30
    transform: str = "reverse"
    seed: int = 0
    symbol_base: int = 180

    def validate(self, vocab: int) -> None:
        if self.n_examples < 1 or self.src_len < 1 or self.repeats < 1:
            raise ConfigError("n_examples, src_len, and repeats must be >= 1")
        if self.alphabet < 2:
            raise ConfigError("instruction alphabet must have >= 2 symbols")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if self.symbol_base + self.alphabet > vocab:
            raise ConfigError(
                f"instruction symbols reach {self.symbol_base + self.alphabet}, beyond vocab {vocab}"
            )

    def apply(self, src: np.ndarray) -> np.ndarray:
        if self.transform == "reverse":
            return src[::-1].copy()
        return self.symbol_base + (src - self.symbol_base + 1) % self.alphabet

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown instruction spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Probe:
    prompt: np.ndarray  # 1-D token prefix
    expected: np.ndarray  # 1-D tokens to be decoded greedily


def _render_fact(key: np.ndarray, value: np.ndarray) -> np.ndarray:
    return np.concatenate([[FACT_OPEN], key, [FACT_SEP], value, [FACT_CLOSE]]).astype(np.int64)


def gen_fact_corpus(spec: FactSpec, vocab: int) -> tuple[Corpus, list[Probe]]:
    """Render n_facts unique (key, value) pairs `repeats` times each in
    shuffled order; probes pair each key prompt with its value tokens."""
    spec.validate(vocab)
    rng = RngState(spec.seed)
    n_keys = spec.key_alphabet**spec.key_len
    key_codes = rng.substream("keys").choice(n_keys, size=spec.n_facts, replace=False)
    keys = []
    for code in key_codes:
        digits = []
        for _ in range(spec.key_len):
            digits.append(spec.key_base + code % spec.key_alphabet)
            code //= spec.key_alphabet
        keys.append(np.array(digits, dtype=np.int64))
    values = spec.value_base + rng.substream("values").integers(
        0, spec.value_alphabet, size=(spec.n_facts, spec.value_len)
    ).astype(np.int64)

    renders = [_render_fact(k, v) for k, v in zip(keys, values)]
    order = np.repeat(np.arange(spec.n_facts), spec.repeats)
    rng.substream("order").shuffle(order)
    tokens = np.concatenate([renders[i] for i in order])
    probes = [
        Probe(np.concatenate([[FACT_OPEN], k, [FACT_SEP]]).astype(np.int64), v.copy())
        for k, v in zip(keys, values)
    ]
    return Corpus(tokens, vocab), probes


def parse_facts(tokens: np.ndarray) -> list[tuple[tuple, tuple]]:
    """Recover (key, value) pairs from a rendered fact stream; used to
    check that rendering is invertible."""
    out = []
    i = 0
    toks = np.asarray(tokens)
    while i < toks.size:
        if toks[i] != FACT_OPEN:
            raise ConfigError(f"expected fact-open marker at position {i}, got {toks[i]}")
        j = i + 1
        while toks[j] != FACT_SEP:
            j += 1
        key = tuple(int(t) for t in toks[i + 1 : j])
        k = j + 1
        while toks[k] != FACT_CLOSE:
            k += 1
        value = tuple(int(t) for t in toks[j + 1 : k])
        out.append((key, value))
        i = k + 1
    return out


def gen_instruction_corpus(spec: InstructionSpec, vocab: int) -> tuple[Corpus, list[Probe]]:
    """Transform task: [open] src [sep] f(src) [close], disjoint from the
    fact token ranges."""
    spec.validate(vocab)
    rng = RngState(spec.seed)
    gen = rng.substream("instructions")
    rows = []
    probes = []
    for _ in range(spec.n_examples):
        src = spec.symbol_base + gen.integers(0, spec.alphabet, size=spec.src_len).astype(np.int64)
        dst = spec.apply(src)
        rows.append(np.concatenate([[INSTR_OPEN], src, [INSTR_SEP], dst, [INSTR_CLOSE]]).astype(np.int64))
        probes.append(Probe(np.concatenate([[INSTR_OPEN], src, [INSTR_SEP]]).astype(np.int64), dst))
    order = np.repeat(np.arange(spec.n_examples), spec.repeats)
    rng.substream("order").shuffle(order)
    tokens = np.concatenate([rows[i] for i in order])
    return Corpus(tokens, vocab), probes[: min(64, len(probes))]


def greedy_decode(model: Model, prompts: np.ndarray, n_tokens: int) -> np.ndarray:
    """Batched greedy continuation: returns the (N, n_tokens) argmax
    completions of equal-length prompts."""
    seq = np.asarray(prompts, dtype=np.int64)
    for _ in range(n_tokens):
        logits = model.forward_logits(seq)
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq[:, prompts.shape[1] :]


def eval_fact_recall(model: Model, probes: list[Probe]) -> float:
    """Exact-match accuracy of greedy decoding over the probe set."""
    if not probes:
        raise ConfigError("empty probe set")
    if len({p.prompt.size for p in probes}) != 1 or len({p.expected.size for p in probes}) != 1:
        raise ConfigError("probe prompts/answers must share lengths for batched decoding")
    prompts = np.stack([p.prompt for p in probes])
    expected = np.stack([p.expected for p in probes])
    decoded = greedy_decode(model, prompts, expected.shape[1])
    return float(np.mean(np.all(decoded == expected, axis=1)))


@dataclass
class VariantResult:
    variant: str
    failed: bool = False
    fact_recall_a: float = math.nan
    fact_recall_b: float = math.nan
    task_acc_a: float = math.nan
    task_acc_b: float = math.nan
    fact_loss_a: float = math.nan
    fact_loss_b: float = math.nan
    bank_unchanged_in_b: bool | None = None

    @property
    def recall_delta(self) -> float:
        return self.fact_recall_b - self.fact_recall_a

    @property
    def task_delta(self) -> float:
        return self.task_acc_b - self.task_acc_a

    @property
    def loss_delta(self) -> float:
        return self.fact_loss_b - self.fact_loss_a


@dataclass
class RetentionReport:
    seed: int
    variants: dict[str, VariantResult] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float, float, float]]:
        out = []
        for name in VARIANTS:
            r = self.variants[name]
            out.append((name, "fact_recall", r.fact_recall_a, r.fact_recall_b, r.recall_delta))
            out.append((name, "task_accuracy", r.task_acc_a, r.task_acc_b, r.task_delta))
            out.append((name, "fact_eval_loss", r.fact_loss_a, r.fact_loss_b, r.loss_delta))
            out.append((name, "failed", 0.0, 1.0 if r.failed else 0.0, 1.0 if r.failed else 0.0))
        return out

    def to_csv(self) -> str:
        lines = ["variant,metric,phaseA,phaseB,delta"]
        lines += [f"{v},{m},{a!r},{b!r},{d!r}" for v, m, a, b, d in self.rows()]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"retention protocol, seed {self.seed}"]
        for name in VARIANTS:
            r = self.variants[name]
            if r.failed:
                lines.append(f"  {name:<16} FAILED (training aborted)")
                continue
            lines.append(
                f"  {name:<16} recall {r.fact_recall_a:.3f} -> {r.fact_recall_b:.3f}"
                f" (delta {r.recall_delta:+.3f}); task {r.task_acc_b:.3f};"
                f" fact loss {r.fact_loss_a:.4f} -> {r.fact_loss_b:.4f}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "RetentionReport":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if lines[0] != "variant,metric,phaseA,phaseB,delta":
            raise ConfigError(f"bad retention CSV header: {lines[0]!r}")
        report = cls(seed=seed)
        for ln in lines[1:]:
            variant, metric, a, b, d = ln.split(",")
            r = report.variants.setdefault(variant, VariantResult(variant))
            a, b = float(a), float(b)
            if metric == "fact_recall":
                r.fact_recall_a, r.fact_recall_b = a, b
            elif metric == "task_accuracy":
                r.task_acc_a, r.task_acc_b = a, b
            elif metric == "fact_eval_loss":
                r.fact_loss_a, r.fact_loss_b = a, b
            elif metric == "failed":
                r.failed = b == 1.0
            else:
                raise ConfigError(f"unknown retention metric {metric!r}")
        return report


@dataclass(frozen=True)
class RetentionConfig:
    fact: FactSpec = FactSpec()
    instruction: InstructionSpec = InstructionSpec()
    phase_a: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            steps=250, batch_size=8, seq_len=16, lr_base=1e-3, schedule=cosine(10), eval_every=50
        )
    )
    phase_b: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            steps=300, batch_size=8, seq_len=32, lr_base=1e-3, schedule=cosine(10), eval_every=50
        )
    )
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "fact": self.fact.to_dict(),
            "instruction": self.instruction.to_dict(),
            "phase_a": self.phase_a.to_dict(),
            "phase_b": self.phase_b.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetentionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown retention config keys: {sorted(unknown)}")
        d = dict(d)
        if "fact" in d:
            d["fact"] = FactSpec.from_dict(d["fact"])
        if "instruction" in d:
            d["instruction"] = InstructionSpec.from_dict(d["instruction"])
        for key in ("phase_a", "phase_b"):
            if key in d:
                d[key] = TrainConfig.from_dict(d[key])
        return cls(**d)


def variant_model_configs(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    cfg = base if base is not None else preset("micro")
    if not cfg.has_memory:
        raise ConfigError("retention base config must have memory layers")
    return {
        "vanilla-like": replace(cfg, memory_layer_indices=()),
        "moc": cfg,
        "moc-frozen-bank": cfg,
    }


def _check_disjoint(fact_corpus: Corpus, instr_corpus: Corpus) -> None:
    fact_tokens = set(np.unique(fact_corpus.tokens).tolist())
    instr_tokens = set(np.unique(instr_corpus.tokens).tolist())
    overlap = fact_tokens & instr_tokens
    if overlap:
        raise ConfigError(f"fact and instruction corpora share tokens: {sorted(overlap)[:8]}")


def run_retention_protocol(
    cfg: RetentionConfig, model_cfg: ModelConfig | None = None
) -> RetentionReport:
    """Train each variant on facts, fine-tune on the instruction task
    with doubled context, and measure what happened to fact recall."""
    fact_corpus, fact_probes = gen_fact_corpus(cfg.fact, vocab=(model_cfg or preset("micro")).vocab)
    instr_corpus, instr_probes = gen_instruction_corpus(
        cfg.instruction, vocab=(model_cfg or preset("micro")).vocab
    )
    _check_disjoint(fact_corpus, instr_corpus)
    report = RetentionReport(seed=cfg.seed)
    phase_a = replace(cfg.phase_a, seed=cfg.seed)
    for variant, mc in variant_model_configs(model_cfg).items():
        result = VariantResult(variant)
        report.variants[variant] = result
        phase_b = replace(
            cfg.phase_b,
            seed=cfg.seed + 1,
            bank_mode="frozen" if variant == "moc-frozen-bank" else cfg.phase_b.bank_mode,
        )
        try:
            model = build_model(mc, RngState(cfg.seed))
            res_a = train(model, fact_corpus, phase_a)
            result.fact_recall_a = eval_fact_recall(model, fact_probes)
            result.task_acc_a = eval_fact_recall(model, instr_probes)
            result.fact_loss_a = _fact_eval_loss(model, fact_corpus, phase_a)
            bank_before = res_a.checkpoint.tensors.get("bank.tokens")
            res_b = continue_train(res_a.checkpoint, instr_corpus, phase_b)
            model_b = res_b.model
            result.fact_recall_b = eval_fact_recall(model_b, fact_probes)
            result.task_acc_b = eval_fact_recall(model_b, instr_probes)
            result.fact_loss_b = _fact_eval_loss(model_b, fact_corpus, phase_a)
            if bank_before is not None:
                result.bank_unchanged_in_b = bool(
                    np.array_equal(bank_before, model_b["bank.tokens"].value.data)
                )
        except TrainingAborted:
            result.failed = True
    return report


def _fact_eval_loss(model: Model, fact_corpus: Corpus, phase_a: TrainConfig) -> float:
    _, eval_region = fact_corpus.split()
    batches = _eval_batches(eval_region, RngState(phase_a.seed), phase_a)
    lm, _, _, _ = _eval_losses(model, batches)
    return lm


def run_multi_seed(
    cfg: RetentionConfig, seeds: list[int], model_cfg: ModelConfig | None = None
) -> tuple[list[RetentionReport], RetentionReport]:
    """One report per seed plus a mean report over non-failed variants."""
    if not seeds:
        raise ConfigError("need at least one seed")
    reports = [run_retention_protocol(replace(cfg, seed=s), model_cfg) for s in seeds]
    mean = RetentionReport(seed=-1)
    for variant in VARIANTS:
        oks = [r.variants[variant] for r in reports if not r.variants[variant].failed]
        agg = VariantResult(variant, failed=not oks)
        if oks:
            agg.fact_recall_a = float(np.mean([v.fact_recall_a for v in oks]))
            agg.fact_recall_b = float(np.mean([v.fact_recall_b for v in oks]))
            agg.task_acc_a = float(np.mean([v.task_acc_a for v in oks]))
            agg.task_acc_b = float(np.mean([v.task_acc_b for v in oks]))
            agg.fact_loss_a = float(np.mean([v.fact_loss_a for v in oks]))
            agg.fact_loss_b = float(np.mean([v.fact_loss_b for v in oks]))
        mean.variants[variant] = agg
    return reports, mean
