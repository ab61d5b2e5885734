"""Model architecture configuration and the named presets."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Complete architectural description of one model.

    Memory geometry: the bank holds ``bank_tokens`` latent tokens split
    into ``chapters`` contiguous blocks of ``chapter_size`` rows each;
    chapters [0, shared_chapters) are always-on, the router picks
    ``top_k`` of the rest per sequence. ``memory_layer_indices`` empty
    means a pure dense model.
    """

    d_model: int = 768
    n_layers: int = 16
    n_heads: int = 12
    n_kv_heads: int = 4
    d_ff: int = 2304
    vocab: int = 49152
    rope_theta: float = 100000.0
    tied_embeddings: bool = True
    memory_layer_indices: list[int] = field(default_factory=list)
    bank_tokens: int = 0
    chapters: int = 0
    shared_chapters: int = 0
    chapter_size: int = 0
    top_k: int = 0
    mem_heads: int = 12
    mem_kv_heads: int = 12
    routed_scaling: float = 2.5
    lb_coeff: float = 0.01
    z_coeff: float = 0.001
    adapter_enabled: bool = False
    bank_init_std: float = 0.02
    max_seq_len: int = 1024

    @property
    def has_memory(self) -> bool:
        return len(self.memory_layer_indices) > 0

    @property
    def routed_chapters(self) -> int:
        return self.chapters - self.shared_chapters

    @property
    def selected_tokens(self) -> int:
        """Memory tokens attended per sequence: (shared + top_k) * chapter_size."""
        return (self.shared_chapters + self.top_k) * self.chapter_size

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        def fail(msg):
            raise ConfigError(f"invalid model config: {msg}")

        if self.d_model <= 0 or self.n_layers <= 0 or self.vocab <= 0:
            fail("d_model, n_layers and vocab must be positive")
        if self.d_model % self.n_heads != 0:
            fail(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            fail(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2 != 0:
            fail(f"head dimension {self.head_dim} must be even for rotary embedding")
        if self.max_seq_len < 1:
            fail("max_seq_len must be >= 1")
        bad = [i for i in self.memory_layer_indices if not 0 <= i < self.n_layers]
        if bad:
            fail(f"memory_layer_indices {bad} outside [0, {self.n_layers})")
        if len(set(self.memory_layer_indices)) != len(self.memory_layer_indices):
            fail("memory_layer_indices contains duplicates")
        if self.has_memory:
            if self.bank_tokens != self.chapters * self.chapter_size:
                fail(
                    f"bank_tokens={self.bank_tokens} != chapters*chapter_size="
                    f"{self.chapters}*{self.chapter_size}"
                )
            if self.chapter_size <= 0 or self.chapters <= 0:
                fail("chapters and chapter_size must be positive when memory layers exist")
            if self.shared_chapters < 0 or self.top_k < 1:
                fail("shared_chapters must be >= 0 and top_k >= 1")
            if self.shared_chapters + self.top_k > self.chapters:
                fail(
                    f"shared_chapters+top_k={self.shared_chapters + self.top_k} exceeds "
                    f"chapters={self.chapters}"
                )
            if self.d_model % self.mem_heads != 0:
                fail(f"d_model={self.d_model} not divisible by mem_heads={self.mem_heads}")
            if self.mem_heads % self.mem_kv_heads != 0:
                fail(f"mem_heads={self.mem_heads} not divisible by mem_kv_heads={self.mem_kv_heads}")
            if (self.d_model // self.mem_heads) % 2 != 0:
                fail("memory attention head dimension must be even")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["memory_layer_indices"] = list(self.memory_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _paper_moc() -> ModelConfig:
    return ModelConfig(
        d_model=768,
        n_layers=16,
        n_heads=12,
        n_kv_heads=4,
        d_ff=2304,
        vocab=49152,
        rope_theta=100000.0,
        tied_embeddings=True,
        memory_layer_indices=[2, 6, 10, 14],
        bank_tokens=262208,
        chapters=4097,
        shared_chapters=1,
        chapter_size=64,
        top_k=64,
        mem_heads=12,
        mem_kv_heads=12,
        routed_scaling=2.5,
        lb_coeff=0.01,
        z_coeff=0.001,
        adapter_enabled=False,
        bank_init_std=0.02,
        max_seq_len=1024,
    )


def _micro() -> ModelConfig:
    return ModelConfig(
        d_model=64,
        n_layers=4,
        n_heads=4,
        n_kv_heads=2,
        d_ff=192,
        vocab=256,
        rope_theta=100000.0,
        tied_embeddings=True,
        memory_layer_indices=[1, 3],
        bank_tokens=136,
        chapters=17,
        shared_chapters=1,
        chapter_size=8,
        top_k=4,
        mem_heads=4,
        mem_kv_heads=4,
        routed_scaling=2.5,
        lb_coeff=0.01,
        z_coeff=0.001,
        adapter_enabled=False,
        bank_init_std=0.02,
        max_seq_len=64,
    )


def preset(name: str) -> ModelConfig:
    """The four named architectures: moc-paper, vanilla-backbone,
    vanilla-iso, micro."""
    if name == "moc-paper":
        cfg = _paper_moc()
    elif name == "vanilla-backbone":
        cfg = replace(
            _paper_moc(),
            memory_layer_indices=[],
            bank_tokens=0,
            chapters=0,
            shared_chapters=0,
            chapter_size=0,
            top_k=0,
        )
    elif name == "vanilla-iso":
        cfg = replace(
            _paper_moc(),
            n_layers=24,
            memory_layer_indices=[],
            bank_tokens=0,
            chapters=0,
            shared_chapters=0,
            chapter_size=0,
            top_k=0,
        )
    elif name == "micro":
        cfg = _micro()
    else:
        raise ConfigError(
            f"unknown preset {name!r}; expected moc-paper, vanilla-backbone, vanilla-iso or micro"
        )
    cfg.validate()
    return cfg


PRESET_NAMES = ("moc-paper", "vanilla-backbone", "vanilla-iso", "micro")
