"""Exact integer FLOPs accounting for one forward pass.

Counting rules: a linear layer over N rows costs 2*N*d_in*d_out;
attention pair matmuls cost 4*B*Lq*Lk*d; softmax plus mask and scale
cost heads*Lq*Lk*(5+2); RMSNorm over N rows costs N*(4d+4); mean pooling
costs d*(L-1) adds plus d divides. The backward pass is approximated as
2x the forward, so forward+backward is 3x. Everything is Python int
arithmetic; no floats anywhere in this module.

The router auxiliary-loss cost has no documented decomposition, only a
per-layer total at B=1; ``router_aux_flops`` below is our own documented
estimate, and ``aux_override`` pins the line to an externally known value
(all exact regression fixtures use the override).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig
from .errors import ConfigError

SOFTMAX_COST = 5  # per element: max, subtract, exp, sum-share, divide
MASK_SCALE_COST = 2  # mask add + temperature scale per score element
ACT_COST = 5  # silu + gate multiply per hidden element
CE_COST = 5  # per-vocab-entry cost of log-softmax loss


@dataclass(frozen=True)
class AttentionFlops:
    q: int
    k: int
    v: int
    o: int
    matmuls: int
    softmax: int

    @property
    def total(self) -> int:
        return self.q + self.k + self.v + self.o + self.matmuls + self.softmax


@dataclass(frozen=True)
class MlpFlops:
    up: int
    gate: int
    down: int
    activation: int

    @property
    def total(self) -> int:
        return self.up + self.gate + self.down + self.activation


@dataclass(frozen=True)
class StandardLayerFlops:
    self_attention: AttentionFlops
    rope: int
    norms: int
    mlp: MlpFlops
    residuals: int

    @property
    def total(self) -> int:
        return self.self_attention.total + self.rope + self.norms + self.mlp.total + self.residuals


@dataclass(frozen=True)
class RouterFlops:
    pool: int
    linear: int
    softmax: int
    topk: int

    @property
    def total(self) -> int:
        return self.pool + self.linear + self.softmax + self.topk


@dataclass(frozen=True)
class MemPreprocessFlops:
    weighting: int
    rmsnorm: int

    @property
    def total(self) -> int:
        return self.weighting + self.rmsnorm


@dataclass(frozen=True)
class MemoryExtraFlops:
    router: RouterFlops
    router_aux: int
    mem_preprocess: MemPreprocessFlops
    mem_attention: AttentionFlops
    extra_norm: int
    extra_residual: int

    @property
    def total(self) -> int:
        return (
            self.router.total
            + self.router_aux
            + self.mem_preprocess.total
            + self.mem_attention.total
            + self.extra_norm
            + self.extra_residual
        )


@dataclass(frozen=True)
class HeadFlops:
    norm: int
    lm_head: int
    ce: int

    @property
    def total(self) -> int:
        return self.norm + self.lm_head + self.ce


@dataclass(frozen=True)
class FlopsReport:
    """Hierarchical integer breakdown; every total is the exact sum of
    its children."""

    batch: int
    seq_len: int
    n_standard_layers: int
    n_memory_layers: int
    standard_layer: StandardLayerFlops
    memory_extra: MemoryExtraFlops | None
    head: HeadFlops

    @property
    def memory_layer_total(self) -> int:
        if self.memory_extra is None:
            return 0
        return self.standard_layer.total + self.memory_extra.total

    @property
    def forward(self) -> int:
        total = (self.n_standard_layers + self.n_memory_layers) * self.standard_layer.total
        if self.memory_extra is not None:
            total += self.n_memory_layers * self.memory_extra.total
        return total + self.head.total

    @property
    def backward(self) -> int:
        return 2 * self.forward

    @property
    def fwd_bwd(self) -> int:
        return 3 * self.forward

    def as_dict(self) -> dict:
        d = {
            "batch": self.batch,
            "seq_len": self.seq_len,
            "n_standard_layers": self.n_standard_layers,
            "n_memory_layers": self.n_memory_layers,
            "standard_layer": {
                "self_attention": _with_total(self.standard_layer.self_attention, ["q", "k", "v", "o", "matmuls", "softmax"]),
                "rope": self.standard_layer.rope,
                "norms": self.standard_layer.norms,
                "mlp": _with_total(self.standard_layer.mlp, ["up", "gate", "down", "activation"]),
                "residuals": self.standard_layer.residuals,
                "total": self.standard_layer.total,
            },
            "head": _with_total(self.head, ["norm", "lm_head", "ce"]),
        }
        if self.memory_extra is not None:
            m = self.memory_extra
            d["memory_layer_extra"] = {
                "router": _with_total(m.router, ["pool", "linear", "softmax", "topk"]),
                "router_aux": m.router_aux,
                "mem_preprocess": _with_total(m.mem_preprocess, ["weighting", "rmsnorm"]),
                "mem_attention": _with_total(m.mem_attention, ["q", "k", "v", "o", "matmuls", "softmax"]),
                "extra_norm": m.extra_norm,
                "extra_residual": m.extra_residual,
                "total": m.total,
            }
            d["memory_layer_total"] = self.memory_layer_total
        d["totals"] = {"forward": self.forward, "backward": self.backward, "fwd_bwd": self.fwd_bwd}
        return d

    def flat_items(self) -> list[tuple[str, int]]:
        """Dotted (component, value) rows, depth-first in stable order."""
        rows: list[tuple[str, int]] = []

        def walk(prefix, node):
            if isinstance(node, dict):
                for key, val in node.items():
                    walk(f"{prefix}.{key}" if prefix else key, val)
            else:
                rows.append((prefix, int(node)))

        walk("", self.as_dict())
        return rows

    def to_text(self) -> str:
        width = max(len(k) for k, _ in self.flat_items())
        return "\n".join(f"{k:<{width}}  {v:>22,}" for k, v in self.flat_items())

    def to_csv(self) -> str:
        lines = ["component,value"]
        lines += [f"{k},{v}" for k, v in self.flat_items()]
        return "\n".join(lines) + "\n"


def _with_total(obj, names: list[str]) -> dict:
    d = {n: getattr(obj, n) for n in names}
    d["total"] = obj.total
    return d


def _check(b: int, l: int) -> None:
    if b < 1 or l < 1:
        raise ConfigError(f"batch={b} and seq_len={l} must be >= 1")


def flops_standard_layer(cfg: ModelConfig, batch: int = 1, seq_len: int = 1024) -> StandardLayerFlops:
    """Self-attention + RoPE + two norms + SwiGLU MLP + two residuals."""
    _check(batch, seq_len)
    d, dff = cfg.d_model, cfg.d_ff
    d_kv = cfg.n_kv_heads * cfg.head_dim
    n = batch * seq_len
    attn = AttentionFlops(
        q=2 * n * d * d,
        k=2 * n * d * d_kv,
        v=2 * n * d * d_kv,
        o=2 * n * d * d,
        matmuls=4 * batch * seq_len * seq_len * d,
        softmax=batch * cfg.n_heads * seq_len * seq_len * (SOFTMAX_COST + MASK_SCALE_COST),
    )
    mlp = MlpFlops(
        up=2 * n * d * dff,
        gate=2 * n * d * dff,
        down=2 * n * dff * d,
        activation=n * dff * ACT_COST,
    )
    return StandardLayerFlops(
        self_attention=attn,
        rope=batch * 3 * seq_len * (d + d_kv),
        norms=2 * n * (4 * d + 4),
        mlp=mlp,
        residuals=2 * n * d,
    )


def router_aux_flops(cfg: ModelConfig, batch: int = 1) -> int:
    """Estimated auxiliary-loss cost per memory layer (our formula).

    Covers load-balance renormalization, the z-loss log-partition, an
    entropy term, and the final batch-level reductions. The batch-level
    part (selection histogram and loss reductions) is shared across
    sequences, so this line deliberately does not scale linearly in B.
    The reference per-layer total it stands in for is an opaque constant;
    use aux_override in flops_model for exact regression against it.
    """
    c, c_r, k = cfg.chapters, cfg.routed_chapters, cfg.top_k
    per_sequence = (
        2 * c_r  # renormalize probs over routed chapters (sum + divide)
        + 5 * c + 2  # z-loss: logsumexp over all chapters, square, accumulate
        + 3 * c + 1  # entropy: p*log(p) products and accumulation
    )
    per_batch = (
        batch * k + c_r  # selection histogram and its normalization
        + c_r * (batch + 1)  # mean renormalized probability per chapter
        + 2 * c_r + 1  # load-balance dot product and scaling
        + 2  # final loss averaging
    )
    return batch * per_sequence + per_batch


def flops_memory_layer_extra(
    cfg: ModelConfig, batch: int = 1, seq_len: int = 1024, aux_override: int | None = None
) -> MemoryExtraFlops:
    """Extra cost a memory layer adds on top of a standard layer."""
    _check(batch, seq_len)
    if not cfg.has_memory:
        raise ConfigError("config has no memory layers")
    d, c = cfg.d_model, cfg.chapters
    n_sel = cfg.selected_tokens
    d_mem_kv = cfg.mem_kv_heads * (d // cfg.mem_heads)
    router = RouterFlops(
        pool=batch * (d * (seq_len - 1) + d),
        linear=2 * batch * d * c,
        softmax=batch * c * SOFTMAX_COST,
        topk=batch * c * math.ceil(math.log2(cfg.top_k)) if cfg.top_k > 1 else 0,
    )
    preprocess = MemPreprocessFlops(
        weighting=batch * n_sel * d,
        rmsnorm=batch * n_sel * (4 * d + 4),
    )
    mem_attn = AttentionFlops(
        q=2 * batch * seq_len * d * d,
        k=2 * batch * n_sel * d * d_mem_kv,
        v=2 * batch * n_sel * d * d_mem_kv,
        o=2 * batch * seq_len * d * d,
        matmuls=4 * batch * seq_len * n_sel * d,
        softmax=batch * cfg.mem_heads * seq_len * n_sel * (SOFTMAX_COST + MASK_SCALE_COST),
    )
    return MemoryExtraFlops(
        router=router,
        router_aux=aux_override if aux_override is not None else router_aux_flops(cfg, batch),
        mem_preprocess=preprocess,
        mem_attention=mem_attn,
        extra_norm=batch * seq_len * (4 * d + 4),
        extra_residual=batch * seq_len * d,
    )


def flops_head_and_loss(cfg: ModelConfig, batch: int = 1, seq_len: int = 1024) -> HeadFlops:
    """Final RMSNorm, LM head projection, next-token cross-entropy."""
    _check(batch, seq_len)
    d, v = cfg.d_model, cfg.vocab
    return HeadFlops(
        norm=batch * seq_len * (4 * d + 4),
        lm_head=2 * batch * seq_len * d * v,
        ce=batch * (seq_len - 1) * v * CE_COST,
    )


def flops_model(
    cfg: ModelConfig, batch: int = 1, seq_len: int = 1024, aux_override: int | None = None
) -> FlopsReport:
    """Full-model report: n_standard * layer + n_memory * (layer + extra)
    + head."""
    _check(batch, seq_len)
    n_mem = len(cfg.memory_layer_indices)
    return FlopsReport(
        batch=batch,
        seq_len=seq_len,
        n_standard_layers=cfg.n_layers - n_mem,
        n_memory_layers=n_mem,
        standard_layer=flops_standard_layer(cfg, batch, seq_len),
        memory_extra=flops_memory_layer_extra(cfg, batch, seq_len, aux_override) if n_mem else None,
        head=flops_head_and_loss(cfg, batch, seq_len),
    )


@dataclass(frozen=True)
class IsoDepthResult:
    """Smallest dense depth whose forward FLOPs reach the target."""

    layers: int
    flops: int
    lower_layers: int
    lower_flops: int
    target: int

    @property
    def gap_above(self) -> float:
        return (self.flops - self.target) / self.target if self.target else 0.0

    @property
    def gap_below(self) -> float:
        return (self.target - self.lower_flops) / self.target if self.target else 0.0


def iso_depth_search(target_flops: int, cfg: ModelConfig, batch: int = 1, seq_len: int = 1024) -> IsoDepthResult:
    """Smallest depth n with n*standard_layer + head >= target, plus the
    bracketing depth below."""
    _check(batch, seq_len)
    head = flops_head_and_loss(cfg, batch, seq_len).total
    layer = flops_standard_layer(cfg, batch, seq_len).total
    if target_flops < head:
        raise ConfigError(f"target {target_flops} below the head-only cost {head}; unreachable")
    n = max(0, -(-(target_flops - head) // layer))  # ceil division
    lower = max(0, n - 1)
    return IsoDepthResult(
        layers=n,
        flops=n * layer + head,
        lower_layers=lower,
        lower_flops=lower * layer + head,
        target=target_flops,
    )
