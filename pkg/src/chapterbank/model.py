"""Decoder-only transformer with routed memory cross-attention.

Block order (pre-norm residual blocks): self-attention, then on memory
layers a cross-attention read over selected chapters of a shared latent
token bank, then the SwiGLU MLP. Routing is sequence-level: one pooled
router decision per sequence picks top-k routed chapters; shared chapters
are always on.

Selected memory tokens are RMS-normalized first and then scaled by their
chapter weight (shared weight 1, routed weights = routed_scaling times
the probability renormalized over the selection), so router probabilities
stay differentiable through the readout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import ModelConfig, preset
from .errors import ConfigError, SequenceLengthError
from .tensor import Parameter, RngState, Tensor

RMSNORM_EPS = 1e-6


@dataclass
class MemoryBank:
    """The learned latent-token matrix plus its chapter partition.

    One instance per model, shared by every memory layer. Chapter c owns
    rows [c*chapter_size, (c+1)*chapter_size); chapters below
    shared_chapters bypass the router.
    """

    tokens: Parameter
    chapters: int
    chapter_size: int
    shared_chapters: int

    def chapter_row_ids(self, chapter_indices: list[int]) -> np.ndarray:
        t = self.chapter_size
        return np.concatenate([np.arange(c * t, (c + 1) * t) for c in chapter_indices])


@dataclass
class RouterDecision:
    """One sequence's routing outcome at one memory layer."""

    pooled: Tensor  # (d,)
    logits: Tensor  # (C,)
    probs: Tensor  # (C,) softmax over all chapters, sums to 1
    selected: list[int]  # k routed chapter indices, router order
    selected_with_shared: list[int]  # shared chapters first, then selected
    chapter_weights: Tensor  # per selected_with_shared entry


@dataclass
class ForwardTrace:
    """Losses and routing stats from one forward pass."""

    lm_loss: float
    lb_loss: float
    z_loss: float
    total_loss: float
    decisions: list[list[RouterDecision]]  # per memory layer, per sequence
    memory_attention_mass: list[float]  # per memory layer
    loss: Tensor | None = None  # taped total, present when targets given


class Model:
    """Built model: config, named parameters, and the shared bank."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter], bank: MemoryBank | None, precision: str):
        self.config = cfg
        self.params = params
        self.bank = bank
        self.precision = precision

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, tokens: np.ndarray, targets: np.ndarray | None = None) -> ForwardTrace:
        return model_forward(self, tokens, targets)

    def forward_logits(self, tokens: np.ndarray) -> np.ndarray:
        """(B, L, vocab) logits without loss or tape (greedy decoding)."""
        h, _, _ = _run_stack(self, tokens)
        h = ops.rmsnorm(h, self["final_norm.gain"], RMSNORM_EPS)
        logits = ops.matmul(h, ops.swapaxes(self["embedding.weight"], 0, 1))
        return logits.data


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str, str]]:
    """(name, shape, group, init kind) for every parameter, in creation order."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab
    kv_dim = cfg.n_kv_heads * cfg.head_dim
    specs: list[tuple[str, tuple[int, ...], str, str]] = [("embedding.weight", (v, d), "base", "normal")]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        specs += [
            (f"{pre}.attn_norm.gain", (d,), "base", "ones"),
            (f"{pre}.attn.wq", (d, d), "base", "normal"),
            (f"{pre}.attn.wk", (d, kv_dim), "base", "normal"),
            (f"{pre}.attn.wv", (d, kv_dim), "base", "normal"),
            (f"{pre}.attn.wo", (d, d), "base", "normal"),
            (f"{pre}.mlp_norm.gain", (d,), "base", "ones"),
            (f"{pre}.mlp.w_up", (d, f), "base", "normal"),
            (f"{pre}.mlp.w_gate", (d, f), "base", "normal"),
            (f"{pre}.mlp.w_down", (f, d), "base", "normal"),
        ]
        if i in cfg.memory_layer_indices:
            mem_kv_dim = cfg.mem_kv_heads * (d // cfg.mem_heads)
            specs += [
                (f"{pre}.mem_norm.gain", (d,), "memory_layers", "ones"),
                (f"{pre}.mem.token_norm.gain", (d,), "memory_layers", "ones"),
                (f"{pre}.mem.wq", (d, d), "memory_layers", "normal"),
                (f"{pre}.mem.wk", (d, mem_kv_dim), "memory_layers", "normal"),
                (f"{pre}.mem.wv", (d, mem_kv_dim), "memory_layers", "normal"),
                (f"{pre}.mem.wo", (d, d), "memory_layers", "normal"),
                (f"{pre}.router.weight", (d, cfg.chapters), "memory_layers", "normal"),
                (f"{pre}.router.bias", (cfg.chapters,), "memory_layers", "zeros"),
            ]
            if cfg.adapter_enabled:
                specs.append((f"{pre}.mem.adapter", (d, d), "memory_layers", "zeros"))
    specs.append(("final_norm.gain", (d,), "base", "ones"))
    if not cfg.tied_embeddings:
        specs.append(("lm_head.weight", (d, v), "base", "normal"))
    if cfg.has_memory:
        specs.append(("bank.tokens", (cfg.bank_tokens, d), "memory_bank", "bank"))
    return specs


def build_model(cfg: ModelConfig, rng: RngState, precision: str = "single") -> Model:
    """Initialize all parameters: weights N(0, 0.02), gains 1, biases 0,
    bank N(0, bank_init_std); each drawn from a per-name substream so the
    result depends only on (seed, name)."""
    cfg.validate()
    params: dict[str, Parameter] = {}
    for name, shape, group, kind in _param_specs(cfg):
        if kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:
            std = cfg.bank_init_std if kind == "bank" else 0.02
            data = rng.substream("init", name).standard_normal(shape) * std
        params[name] = Parameter(Tensor(data, precision=precision), name, group)
    bank = None
    if cfg.has_memory:
        bank = MemoryBank(params["bank.tokens"], cfg.chapters, cfg.chapter_size, cfg.shared_chapters)
    return Model(cfg, params, bank, precision)


def build_preset(name: str, seed: int = 0, precision: str = "single") -> Model:
    return build_model(preset(name), RngState(seed), precision)


def param_count(model_or_cfg) -> dict[str, int]:
    """Exact per-group parameter counts {base, memory_layers, memory_bank,
    total}. Accepts a built Model or a ModelConfig (counted from shapes,
    nothing allocated)."""
    if isinstance(model_or_cfg, Model):
        counts = {"base": 0, "memory_layers": 0, "memory_bank": 0}
        for p in model_or_cfg.params.values():
            counts[p.group] += p.size
    else:
        cfg = model_or_cfg
        cfg.validate()
        counts = {"base": 0, "memory_layers": 0, "memory_bank": 0}
        for _, shape, group, _ in _param_specs(cfg):
            counts[group] += int(np.prod(shape))
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# blocks


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, dim = x.shape
    return ops.swapaxes(ops.reshape(x, (b, l, n_heads, dim // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return ops.reshape(ops.swapaxes(x, 1, 2), (b, l, h * dh))


def _causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = ops.MASK_VALUE
    return mask


def self_attention_block(h: Tensor, model: Model, layer: int) -> Tensor:
    """h + GQA(RMSNorm(h)) with RoPE on Q/K and strict causal masking."""
    cfg = model.config
    b, l, d = h.shape
    if l > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
    pre = f"layers.{layer}"
    x = ops.rmsnorm(h, model[f"{pre}.attn_norm.gain"], RMSNORM_EPS)
    q = _split_heads(ops.matmul(x, model[f"{pre}.attn.wq"]), cfg.n_heads)
    k = _split_heads(ops.matmul(x, model[f"{pre}.attn.wk"]), cfg.n_kv_heads)
    v = _split_heads(ops.matmul(x, model[f"{pre}.attn.wv"]), cfg.n_kv_heads)
    q, k = ops.rope_apply(q, k, cfg.rope_theta)
    groups = cfg.n_heads // cfg.n_kv_heads
    if groups > 1:
        k = ops.repeat_interleave_axis(k, groups, 1)
        v = ops.repeat_interleave_axis(v, groups, 1)
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(cfg.head_dim))
    probs = ops.softmax_lastdim(scores, additive_mask=_causal_mask(l))
    out = ops.matmul(_merge_heads(ops.matmul(probs, v)), model[f"{pre}.attn.wo"])
    return ops.add(h, out)


def _mlp_block(h: Tensor, model: Model, layer: int) -> Tensor:
    pre = f"layers.{layer}"
    x = ops.rmsnorm(h, model[f"{pre}.mlp_norm.gain"], RMSNORM_EPS)
    return ops.add(h, ops.swiglu(x, model[f"{pre}.mlp.w_up"], model[f"{pre}.mlp.w_gate"], model[f"{pre}.mlp.w_down"]))


# ---------------------------------------------------------------------------
# routing


def route_sequence(h_seq: Tensor, weight: Parameter, bias: Parameter, cfg: ModelConfig) -> RouterDecision:
    """Route one sequence: mean-pool positions, score all chapters,
    pick top-k of the routed ones.

    Chapter weights: shared chapters get 1; routed chapter c gets
    routed_scaling * p_c / sum of selected p, so routed weights always
    sum to routed_scaling.
    """
    c, shared, k = cfg.chapters, cfg.shared_chapters, cfg.top_k
    pooled = ops.mean_axis(h_seq, axis=0)  # (d,)
    logits = ops.reshape(ops.add(ops.matmul(ops.reshape(pooled, (1, -1)), weight), bias), (c,))
    probs = ops.softmax_lastdim(logits)
    routed = ops.index_slice(probs, slice(shared, c))
    selected = [shared + i for i in ops.topk(routed, k)]
    p_sel = ops.reshape(ops.gather_rows(ops.reshape(probs, (c, 1)), np.asarray(selected)), (k,))
    w_routed = ops.scale(ops.div(p_sel, ops.sum_axis(p_sel)), cfg.routed_scaling)
    if shared > 0:
        shared_w = Tensor(np.ones(shared, dtype=h_seq.data.dtype))
        weights = ops.concat([shared_w, w_routed], axis=0)
    else:
        weights = w_routed
    return RouterDecision(
        pooled=pooled,
        logits=logits,
        probs=probs,
        selected=selected,
        selected_with_shared=list(range(shared)) + selected,
        chapter_weights=weights,
    )


def route(h: Tensor, weight: Parameter, bias: Parameter, cfg: ModelConfig) -> list[RouterDecision]:
    """One RouterDecision per sequence in the batch."""
    return [route_sequence(ops.index_slice(h, b), weight, bias, cfg) for b in range(h.shape[0])]


def prepare_memory_tokens(model: Model, layer: int, decision: RouterDecision) -> Tensor:
    """Gather the selected chapters and produce normalized, weighted
    tokens for the K/V projections (norm first, then weight, so chapter
    weights survive and stay differentiable)."""
    bank = model.bank
    pre = f"layers.{layer}"
    rows = bank.chapter_row_ids(decision.selected_with_shared)
    sel = ops.gather_rows(model["bank.tokens"], rows)  # (N_sel, d)
    if model.config.adapter_enabled:
        adapter = model[f"{pre}.mem.adapter"]
        sel = ops.add(sel, ops.matmul(sel, adapter))
    sel = ops.rmsnorm(sel, model[f"{pre}.mem.token_norm.gain"], RMSNORM_EPS)
    t = bank.chapter_size
    per_row = ops.reshape(
        ops.repeat_interleave_axis(ops.reshape(decision.chapter_weights, (-1, 1)), t, 1),
        (len(decision.selected_with_shared) * t, 1),
    )
    return ops.mul(sel, per_row)


def mem_read(h: Tensor, m_tokens: Tensor, model: Model, layer: int) -> Tensor:
    """Cross-attention readout: hidden states query the memory tokens.

    ``m_tokens`` are the prepared (normalized, weighted) selected tokens.
    No causal mask and no positional encoding on memory; the residual add
    is the caller's.
    """
    if m_tokens.shape[0] < 1:
        raise ConfigError("memory read with an empty token selection")
    cfg = model.config
    pre = f"layers.{layer}"
    mem_head_dim = cfg.d_model // cfg.mem_heads
    x = ops.rmsnorm(h, model[f"{pre}.mem_norm.gain"], RMSNORM_EPS)
    q = _split_heads(ops.matmul(x, model[f"{pre}.mem.wq"]), cfg.mem_heads)  # (B,h,L,dh)
    n_sel = m_tokens.shape[0]
    kv = ops.reshape(m_tokens, (1, n_sel, -1))
    k = _split_heads(ops.matmul(kv, model[f"{pre}.mem.wk"]), cfg.mem_kv_heads)  # (1,hkv,N,dh)
    v = _split_heads(ops.matmul(kv, model[f"{pre}.mem.wv"]), cfg.mem_kv_heads)
    groups = cfg.mem_heads // cfg.mem_kv_heads
    if groups > 1:
        k = ops.repeat_interleave_axis(k, groups, 1)
        v = ops.repeat_interleave_axis(v, groups, 1)
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(mem_head_dim))
    probs = ops.softmax_lastdim(scores)
    return ops.matmul(_merge_heads(ops.matmul(probs, v)), model[f"{pre}.mem.wo"])


def memory_layer_forward(h: Tensor, model: Model, layer: int) -> tuple[Tensor, list[RouterDecision], float]:
    """Per sequence: route, gather+weight chapters, cross-attend, add
    residual. Returns (h', decisions, memory-attention mass)."""
    cfg = model.config
    pre = f"layers.{layer}"
    decisions = route(h, model[f"{pre}.router.weight"], model[f"{pre}.router.bias"], cfg)
    outs = []
    readout_sq = 0.0
    for b, decision in enumerate(decisions):
        h_b = ops.index_slice(h, (slice(b, b + 1),))  # (1,L,d)
        m_tokens = prepare_memory_tokens(model, layer, decision)
        readout = mem_read(h_b, m_tokens, model, layer)
        readout_sq += float((readout.data.astype(np.float64) ** 2).sum())
        outs.append(ops.add(h_b, readout))
    h_out = outs[0] if len(outs) == 1 else ops.concat(outs, axis=0)
    h_sq = float((h.data.astype(np.float64) ** 2).sum())
    denom = np.sqrt(readout_sq) + np.sqrt(h_sq)
    mass = float(np.sqrt(readout_sq) / denom) if denom > 0 else 0.0
    return h_out, decisions, mass


def aux_losses(decisions: list[list[RouterDecision]], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Router regularizers from the collected decisions.

    Load balance: C_r * sum_c f_c * P_c over routed chapters, averaged
    over layers, where f_c is the fraction of selection slots assigned to
    chapter c and P_c the mean probability renormalized over routed
    chapters. Uniform routing gives exactly 1; full collapse (k=1) gives
    C_r. z-loss: mean over sequences and layers of squared
    log-partition of the router logits.
    """
    if not decisions or not decisions[0]:
        raise ConfigError("aux_losses needs at least one routing decision")
    c, shared = cfg.chapters, cfg.shared_chapters
    c_r = c - shared
    lb_terms = []
    z_terms = []
    for layer_decisions in decisions:
        n_seq = len(layer_decisions)
        counts = np.zeros(c_r)
        qs = []
        for dec in layer_decisions:
            routed = ops.index_slice(dec.probs, slice(shared, c))
            qs.append(ops.reshape(ops.div(routed, ops.sum_axis(routed)), (1, c_r)))
            for s in dec.selected:
                counts[s - shared] += 1.0
            z_seq = ops.logsumexp_lastdim(ops.reshape(dec.logits, (1, c)))  # (1,)
            z_terms.append(ops.mul(z_seq, z_seq))
        mean_q = ops.mean_axis(qs[0] if n_seq == 1 else ops.concat(qs, axis=0), axis=0)  # (c_r,)
        f = Tensor(counts / (n_seq * cfg.top_k))
        lb_terms.append(ops.reshape(ops.scale(ops.sum_axis(ops.mul(mean_q, f)), float(c_r)), (1,)))
    lb = ops.mean_all(lb_terms[0] if len(lb_terms) == 1 else ops.concat(lb_terms, axis=0))
    z = ops.mean_all(z_terms[0] if len(z_terms) == 1 else ops.concat(z_terms, axis=0))
    return lb, z


# ---------------------------------------------------------------------------
# full forward


def _run_stack(model: Model, tokens: np.ndarray) -> tuple[Tensor, list[list[RouterDecision]], list[float]]:
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ConfigError(f"token batch must be 2-D (B, L), got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token id out of vocab range [0, {cfg.vocab})")
    if tokens.shape[1] > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    h = ops.gather_rows(model["embedding.weight"], tokens)
    decisions: list[list[RouterDecision]] = []
    masses: list[float] = []
    for i in range(cfg.n_layers):
        h = self_attention_block(h, model, i)
        if i in cfg.memory_layer_indices:
            h, layer_decisions, mass = memory_layer_forward(h, model, i)
            decisions.append(layer_decisions)
            masses.append(mass)
        h = _mlp_block(h, model, i)
    return h, decisions, masses


def model_forward(model: Model, tokens: np.ndarray, targets: np.ndarray | None = None) -> ForwardTrace:
    """Embed, run the stack, final norm, tied head, shifted cross-entropy.

    total = lm + lb_coeff * lb + z_coeff * z. Without targets the loss
    fields are 0 and ``loss`` is None (routing stats still collected).
    """
    cfg = model.config
    h, decisions, masses = _run_stack(model, tokens)
    h = ops.rmsnorm(h, model["final_norm.gain"], RMSNORM_EPS)
    head = model["embedding.weight"] if cfg.tied_embeddings else model["lm_head.weight"]
    head_t = ops.swapaxes(head, 0, 1) if cfg.tied_embeddings else head.value
    logits = ops.matmul(h, head_t)  # (B,L,V)

    if decisions:
        lb, z = aux_losses(decisions, cfg)
    else:
        lb = z = None

    loss_tensor = None
    lm_val = 0.0
    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != tokens.shape:
            raise ConfigError(f"targets shape {targets.shape} must match tokens shape {tokens.shape}")
        b, l = targets.shape
        if l < 2:
            raise ConfigError("next-token loss needs sequence length >= 2")
        v = cfg.vocab
        pred = ops.reshape(ops.index_slice(logits, (slice(None), slice(0, l - 1))), ((l - 1) * b, v))
        lm = ops.cross_entropy(pred, targets[:, 1:].reshape(-1))
        lm_val = lm.item()
        loss_tensor = lm
        if lb is not None:
            loss_tensor = ops.add(loss_tensor, ops.add(ops.scale(lb, cfg.lb_coeff), ops.scale(z, cfg.z_coeff)))

    lb_val = lb.item() if lb is not None else 0.0
    z_val = z.item() if z is not None else 0.0
    return ForwardTrace(
        lm_loss=lm_val,
        lb_loss=lb_val,
        z_loss=z_val,
        total_loss=lm_val + cfg.lb_coeff * lb_val + cfg.z_coeff * z_val,
        decisions=decisions,
        memory_attention_mass=masses,
        loss=loss_tensor,
    )
