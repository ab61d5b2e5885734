"""Model-level checks: parameter-count fixtures, naive attention and
dense-bank oracles, router invariants, aux-loss closed forms.

Oracles here are written in plain numpy loops, independent of the
library's op layer.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from chapterbank.config import ModelConfig, preset
from chapterbank.errors import ConfigError, SequenceLengthError
from chapterbank.gradcheck import grad_check
from chapterbank.model import (
    Model,
    build_model,
    memory_layer_forward,
    model_forward,
    param_count,
    route,
    route_sequence,
    self_attention_block,
    mem_read,
    prepare_memory_tokens,
)
from chapterbank.tensor import RngState, Tape, Tensor

EPS = 1e-6


# ---------------------------------------------------------------------------
# independent numpy oracles


def rmsnorm_np(x, gain):
    ms = (x * x).mean(-1, keepdims=True)
    return x / np.sqrt(ms + EPS) * gain


def rope_np(x, theta):
    # x: (L, dh), rotate feature pairs (2i, 2i+1) by pos * theta^(-2i/dh)
    length, dh = x.shape
    out = x.copy()
    for pos in range(length):
        for i in range(dh // 2):
            ang = pos * theta ** (-2.0 * i / dh)
            c, s = math.cos(ang), math.sin(ang)
            xe, xo = x[pos, 2 * i], x[pos, 2 * i + 1]
            out[pos, 2 * i] = xe * c - xo * s
            out[pos, 2 * i + 1] = xe * s + xo * c
    return out


def softmax_np(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def naive_self_attention(h, model: Model, layer: int):
    cfg = model.config
    p = lambda n: model[f"layers.{layer}.{n}"].value.data
    b_sz, length, d = h.shape
    dh = cfg.head_dim
    groups = cfg.n_heads // cfg.n_kv_heads
    out = np.empty_like(h)
    for b in range(b_sz):
        x = rmsnorm_np(h[b], p("attn_norm.gain"))
        q, k, v = x @ p("attn.wq"), x @ p("attn.wk"), x @ p("attn.wv")
        heads = []
        for hh in range(cfg.n_heads):
            kv = hh // groups
            qh = rope_np(q[:, hh * dh : (hh + 1) * dh], cfg.rope_theta)
            kh = rope_np(k[:, kv * dh : (kv + 1) * dh], cfg.rope_theta)
            vh = v[:, kv * dh : (kv + 1) * dh]
            o = np.zeros((length, dh))
            for t in range(length):
                w = softmax_np(qh[t] @ kh[: t + 1].T / math.sqrt(dh))
                o[t] = w @ vh[: t + 1]
            heads.append(o)
        out[b] = h[b] + np.concatenate(heads, axis=-1) @ p("attn.wo")
    return out


def naive_route(h_seq, model: Model, layer: int):
    cfg = model.config
    w = model[f"layers.{layer}.router.weight"].value.data
    b = model[f"layers.{layer}.router.bias"].value.data
    pooled = h_seq.mean(axis=0)
    probs = softmax_np(pooled @ w + b)
    routed = probs[cfg.shared_chapters :]
    order = sorted(range(len(routed)), key=lambda i: (-routed[i], i))
    selected = [cfg.shared_chapters + i for i in order[: cfg.top_k]]
    p_sel = probs[selected]
    weights = np.concatenate(
        [np.ones(cfg.shared_chapters), cfg.routed_scaling * p_sel / p_sel.sum()]
    )
    return probs, selected, weights


def naive_memory_layer(h_seq, model: Model, layer: int, chapters=None, weights=None):
    """Dense weighted cross-attention over the given chapters (default:
    route first). Returns h_seq + readout."""
    cfg = model.config
    p = lambda n: model[f"layers.{layer}.{n}"].value.data
    if chapters is None:
        _, selected, weights = naive_route(h_seq, model, layer)
        chapters = list(range(cfg.shared_chapters)) + selected
    t_sz = cfg.chapter_size
    bank = model["bank.tokens"].value.data
    rows = np.concatenate([np.arange(c * t_sz, (c + 1) * t_sz) for c in chapters])
    sel = rmsnorm_np(bank[rows], p("mem.token_norm.gain"))
    sel = sel * np.repeat(weights, t_sz)[:, None]
    x = rmsnorm_np(h_seq, p("mem_norm.gain"))
    q, k, v = x @ p("mem.wq"), sel @ p("mem.wk"), sel @ p("mem.wv")
    dh = cfg.d_model // cfg.mem_heads
    groups = cfg.mem_heads // cfg.mem_kv_heads
    heads = []
    for hh in range(cfg.mem_heads):
        kv = hh // groups
        qh = q[:, hh * dh : (hh + 1) * dh]
        kh = k[:, kv * dh : (kv + 1) * dh]
        vh = v[:, kv * dh : (kv + 1) * dh]
        scores = qh @ kh.T / math.sqrt(dh)
        w = np.exp(scores - scores.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        heads.append(w @ vh)
    return h_seq + np.concatenate(heads, axis=-1) @ p("mem.wo")


def count_params_oracle(cfg: ModelConfig):
    d, dff, v = cfg.d_model, cfg.d_ff, cfg.vocab
    d_kv = cfg.n_kv_heads * cfg.head_dim
    base = v * d  # embedding
    base += cfg.n_layers * (2 * d + 2 * d * d + 2 * d * d_kv + 3 * d * dff)
    base += d  # final norm
    if not cfg.tied_embeddings:
        base += d * v
    mem = 0
    for _ in cfg.memory_layer_indices:
        d_mem_kv = cfg.mem_kv_heads * (d // cfg.mem_heads)
        mem += 2 * d  # mem_norm + token_norm gains
        mem += 2 * d * d + 2 * d * d_mem_kv  # wq, wo, wk, wv
        mem += d * cfg.chapters + cfg.chapters  # router weight + bias
        if cfg.adapter_enabled:
            mem += d * d
    bank = cfg.bank_tokens * d if cfg.memory_layer_indices else 0
    return {"base": base, "memory_layers": mem, "memory_bank": bank,
            "total": base + mem + bank}


def micro_double(seed=0, **overrides):
    cfg = preset("micro")
    if overrides:
        cfg = replace(cfg, **overrides)
    return build_model(cfg, RngState(seed), precision="double")


# ---------------------------------------------------------------------------
# parameter counting


class TestParamCounts:
    def test_reference_fixtures_exact(self):
        counts = param_count(preset("moc-paper"))
        assert counts["base"] == 147_874_560
        assert counts["memory_layers"] == 22_045_700
        assert counts["memory_bank"] == 201_375_744
        assert counts["total"] == 371_296_004
        assert param_count(preset("vanilla-iso"))["total"] == 202_937_088

    @pytest.mark.parametrize("name", ["moc-paper", "vanilla-backbone", "vanilla-iso", "micro"])
    def test_matches_independent_oracle(self, name):
        assert param_count(preset(name)) == count_params_oracle(preset(name))

    def test_built_model_matches_config_count(self):
        model = micro_double()
        built = {g: 0 for g in ("base", "memory_layers", "memory_bank")}
        for p in model.parameters():
            built[p.group] += p.size
        built["total"] = sum(built.values())
        assert built == param_count(preset("micro"))

    def test_micro_bank_shape(self):
        model = micro_double()
        assert model["bank.tokens"].shape == (17 * 8, 64)

    def test_adapter_adds_one_matrix_per_memory_layer(self):
        with_a = param_count(replace(preset("micro"), adapter_enabled=True))
        without = param_count(preset("micro"))
        n_mem = len(preset("micro").memory_layer_indices)
        assert with_a["memory_layers"] - without["memory_layers"] == n_mem * 64 * 64


class TestConfigValidation:
    def test_bank_tokens_must_equal_chapters_times_size(self):
        with pytest.raises(ConfigError):
            replace(preset("micro"), bank_tokens=100).validate()

    def test_memory_indices_in_range(self):
        with pytest.raises(ConfigError):
            replace(preset("micro"), memory_layer_indices=(9,)).validate()

    def test_topk_plus_shared_bounded(self):
        with pytest.raises(ConfigError):
            replace(preset("micro"), top_k=17).validate()

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            replace(preset("micro"), n_heads=3).validate()


# ---------------------------------------------------------------------------
# attention blocks


class TestSelfAttention:
    @pytest.mark.parametrize("seed", range(3))
    def test_naive_per_head_oracle(self, seed):
        model = micro_double(seed)
        h = np.random.default_rng(seed).standard_normal((2, 5, 64))
        got = self_attention_block(Tensor(h), model, 0).data
        np.testing.assert_allclose(got, naive_self_attention(h, model, 0), atol=1e-10)

    def test_length_one_attends_to_itself(self):
        model = micro_double()
        h = np.random.default_rng(0).standard_normal((1, 1, 64))
        got = self_attention_block(Tensor(h), model, 0).data
        np.testing.assert_allclose(got, naive_self_attention(h, model, 0), atol=1e-12)

    def test_zero_value_projection_is_identity(self):
        model = micro_double()
        model["layers.0.attn.wv"].value.data[...] = 0.0
        h = np.random.default_rng(1).standard_normal((2, 6, 64))
        got = self_attention_block(Tensor(h), model, 0).data
        np.testing.assert_array_equal(got, h)

    def test_causality(self):
        model = micro_double()
        gen = np.random.default_rng(2)
        h = gen.standard_normal((1, 8, 64))
        base = self_attention_block(Tensor(h), model, 0).data
        h2 = h.copy()
        h2[0, 5:] += gen.standard_normal((3, 64))
        pert = self_attention_block(Tensor(h2), model, 0).data
        np.testing.assert_array_equal(base[0, :5], pert[0, :5])
        assert np.abs(pert[0, 5:] - base[0, 5:]).max() > 1e-8

    def test_sequence_length_cap(self):
        model = micro_double()
        with pytest.raises(SequenceLengthError):
            self_attention_block(Tensor(np.zeros((1, 65, 64))), model, 0)


class TestMemRead:
    @pytest.mark.parametrize("seed", range(3))
    def test_naive_cross_attention_oracle(self, seed):
        # N_sel = 24 tokens = 3 chapters of 8: dense oracle on a fixed set
        model = micro_double(seed)
        gen = np.random.default_rng(seed + 10)
        h = gen.standard_normal((1, 6, 64))
        chapters = [0, 4, 9]
        weights = np.array([1.0, 1.7, 0.8])
        decision = _forced_decision(model, chapters, weights)
        m = prepare_memory_tokens(model, 1, decision)
        assert m.shape == (24, 64)
        got = h[0] + mem_read(Tensor(h), m, model, 1).data[0]
        want = naive_memory_layer(h[0], model, 1, chapters=chapters, weights=weights)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_single_token_selection_broadcasts_value(self):
        model = micro_double()
        gen = np.random.default_rng(3)
        h = gen.standard_normal((1, 5, 64))
        m = Tensor(gen.standard_normal((1, 64)))
        out = mem_read(Tensor(h), m, model, 1).data[0]
        want = (m.data @ model["layers.1.mem.wv"].value.data) @ model["layers.1.mem.wo"].value.data
        np.testing.assert_allclose(out, np.broadcast_to(want, out.shape), atol=1e-12)

    def test_zero_values_passthrough(self):
        model = micro_double()
        model["layers.1.mem.wv"].value.data[...] = 0.0
        h = np.random.default_rng(4).standard_normal((2, 6, 64))
        h2, _, _ = memory_layer_forward(Tensor(h), model, 1)
        np.testing.assert_array_equal(h2.data, h)

    def test_zero_bank_passthrough(self):
        model = micro_double()
        model["bank.tokens"].value.data[...] = 0.0
        h = np.random.default_rng(5).standard_normal((2, 6, 64))
        h2, _, _ = memory_layer_forward(Tensor(h), model, 1)
        np.testing.assert_allclose(h2.data, h, atol=1e-12)

    def test_empty_selection_rejected(self):
        model = micro_double()
        with pytest.raises(ConfigError):
            mem_read(Tensor(np.zeros((1, 2, 64))), Tensor(np.zeros((0, 64))), model, 1)


def _forced_decision(model, chapters, weights):
    from chapterbank.model import RouterDecision

    cfg = model.config
    return RouterDecision(
        pooled=Tensor(np.zeros(cfg.d_model)),
        logits=Tensor(np.zeros(cfg.chapters)),
        probs=Tensor(np.full(cfg.chapters, 1.0 / cfg.chapters)),
        selected=[c for c in chapters if c >= cfg.shared_chapters],
        selected_with_shared=list(chapters),
        chapter_weights=Tensor(np.asarray(weights, dtype=np.float64)),
    )


# ---------------------------------------------------------------------------
# routing


class TestRouting:
    def test_constant_rows_pool_to_that_vector(self):
        model = micro_double()
        vec = np.random.default_rng(0).standard_normal(64)
        h = np.tile(vec, (7, 1))
        d = route_sequence(Tensor(h), model["layers.1.router.weight"], model["layers.1.router.bias"], model.config)
        np.testing.assert_allclose(d.pooled.data, vec, atol=1e-12)

    def test_zero_router_uniform_and_tiebreak_prefix(self):
        model = micro_double()
        model["layers.1.router.weight"].value.data[...] = 0.0
        model["layers.1.router.bias"].value.data[...] = 0.0
        h = np.random.default_rng(1).standard_normal((6, 64))
        d = route_sequence(Tensor(h), model["layers.1.router.weight"], model["layers.1.router.bias"], model.config)
        np.testing.assert_allclose(d.probs.data, np.full(17, 1 / 17), atol=1e-12)
        assert d.selected == [1, 2, 3, 4]  # first k routed chapters

    @pytest.mark.parametrize("seed", range(100))
    def test_routed_weights_sum_to_scaling(self, seed):
        model = micro_double(seed % 5)
        cfg = model.config
        h = np.random.default_rng(seed).standard_normal((2, 6, 64))
        for d in route(Tensor(h), model["layers.1.router.weight"], model["layers.1.router.bias"], cfg):
            routed_sum = d.chapter_weights.data[cfg.shared_chapters :].sum()
            assert abs(routed_sum - cfg.routed_scaling) < 1e-6
            assert abs(d.probs.data.sum() - 1.0) < 1e-6
            assert len(d.selected) == cfg.top_k
            assert all(c >= cfg.shared_chapters for c in d.selected)

    def test_logit_shift_invariance(self):
        model = micro_double()
        cfg = model.config
        h = np.random.default_rng(2).standard_normal((5, 64))
        w, b = model["layers.1.router.weight"], model["layers.1.router.bias"]
        before = route_sequence(Tensor(h), w, b, cfg)
        b.value.data += 123.456
        after = route_sequence(Tensor(h), w, b, cfg)
        np.testing.assert_allclose(after.probs.data, before.probs.data, atol=1e-12)
        assert after.selected == before.selected

    def test_matches_naive_routing_oracle(self):
        model = micro_double(3)
        cfg = model.config
        h = np.random.default_rng(7).standard_normal((6, 64))
        d = route_sequence(Tensor(h), model["layers.1.router.weight"], model["layers.1.router.bias"], cfg)
        probs, selected, weights = naive_route(h, model, 1)
        np.testing.assert_allclose(d.probs.data, probs, atol=1e-12)
        assert d.selected == selected
        np.testing.assert_allclose(d.chapter_weights.data, weights, atol=1e-12)


# ---------------------------------------------------------------------------
# routed/dense equivalence, the central sparsity oracle


class TestRoutedDenseEquivalence:
    @pytest.mark.parametrize("seed", range(10))
    def test_full_selection_equals_dense_bank(self, seed):
        # k = C - shared: selection covers the whole bank
        model = micro_double(seed, top_k=16)
        h = np.random.default_rng(seed + 1000).standard_normal((2, 6, 64))
        got, decisions, _ = memory_layer_forward(Tensor(h), model, 1)
        for b in range(2):
            want = naive_memory_layer(h[b], model, 1)
            np.testing.assert_allclose(got.data[b], want, atol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_restricted_selection_equals_restricted_dense(self, seed):
        model = micro_double(seed)  # k=4 < C_r=16
        h = np.random.default_rng(seed + 2000).standard_normal((2, 6, 64))
        got, decisions, _ = memory_layer_forward(Tensor(h), model, 1)
        for b in range(2):
            want = naive_memory_layer(h[b], model, 1)  # oracle routes too
            np.testing.assert_allclose(got.data[b], want, atol=1e-10)

    def test_selection_permutation_invariance(self):
        model = micro_double(1)
        gen = np.random.default_rng(11)
        h = Tensor(gen.standard_normal((1, 5, 64)))
        chapters = [0, 3, 8, 12]
        weights = np.array([1.0, 0.9, 1.4, 0.2])
        perm = [0, 12, 3, 8]
        wperm = np.array([1.0, 0.2, 0.9, 1.4])
        a = mem_read(h, prepare_memory_tokens(model, 1, _forced_decision(model, chapters, weights)), model, 1)
        b = mem_read(h, prepare_memory_tokens(model, 1, _forced_decision(model, perm, wperm)), model, 1)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_batch_swap_independence(self):
        model = micro_double(2)
        gen = np.random.default_rng(12)
        h = gen.standard_normal((2, 6, 64))
        out, _, _ = memory_layer_forward(Tensor(h), model, 1)
        swapped, _, _ = memory_layer_forward(Tensor(h[::-1].copy()), model, 1)
        np.testing.assert_allclose(out.data, swapped.data[::-1], atol=1e-12)


# ---------------------------------------------------------------------------
# aux losses


class TestAuxLosses:
    def _zero_router_model(self, **overrides):
        model = micro_double(**overrides)
        for i in model.config.memory_layer_indices:
            model[f"layers.{i}.router.weight"].value.data[...] = 0.0
            model[f"layers.{i}.router.bias"].value.data[...] = 0.0
        return model

    def test_uniform_routing_gives_unit_lb(self):
        model = self._zero_router_model()
        tokens = np.random.default_rng(0).integers(0, 256, (3, 8))
        trace = model_forward(model, tokens, tokens)
        assert abs(trace.lb_loss - 1.0) < 1e-9

    def test_zero_logits_give_log_c_squared_z(self):
        model = self._zero_router_model()
        tokens = np.random.default_rng(1).integers(0, 256, (2, 8))
        trace = model_forward(model, tokens, tokens)
        assert abs(trace.z_loss - math.log(17) ** 2) < 1e-9

    def test_collapsed_router_gives_cr_lb(self):
        model = micro_double(top_k=1)
        for i in model.config.memory_layer_indices:
            model[f"layers.{i}.router.weight"].value.data[...] = 0.0
            model[f"layers.{i}.router.bias"].value.data[...] = 0.0
            model[f"layers.{i}.router.bias"].value.data[5] = 60.0
        tokens = np.random.default_rng(2).integers(0, 256, (2, 8))
        trace = model_forward(model, tokens, tokens)
        assert abs(trace.lb_loss - 16.0) < 1e-9

    def test_total_loss_composition(self):
        model = micro_double(4)
        cfg = model.config
        tokens = np.random.default_rng(3).integers(0, 256, (2, 8))
        trace = model_forward(model, tokens, tokens)
        want = trace.lm_loss + cfg.lb_coeff * trace.lb_loss + cfg.z_coeff * trace.z_loss
        assert abs(trace.total_loss - want) < 1e-12


# ---------------------------------------------------------------------------
# full forward


class TestModelForward:
    def test_untrained_lm_loss_near_log_vocab(self):
        model = micro_double(0)
        tokens = np.random.default_rng(0).integers(0, 256, (4, 32))
        trace = model_forward(model, tokens, tokens)
        assert abs(trace.lm_loss - math.log(256)) / math.log(256) < 0.05

    def test_memoryless_config_runs_dense(self):
        model = build_model(replace(preset("micro"), memory_layer_indices=()), RngState(0), "double")
        tokens = np.random.default_rng(1).integers(0, 256, (2, 8))
        trace = model_forward(model, tokens, tokens)
        assert trace.lb_loss == 0.0 and trace.z_loss == 0.0
        assert trace.decisions == []
        assert trace.total_loss == trace.lm_loss

    def test_token_out_of_range(self):
        model = micro_double()
        with pytest.raises(IndexError):
            model_forward(model, np.array([[0, 300]]))

    def test_sequence_length_error(self):
        model = micro_double()
        with pytest.raises(SequenceLengthError):
            model_forward(model, np.zeros((1, 65), dtype=np.int64))

    def test_all_params_receive_grads_except_unselected_chapters(self):
        model = micro_double(5)
        cfg = model.config
        tokens = np.random.default_rng(4).integers(0, 256, (1, 10))
        with Tape() as tape:
            trace = model_forward(model, tokens, tokens)
            tape.backward(trace.loss)
        selected = set()
        for layer in trace.decisions:
            for d in layer:
                selected.update(d.selected_with_shared)
        assert len(selected) < cfg.chapters  # some chapters unselected at B=1
        t_sz = cfg.chapter_size
        bank_grad = model["bank.tokens"].grad
        for c in range(cfg.chapters):
            block = bank_grad[c * t_sz : (c + 1) * t_sz]
            if c in selected:
                assert np.any(block != 0.0), f"selected chapter {c} got no gradient"
            else:
                assert np.all(block == 0.0), f"unselected chapter {c} got gradient"
        for name, p in model.params.items():
            if name == "bank.tokens":
                continue
            assert np.any(p.grad != 0.0), f"{name} received no gradient"

    def test_memory_attention_mass_recorded(self):
        model = micro_double(6)
        tokens = np.random.default_rng(5).integers(0, 256, (2, 8))
        trace = model_forward(model, tokens, tokens)
        assert len(trace.memory_attention_mass) == 2
        assert all(0.0 < m < 1.0 for m in trace.memory_attention_mass)

    def test_full_model_grad_check_sampled(self):
        model = micro_double(7)
        tokens = np.random.default_rng(6).integers(0, 256, (2, 8))

        def f():
            return model_forward(model, tokens, tokens).loss

        err = grad_check(f, model.parameters(), h=1e-5, max_entries_per_param=4)
        assert err < 1e-5
