"""Training loop: determinism, resume, bank freezing, LR bookkeeping,
abort paths, and the metrics/corpus plumbing."""

from dataclasses import replace

import numpy as np
import pytest

from chapterbank.config import preset
from chapterbank.errors import CheckpointMismatch, ConfigError, TrainingAborted
from chapterbank.flops import flops_model
from chapterbank.model import build_model
from chapterbank.schedule import cosine, lr_at_step, wsd
from chapterbank.tensor import RngState
from chapterbank.train import (
    BANK_MODES,
    METRICS_HEADER,
    Corpus,
    TrainConfig,
    continue_train,
    make_synthetic_corpus,
    metrics_csv,
    resume_train,
    train,
)

CORPUS = make_synthetic_corpus(vocab=256, length=8192, seed=1)


def micro_model(seed=0):
    return build_model(preset("micro"), RngState(seed), precision="double")


def quick_cfg(**over):
    base = dict(steps=20, batch_size=4, seq_len=32, lr_base=1e-3, schedule=cosine(2), eval_every=10, seed=3)
    base.update(over)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = quick_cfg(bank_mode="low_lr", schedule=wsd(2, 10), betas=(0.8, 0.9))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"steps": 5, "momentum": 0.9})

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(steps=-1),
            dict(batch_size=0),
            dict(grad_accum=0),
            dict(seq_len=1),
            dict(bank_mode="off"),
            dict(bank_mode="custom"),  # needs lr_memory_bank
            dict(eval_every=0),
            dict(clip_norm=0.0),
            dict(steps=10, schedule=wsd(2, 10)),  # decay_start >= steps
        ],
    )
    def test_validation_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            quick_cfg(**kwargs).validate()

    def test_group_lrs_per_bank_mode(self):
        assert quick_cfg(bank_mode="frozen").group_lrs()["memory_bank"] == 0.0
        assert quick_cfg(bank_mode="low_lr").group_lrs()["memory_bank"] == 1e-4
        assert quick_cfg(bank_mode="equal_lr").group_lrs()["memory_bank"] == 1e-3
        assert quick_cfg(bank_mode="custom", lr_memory_bank=7e-5).group_lrs()["memory_bank"] == 7e-5
        assert set(BANK_MODES) == {"frozen", "low_lr", "equal_lr", "custom"}

    def test_memory_layer_lr_defaults_to_base(self):
        assert quick_cfg().group_lrs()["memory_layers"] == 1e-3
        assert quick_cfg(lr_memory_layers=5e-4).group_lrs()["memory_layers"] == 5e-4

    def test_frozen_groups_property(self):
        assert quick_cfg(bank_mode="frozen").frozen_groups == {"memory_bank"}
        assert quick_cfg().frozen_groups == frozenset()


class TestCorpus:
    def test_must_be_one_dimensional(self):
        with pytest.raises(ConfigError):
            Corpus(np.zeros((2, 2), dtype=np.int64), 256)

    def test_token_range_checked(self):
        with pytest.raises(ConfigError):
            Corpus(np.array([0, 300]), 256)

    def test_split_reserves_trailing_tenth(self):
        train_region, eval_region = Corpus(np.arange(100), 256).split()
        assert train_region.size == 90 and eval_region.size == 10
        assert eval_region[0] == 90  # held-out split is the tail

    def test_split_keeps_at_least_one_eval_token(self):
        _, eval_region = Corpus(np.arange(5), 256).split()
        assert eval_region.size == 1

    def test_synthetic_corpus_deterministic_and_periodic(self):
        a = make_synthetic_corpus(256, length=500, seed=9, period=97)
        b = make_synthetic_corpus(256, length=500, seed=9, period=97)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.tokens[:97], a.tokens[97:194])
        assert len(a) == 500

    def test_synthetic_corpus_period_validation(self):
        with pytest.raises(ConfigError):
            make_synthetic_corpus(256, length=10, seed=0, period=11)


class TestDeterminism:
    def test_same_seed_bit_identical_metrics_and_weights(self):
        cfg = quick_cfg(steps=15)
        r1 = train(micro_model(0), CORPUS, cfg)
        r2 = train(micro_model(0), CORPUS, cfg)
        assert metrics_csv(r1.metrics) == metrics_csv(r2.metrics)
        for name, arr in r1.checkpoint.tensors.items():
            assert arr.tobytes() == r2.checkpoint.tensors[name].tobytes()

    def test_different_seed_diverges(self):
        r1 = train(micro_model(0), CORPUS, quick_cfg(steps=8, seed=3))
        r2 = train(micro_model(0), CORPUS, quick_cfg(steps=8, seed=4))
        assert metrics_csv(r1.metrics) != metrics_csv(r2.metrics)

    def test_loss_decreases(self):
        result = train(micro_model(0), CORPUS, quick_cfg(steps=40, eval_every=5))
        evals = result.eval_rows()
        assert evals[-1].total_loss < evals[0].total_loss

    def test_metrics_header_and_eval_cadence(self):
        result = train(micro_model(0), CORPUS, quick_cfg(steps=25, eval_every=10))
        csv = metrics_csv(result.metrics)
        assert csv.splitlines()[0] == METRICS_HEADER
        assert METRICS_HEADER == "step,split,lm_loss,lb_loss,z_loss,total_loss,lr_base,lr_mem,lr_bank,grad_norm"
        assert [r.step for r in result.eval_rows()] == [10, 20, 25]
        assert len([r for r in result.metrics if r.split == "train"]) == 25
        assert result.checkpoint.step == 25

    def test_zero_step_run(self):
        result = train(micro_model(0), CORPUS, quick_cfg(steps=0))
        assert result.metrics == []
        assert result.checkpoint.step == 0


class TestResume:
    def test_resume_is_bit_identical_to_uninterrupted_run(self):
        cfg = quick_cfg(steps=24, eval_every=6)
        full = train(micro_model(1), CORPUS, cfg)

        # an interrupted run keeps the full run's schedule horizon
        half_cfg = replace(cfg, steps=12, schedule=cfg.schedule.with_total_steps(24))
        half = train(micro_model(1), CORPUS, half_cfg)
        rest = resume_train(half.checkpoint, CORPUS, cfg)

        for name, arr in full.checkpoint.tensors.items():
            assert arr.tobytes() == rest.checkpoint.tensors[name].tobytes(), name
        for name, (m, v) in full.checkpoint.moments.items():
            m2, v2 = rest.checkpoint.moments[name]
            assert m.tobytes() == m2.tobytes() and v.tobytes() == v2.tobytes()
        tail = [r.to_csv_line() for r in full.metrics if r.step > 12]
        assert [r.to_csv_line() for r in rest.metrics] == tail

    def test_resume_requires_same_seed(self):
        half = train(micro_model(1), CORPUS, quick_cfg(steps=4))
        with pytest.raises(ConfigError):
            resume_train(half.checkpoint, CORPUS, quick_cfg(steps=8, seed=99))

    def test_resume_rejects_checkpoint_beyond_steps(self):
        done = train(micro_model(1), CORPUS, quick_cfg(steps=6))
        with pytest.raises(ConfigError):
            resume_train(done.checkpoint, CORPUS, quick_cfg(steps=4))


class TestBankFreezing:
    def test_frozen_bank_is_bit_identical_and_stateless(self):
        model = micro_model(2)
        before = model["bank.tokens"].value.data.tobytes()
        result = train(model, CORPUS, quick_cfg(steps=10, bank_mode="frozen"))
        assert model["bank.tokens"].value.data.tobytes() == before
        assert "bank.tokens" not in result.optimizer.state

    def test_optimizer_state_shrinks_by_two_elements_per_bank_element(self):
        cfg_model = preset("micro")
        frozen = train(micro_model(2), CORPUS, quick_cfg(steps=3, bank_mode="frozen"))
        equal = train(micro_model(2), CORPUS, quick_cfg(steps=3, bank_mode="equal_lr"))
        diff = equal.optimizer.state_element_count() - frozen.optimizer.state_element_count()
        assert diff == 2 * cfg_model.bank_tokens * cfg_model.d_model

    def test_unfrozen_bank_moves(self):
        model = micro_model(2)
        before = model["bank.tokens"].value.data.copy()
        train(model, CORPUS, quick_cfg(steps=10, bank_mode="equal_lr"))
        assert np.abs(model["bank.tokens"].value.data - before).max() > 0


class TestGroupLrAudit:
    def test_every_update_uses_scheduled_group_lr(self):
        cfg = quick_cfg(steps=7, bank_mode="low_lr", lr_memory_layers=4e-4, schedule=cosine(3))
        result = train(micro_model(3), CORPUS, cfg)
        sched = cfg.schedule.with_total_steps(cfg.steps)
        base_lrs = cfg.group_lrs()
        audit = result.optimizer.audit
        n_params = len(result.optimizer.trainable())
        assert len(audit) == cfg.steps * n_params
        for i, (name, group, lr) in enumerate(audit):
            step = i // n_params
            want = lr_at_step(sched, step, base_lrs[group])
            assert lr == want, (name, step)

    def test_metrics_rows_echo_group_lrs(self):
        cfg = quick_cfg(steps=4, bank_mode="frozen", schedule=cosine(2))
        result = train(micro_model(3), CORPUS, cfg)
        sched = cfg.schedule.with_total_steps(4)
        for row in result.metrics:
            if row.split == "train":
                assert row.lr_base == lr_at_step(sched, row.step - 1, cfg.lr_base)
                assert row.lr_bank == 0.0


class TestAbortAndValidation:
    def test_nan_loss_aborts_with_last_checkpoint(self):
        model = micro_model(4)
        model["embedding.weight"].value.data[0, 0] = np.nan
        with pytest.raises(TrainingAborted) as err, np.errstate(invalid="ignore"):
            train(model, CORPUS, quick_cfg(steps=5))
        assert err.value.step == 0
        assert err.value.last_checkpoint is not None
        assert err.value.last_checkpoint.step == 0

    def test_abort_checkpoint_tracks_last_eval(self):
        # poison the weights *after* a known number of clean steps by
        # training in two stages through the same model object
        model = micro_model(4)
        cfg = quick_cfg(steps=10, eval_every=5)
        train(model, CORPUS, replace(cfg, steps=5))
        model["embedding.weight"].value.data[0, 0] = np.inf
        with pytest.raises(TrainingAborted) as err, np.errstate(invalid="ignore"):
            train(model, CORPUS, cfg, start_step=5)
        assert err.value.step == 5
        assert err.value.last_checkpoint.step == 5

    def test_corpus_too_short(self):
        with pytest.raises(ConfigError, match="corpus length"):
            train(micro_model(0), Corpus(np.zeros(64, dtype=np.int64), 256), quick_cfg())

    def test_seq_len_beyond_model_max(self):
        with pytest.raises(ConfigError, match="max_seq_len"):
            train(micro_model(0), CORPUS, quick_cfg(seq_len=65))

    def test_corpus_vocab_beyond_model(self):
        with pytest.raises(ConfigError, match="vocab"):
            train(micro_model(0), make_synthetic_corpus(512, 4096, 0), quick_cfg())


class TestContinueTrain:
    def test_longer_context_second_phase(self):
        first = train(micro_model(5), CORPUS, quick_cfg(steps=6))
        cfg2 = quick_cfg(steps=6, seq_len=128, batch_size=2, seed=11)
        second = continue_train(first.checkpoint, CORPUS, cfg2)
        assert second.model.config.max_seq_len == 128
        assert second.checkpoint.step == 6
        # fresh optimizer: moments restart from zero, not the phase-1 state
        assert second.optimizer.state["embedding.weight"]["m"].shape == (256, 64)

    def test_doubling_seq_len_scales_attention_superlinearly_memory_linearly(self):
        cfg = preset("micro")
        short = flops_model(cfg, 1, 64)
        long = flops_model(cfg, 1, 128)
        assert long.standard_layer.self_attention.matmuls == 4 * short.standard_layer.self_attention.matmuls
        assert long.memory_extra.mem_attention.matmuls == 2 * short.memory_extra.mem_attention.matmuls
        ratio = long.memory_extra.total / short.memory_extra.total
        assert ratio < 2.2  # memory-layer extra stays ~linear in L

    def test_expected_config_mismatch_is_structured(self):
        first = train(micro_model(5), CORPUS, quick_cfg(steps=4))
        wrong = replace(preset("micro"), chapters=16, bank_tokens=128)
        with pytest.raises(CheckpointMismatch) as err:
            continue_train(first.checkpoint, CORPUS, quick_cfg(steps=4), expected_config=wrong)
        assert set(err.value.diff) == {"chapters", "bank_tokens"}

    def test_matching_expected_config_passes(self):
        first = train(micro_model(5), CORPUS, quick_cfg(steps=4))
        result = continue_train(first.checkpoint, CORPUS, quick_cfg(steps=4), expected_config=preset("micro"))
        assert result.checkpoint.step == 4
