"""Command-line driver: flops, train, continue, retention, route-stats.

Thin wrapper over the library; every artifact a command writes is byte
reproducible from the corresponding library calls. Each run directory
receives the fully expanded effective config as `config.resolved`.
Exit codes: 0 success, 1 numeric abort during training, 2 usage or
config errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESET_NAMES, ModelConfig
from .errors import CheckpointMismatch, ConfigError, NumericError, TrainingAborted
from .flops import flops_model
from .model import Model, build_model
from .retention import run_multi_seed, run_retention_protocol
from .runconfig import DataConfig, RunConfig, load_runconfig, parse_runconfig
from .tensor import RngState
from .train import (
    Corpus,
    TrainConfig,
    TrainResult,
    continue_train,
    make_synthetic_corpus,
    metrics_csv,
    train,
)


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        rc = load_runconfig(path)
    elif getattr(args, "preset", None):
        rc = parse_runconfig({"preset": args.preset})
    else:
        raise ConfigError("need --config PATH or --preset NAME")
    return _apply_overrides(rc, args)


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    tr = rc.train
    for flag, field_name in [
        ("steps", "steps"),
        ("seed", "seed"),
        ("batch_size", "batch_size"),
        ("seq_len", "seq_len"),
        ("bank_mode", "bank_mode"),
        ("lr", "lr_base"),
    ]:
        val = getattr(args, flag, None)
        if val is not None:
            tr = replace(tr, **{field_name: val})
    tr.validate()
    return replace(rc, train=tr)


def _corpus_from(rc: RunConfig) -> Corpus:
    return make_synthetic_corpus(rc.model.vocab, rc.data.length, rc.data.seed, rc.data.period)


def _write_run_artifacts(out_dir: Path, rc: RunConfig, result: TrainResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(rc.to_json(), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(metrics_csv(result.metrics), encoding="utf-8")
    save_checkpoint(result.checkpoint, out_dir / "final.ckpt")


def cmd_flops(args) -> int:
    if args.config:
        model_cfg = load_runconfig(args.config).model
    elif args.preset:
        model_cfg = parse_runconfig({"preset": args.preset}).model
    else:
        raise ConfigError("need --config PATH or --preset NAME")
    report = flops_model(model_cfg, args.batch, args.seqlen, args.aux_override)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    out_dir = Path(args.out_dir)
    model = build_model(rc.model, RngState(rc.train.seed))
    corpus = _corpus_from(rc)
    try:
        result = train(model, corpus, rc.train)
    except TrainingAborted as e:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved").write_text(rc.to_json(), encoding="utf-8")
        if e.last_checkpoint is not None:
            save_checkpoint(e.last_checkpoint, out_dir / "last.ckpt")
        print(f"training aborted at step {e.step}: {e}", file=sys.stderr)
        return 1
    _write_run_artifacts(out_dir, rc, result)
    final_eval = result.eval_rows()[-1] if result.eval_rows() else None
    if final_eval is not None:
        print(f"trained {rc.train.steps} steps; final eval loss {final_eval.total_loss:.6f}")
    else:
        print(f"trained {rc.train.steps} steps")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_continue(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    if args.config or args.preset:
        rc = _load_run_config(args)
        expected: ModelConfig | None = rc.model
    else:
        rc = _apply_overrides(
            RunConfig(model=ckpt.config, train=TrainConfig(), data=DataConfig()), args
        )
        expected = None
    out_dir = Path(args.out_dir)
    corpus = _corpus_from(rc)
    try:
        result = continue_train(ckpt, corpus, rc.train, expected_config=expected)
    except TrainingAborted as e:
        out_dir.mkdir(parents=True, exist_ok=True)
        if e.last_checkpoint is not None:
            save_checkpoint(e.last_checkpoint, out_dir / "last.ckpt")
        print(f"training aborted at step {e.step}: {e}", file=sys.stderr)
        return 1
    _write_run_artifacts(out_dir, rc, result)
    print(f"continued {rc.train.steps} steps from step-{ckpt.step} checkpoint")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_retention(args) -> int:
    rc = _load_run_config(args) if (args.config or args.preset) else RunConfig(
        model=parse_runconfig({"preset": "micro"}).model
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(rc.to_json(), encoding="utf-8")
    ret = rc.retention
    if args.seeds > 1:
        seeds = [ret.seed + i for i in range(args.seeds)]
        reports, mean = run_multi_seed(ret, seeds, model_cfg=rc.model)
        for seed, rep in zip(seeds, reports):
            (out_dir / f"retention.seed{seed}.csv").write_text(rep.to_csv(), encoding="utf-8")
        (out_dir / "retention.mean.csv").write_text(mean.to_csv(), encoding="utf-8")
        summary = "".join(r.summary() for r in reports) + "mean over seeds:\n" + mean.summary()
        report_for_stdout = mean
    else:
        report = run_retention_protocol(ret, model_cfg=rc.model)
        (out_dir / "retention.csv").write_text(report.to_csv(), encoding="utf-8")
        summary = report.summary()
        report_for_stdout = report
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    print(report_for_stdout.summary())
    print(f"artifacts in {out_dir}")
    return 0


@dataclass
class LayerRouteStats:
    layer: int
    frequency: np.ndarray  # per chapter, routed selections / sequences
    entropy: float  # nats, over the normalized selection histogram
    mean_routed_mass: float  # mean over sequences of selected prob mass
    never_selected_frac: float  # routed chapters never selected


def collect_route_stats(model: Model, batches: list[np.ndarray], layers: list[int] | None = None) -> list[LayerRouteStats]:
    cfg = model.config
    if not cfg.has_memory:
        raise ConfigError("route stats need a model with memory layers")
    wanted = list(cfg.memory_layer_indices) if layers is None else list(layers)
    bad = [l for l in wanted if l not in cfg.memory_layer_indices]
    if bad:
        raise ConfigError(f"layers {bad} are not memory layers {list(cfg.memory_layer_indices)}")
    counts = {l: np.zeros(cfg.chapters, dtype=np.int64) for l in wanted}
    mass = {l: 0.0 for l in wanted}
    n_seqs = 0
    for batch in batches:
        trace = model.forward(batch)
        n_seqs += batch.shape[0]
        for layer_pos, layer_idx in enumerate(cfg.memory_layer_indices):
            if layer_idx not in counts:
                continue
            for decision in trace.decisions[layer_pos]:
                counts[layer_idx][decision.selected] += 1
                mass[layer_idx] += float(np.sum(decision.probs.data[decision.selected]))
    out = []
    for layer_idx in wanted:
        c = counts[layer_idx]
        freq = c / n_seqs
        total = c.sum()
        p = c[c > 0] / total
        entropy = float(-(p * np.log(p)).sum())
        routed = cfg.routed_chapters
        never = int(np.sum(c[cfg.shared_chapters :] == 0))
        out.append(
            LayerRouteStats(
                layer=layer_idx,
                frequency=freq,
                entropy=entropy,
                mean_routed_mass=mass[layer_idx] / n_seqs,
                never_selected_frac=never / routed,
            )
        )
    return out


def route_stats_csv(stats: list[LayerRouteStats]) -> str:
    lines = ["layer,chapter,frequency,entropy,mean_routed_mass,never_selected_frac"]
    for s in stats:
        for chapter, f in enumerate(s.frequency):
            lines.append(
                f"{s.layer},{chapter},{float(f)!r},{s.entropy!r},{s.mean_routed_mass!r},{s.never_selected_frac!r}"
            )
    return "\n".join(lines) + "\n"


def route_stats_text(stats: list[LayerRouteStats]) -> str:
    lines = []
    for s in stats:
        top = np.argsort(-s.frequency)[:5]
        tops = ", ".join(f"{c}:{s.frequency[c]:.2f}" for c in top)
        lines.append(
            f"layer {s.layer}: entropy {s.entropy:.3f} nats; routed mass {s.mean_routed_mass:.3f};"
            f" never-selected {s.never_selected_frac:.2%}; top chapters {tops}"
        )
    return "\n".join(lines)


def cmd_route_stats(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    from .checkpoint import model_from_checkpoint

    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    corpus = make_synthetic_corpus(model.config.vocab, args.batches * args.seqlen * 8 + 64, args.seed)
    gen = RngState(args.seed).substream("route-stats")
    batches = []
    for _ in range(args.batches):
        starts = gen.integers(0, len(corpus) - args.seqlen + 1, size=8)
        batches.append(np.stack([corpus.tokens[s : s + args.seqlen] for s in starts]))
    layers = [int(x) for x in args.layers.split(",")] if args.layers else None
    stats = collect_route_stats(model, batches, layers)
    print(route_stats_text(stats))
    if args.csv:
        Path(args.csv).write_text(route_stats_csv(stats), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chapterbank",
        description="Memory-augmented transformer lab: train, continue, FLOPs, routing, retention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="path to a JSON run config")
        p.add_argument("--preset", choices=sorted(PRESET_NAMES), help="named model preset")

    p = sub.add_parser("flops", help="print the integer FLOPs breakdown")
    add_config_args(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seqlen", type=int, default=1024)
    p.add_argument("--aux-override", type=int, default=None, dest="aux_override")
    p.add_argument("--csv", help="also write the breakdown as CSV")
    p.set_defaults(fn=cmd_flops)

    def add_train_overrides(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--seq-len", type=int, dest="seq_len")
        p.add_argument("--bank-mode", choices=["frozen", "low_lr", "equal_lr", "custom"], dest="bank_mode")
        p.add_argument("--lr", type=float)

    p = sub.add_parser("train", help="train from scratch on the synthetic corpus")
    add_config_args(p)
    add_train_overrides(p)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("continue", help="second-phase training from a checkpoint")
    add_config_args(p)
    add_train_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(fn=cmd_continue)

    p = sub.add_parser("retention", help="two-phase forgetting protocol")
    add_config_args(p)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--seeds", type=int, default=1, help="number of protocol seeds")
    p.set_defaults(fn=cmd_retention)

    p = sub.add_parser("route-stats", help="chapter utilization from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seqlen", type=int, default=32)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", help="comma-separated memory layer indices")
    p.add_argument("--csv", help="write utilization CSV")
    p.set_defaults(fn=cmd_route_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingAborted, NumericError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
