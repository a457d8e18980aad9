"""Command-line entry point: ``python -m adore <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import AdoreError, ConfigError
from ..kvcache import POLICY_KINDS, PolicyConfig
from ..model.config import ModelConfig
from . import bench, formats
from .corpus import decode, encode, write_synthetic_corpus
from .pipeline import (DeskRecipe, controller_dataset, fit_controller, heldout_loss,
                       trace_sequences, train_language_model, gather_traces)

SUBCOMMANDS = ("make-corpus", "train-lm", "collect-traces", "train-controller", "generate",
               "bench", "eval-ppl", "analyze", "ablation")


@dataclass
class RunConfig:
    subcommand: str
    seed: int
    out_dir: str
    corpus: str | None = None
    model: dict = field(default_factory=dict)
    policy: dict | None = None
    k: int = 16
    m: int = 32
    r: int = 4
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.m < self.k:
            raise ConfigError("cache size m must be >= K")
        if self.r > self.m:
            raise ConfigError("rebuild count R must be <= m")


def default_seed() -> int:
    raw = os.environ.get("ADORE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"ADORE_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adore", description="Desk-scale KV-cache scheduling toolkit")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    def common(sp, corpus=False):
        sp.add_argument("--seed", type=int, default=None, help="default: $ADORE_SEED or 0")
        sp.add_argument("--out-dir", default="runs", help="directory for outputs")
        sp.add_argument("--k", type=int, default=16, help="top-K attention size")
        sp.add_argument("--m", type=int, default=None, help="cache size (default 2K)")
        sp.add_argument("--R", dest="r", type=int, default=4, help="rebuilt tokens per step")
        if corpus:
            sp.add_argument("--corpus", required=True, help="UTF-8 or raw byte file")
            sp.add_argument("--heldout-fraction", type=float, default=1 / 6)

    def model_args(sp):
        sp.add_argument("--checkpoint", required=True, help="ADCK language-model checkpoint")
        sp.add_argument("--controller", default=None, help="ADCK controller checkpoint")

    sp = sub.add_parser("make-corpus", help="write the synthetic desk corpus")
    common(sp)
    sp.add_argument("--bytes", type=int, default=120_000)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-lm", help="pretrain and top-K fine-tune the byte-level decoder")
    common(sp, corpus=True)
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--topk-epochs", type=int, default=3)
    sp.add_argument("--lr", type=float, default=4e-3)
    for f in ModelConfig.FIELDS:
        sp.add_argument(f"--{f.replace('_', '-')}", dest=f, type=int, default=None)

    sp = sub.add_parser("collect-traces", help="record per-layer top sets under full attention")
    common(sp, corpus=True)
    model_args(sp)
    sp.add_argument("--seq-len", type=int, default=256)
    sp.add_argument("--max-seqs", type=int, default=None)

    sp = sub.add_parser("train-controller", help="fit the eviction scorer on collected traces")
    common(sp)
    model_args(sp)
    sp.add_argument("--traces", required=True)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--hidden", type=int, default=32)
    sp.add_argument("--variant", choices=("uni", "bi", "mlp"), default="uni")
    sp.add_argument("--labels", choices=("count", "rate", "final"), default="count")

    sp = sub.add_parser("generate", help="greedy generation under one cache policy")
    common(sp)
    model_args(sp)
    sp.add_argument("--policy", choices=POLICY_KINDS, default="adore")
    sp.add_argument("--prompt", default="Later ")
    sp.add_argument("--max-new", type=int, default=64)

    sp = sub.add_parser("bench", help="tokens/sec per policy and generated length")
    common(sp)
    model_args(sp)
    sp.add_argument("--policies", default="full,window,strided,sink,h2o,h2o_rebuilt,adore")
    sp.add_argument("--lengths", default="128,256,512")
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--prompt", default="Later ")

    for name, helptext in (("eval-ppl", "per-bucket perplexity per policy"),
                           ("ablation", "adore perplexity over m in {K,2K,3K} x R in {0,4,8}")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, corpus=True)
        model_args(sp)
        sp.add_argument("--seq-len", type=int, default=512)
        sp.add_argument("--n-seqs", type=int, default=4)
        if name == "eval-ppl":
            sp.add_argument("--policies", default="full,window,strided,sink,h2o,h2o_rebuilt,adore")
            sp.add_argument("--bucket", type=int, default=128)

    sp = sub.add_parser("analyze", help="uniform-set overlap and softmax-mass report")
    common(sp, corpus=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seq-len", type=int, default=256)
    sp.add_argument("--n-seqs", type=int, default=4)
    return p


def _split(tokens: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * (1 - fraction))
    return tokens[:cut], tokens[cut:]


def _policies(names: str, k: int, m: int, r: int) -> dict[str, PolicyConfig]:
    out = {}
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        if name not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {name!r}")
        out[name] = PolicyConfig.make(name, k=k, capacity=m, rebuild=r if name in ("adore", "h2o_rebuilt") else 0)
    return out


def _load_models(args, need_controller: bool):
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint {args.checkpoint} not found")
    lm = formats.load_model(args.checkpoint)
    ctrl = None
    if args.controller:
        if not Path(args.controller).exists():
            raise ConfigError(f"controller checkpoint {args.controller} not found")
        ctrl = formats.load_controller(args.controller)
    elif need_controller:
        raise ConfigError("the adore policy needs --controller")
    return lm, ctrl


def _emit(out: Path, stem: str, csv_text: str | None, table: str) -> None:
    if csv_text is not None:
        bench.write_text(out / f"{stem}.csv", csv_text)
    bench.write_text(out / f"{stem}.txt", table)
    print(table, end="")


def run(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    m = args.m if args.m is not None else 2 * args.k
    extra = {k: v for k, v in vars(args).items()
             if k not in ("subcommand", "seed", "out_dir", "corpus", "k", "m", "r")}
    cfg = RunConfig(args.subcommand, seed, args.out_dir, getattr(args, "corpus", None),
                    k=args.k, m=m, r=args.r, extra=extra)
    print(f"seed: {seed}")
    print("config: " + json.dumps(asdict(cfg), sort_keys=True, default=str))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.subcommand

    if cmd == "make-corpus":
        path = write_synthetic_corpus(args.out, args.bytes, seed)
        print(f"wrote {path} ({args.bytes} bytes)")
        return 0

    if cmd in ("train-lm", "collect-traces", "eval-ppl", "analyze", "ablation"):
        data = Path(args.corpus).read_bytes()
        train_toks, held_toks = _split(encode(data), args.heldout_fraction)

    if cmd == "train-lm":
        overrides = {f: getattr(args, f) for f in ModelConfig.FIELDS if getattr(args, f) is not None}
        recipe = DeskRecipe(model=ModelConfig(**overrides), k=args.k, lm_epochs=args.epochs,
                            lm_lr=args.lr, topk_epochs=args.topk_epochs)
        print("recipe: " + json.dumps(recipe.as_dict(), sort_keys=True))
        lm = train_language_model(train_toks, recipe, seed)
        formats.save_model(out / "lm.adck", lm)
        loss = heldout_loss(lm, held_toks) if len(held_toks) > 1 else float("nan")
        print(f"held-out loss: {loss:.4f} nats/byte")
        print(f"wrote {out / 'lm.adck'}")
        return 0

    if cmd == "collect-traces":
        lm, _ = _load_models(args, False)
        recipe = DeskRecipe(model=lm.config, k=args.k, trace_len=args.seq_len,
                            max_trace_seqs=args.max_seqs)
        traces = gather_traces(lm, trace_sequences(train_toks, recipe), args.k)
        formats.write_traces(out / "traces.adtr", [r for seq in traces for r in seq])
        print(f"wrote {len(traces)} sequences to {out / 'traces.adtr'}")
        return 0

    if cmd == "train-controller":
        lm, _ = _load_models(args, False)
        traces = formats.split_sequences(formats.read_traces(args.traces))
        recipe = DeskRecipe(model=lm.config, k=args.k, controller_hidden=args.hidden,
                            controller_epochs=args.epochs, controller_variant=args.variant,
                            label_mode=args.labels)
        result = fit_controller(lm, controller_dataset(lm, traces, args.k, args.labels), recipe, seed)
        formats.save_controller(out / "controller.adck", result.params, lm.config)
        b = result.best
        table = (f"best epoch {result.best_epoch}: val accuracy {b.accuracy:.4f}  F1 {b.f1:.4f}  "
                 f"top-K F1 {b.topk_f1:.4f}\n")
        _emit(out, "controller_metrics", "epoch,accuracy,f1,topk_f1,loss\n" + "".join(
            f"{i},{h.accuracy:.4f},{h.f1:.4f},{h.topk_f1:.4f},{h.loss:.4f}\n"
            for i, h in enumerate(result.history)), table)
        return 0

    if cmd == "generate":
        policy = _policies(args.policy, args.k, m, args.r)[args.policy]
        lm, ctrl = _load_models(args, policy.kind == "adore")
        from ..engine import generate
        g = generate(lm, encode(args.prompt), args.max_new, policy, ctrl, seed)
        text = decode(g.tokens)
        (out / f"generate_{args.policy}.txt").write_bytes(text)
        sys.stdout.write(text.decode("utf-8", errors="replace") + "\n")
        return 0

    if cmd == "bench":
        policies = _policies(args.policies, args.k, m, args.r)
        lm, ctrl = _load_models(args, "adore" in policies)
        lengths = [int(x) for x in args.lengths.split(",")]
        report = bench.bench_throughput(lm, policies, encode(args.prompt), lengths, args.trials, ctrl)
        _emit(out, "bench", report.csv_text(), report.table_text())
        bench.write_text(out / "throughput.gp", bench.GNUPLOT_SCRIPT)
        return 0

    if cmd == "eval-ppl":
        policies = _policies(args.policies, args.k, m, args.r)
        lm, ctrl = _load_models(args, "adore" in policies)
        seqs = bench.sample_sequences(held_toks, args.seq_len, args.n_seqs, seed)
        ppl = bench.eval_perplexity(lm, seqs, policies, ctrl, args.bucket)
        _emit(out, "ppl", bench.ppl_csv_text(ppl), bench.ppl_table_text(ppl))
        return 0

    if cmd == "ablation":
        lm, ctrl = _load_models(args, True)
        seqs = bench.sample_sequences(held_toks, args.seq_len, args.n_seqs, seed)
        rows = bench.run_ablation(lm, ctrl, seqs, args.k)
        csv_text = bench.ablation_csv_text(rows)
        _emit(out, "ablation", csv_text, csv_text.replace(",", "\t"))
        return 0

    if cmd == "analyze":
        lm = formats.load_model(args.checkpoint)
        seqs = bench.sample_sequences(held_toks, args.seq_len, args.n_seqs, seed)
        report = bench.analyze_uniform_policy(lm, seqs, args.k, seed)
        csv_text = "layer,overlap,uniform_mass,random_mass\n" + "".join(
            f"{i},{r.overlap:.4f},{r.uniform_mass:.4f},{r.random_mass:.4f}\n" for i, r in enumerate(report))
        _emit(out, "analysis", csv_text, bench.analysis_text(report))
        curve = "layer,rank,weight\n" + "".join(
            f"{i},{j},{w:.6f}\n" for i, r in enumerate(report) for j, w in enumerate(r.curve))
        bench.write_text(out / "attention_curve.csv", curve)
        return 0
    raise ConfigError(f"unknown subcommand {cmd!r}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (AdoreError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
