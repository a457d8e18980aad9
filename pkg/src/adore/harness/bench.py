"""Throughput and perplexity benchmarks, the uniform-set analysis and the m x R ablation."""

from __future__ import annotations

import csv
import gc
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..controller import ControllerParams
from ..engine import feed_token, generate, new_session
from ..errors import ConfigError
from ..kvcache import PolicyConfig
from ..model.batched import forward_batch
from ..model.params import TransformerParams
from ..model.traces import half_k, head_max_attention, top_indices, uniform_set
from ..numkernel import make_rng

BENCH_HEADER = ("policy", "length_bucket", "trial", "tokens_per_sec")


def length_bucket(index: int, width: int) -> int:
    """Upper edge of the bucket ``((i-1)*width, i*width]`` holding 1-based ``index``."""
    return width * math.ceil(index / width)


@dataclass
class ThroughputRow:
    policy: str
    length_bucket: int
    trial: int
    tokens_per_sec: float
    decode_seconds: float
    controller_seconds: float


@dataclass
class BenchReport:
    rows: list[ThroughputRow] = field(default_factory=list)
    ppl: dict[str, dict[int, float]] = field(default_factory=dict)

    def throughput(self) -> dict[tuple[str, int], tuple[float, float]]:
        """(policy, bucket) -> (mean, stdev) tokens/sec over trials."""
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.policy, r.length_bucket), []).append(r.tokens_per_sec)
        return {k: (statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0)
                for k, v in groups.items()}

    def median_throughput(self) -> dict[tuple[str, int], float]:
        """(policy, bucket) -> median tokens/sec over trials; robust to host hiccups."""
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.policy, r.length_bucket), []).append(r.tokens_per_sec)
        return {k: statistics.median(v) for k, v in groups.items()}

    def controller_share(self, policy: str = "adore") -> float:
        rows = [r for r in self.rows if r.policy == policy]
        total = sum(r.decode_seconds for r in rows)
        return sum(r.controller_seconds for r in rows) / total if total else 0.0

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in self.rows:
            w.writerow([r.policy, r.length_bucket, r.trial, f"{r.tokens_per_sec:.3f}"])
        return buf.getvalue()

    def table_text(self) -> str:
        lines = [f"{'policy':<12}{'length':>8}{'tok/s':>12}{'stdev':>10}{'median':>10}"]
        med = self.median_throughput()
        for (pol, b), (mean, sd) in sorted(self.throughput().items()):
            lines.append(f"{pol:<12}{b:>8}{mean:>12.1f}{sd:>10.1f}{med[(pol, b)]:>10.1f}")
        for pol in sorted({r.policy for r in self.rows}):
            share = self.controller_share(pol)
            if share:
                lines.append(f"controller share of decode time ({pol}): {100 * share:.2f}%")
        return "\n".join(lines) + "\n"


def bench_throughput(params: TransformerParams, policies: Mapping[str, PolicyConfig],
                     prompt: Sequence[int], lengths: Sequence[int] = (128, 256, 512),
                     trials: int = 5, controller: ControllerParams | None = None,
                     warmup: bool = True) -> BenchReport:
    """Tokens/sec of greedy generation per policy and generated length (batch 1).

    Greedy decoding is deterministic, so the first ``L`` steps of the longest
    generation are exactly the ``L``-token generation.  Each trial therefore
    decodes ``max(lengths)`` tokens once and times every length as a prefix of
    that run, which keeps all lengths of a trial under the same host load.
    Timing covers the decode loop only; the controller's share is recorded
    separately.  The garbage collector is paused while timing, as ``timeit``
    does.
    """
    if trials < 1:
        raise ConfigError("need at least one trial")
    if any(p.kind == "adore" for p in policies.values()) and controller is None:
        raise ConfigError("adore benchmark needs a trained controller")
    lengths = sorted(int(n) for n in lengths)
    report = BenchReport()
    if warmup:
        for pol in policies.values():
            generate(params, prompt, 8, pol, controller)
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for trial in range(trials):
            for name, pol in policies.items():
                g = generate(params, prompt, lengths[-1], pol, controller, seed=trial)
                step = np.array([t.seconds for t in g.timings])
                ctrl = np.array([t.controller_seconds for t in g.timings])
                for n in lengths:
                    secs = float(step[:n].sum())
                    report.rows.append(ThroughputRow(name, n, trial, n / secs, secs,
                                                     float(ctrl[:n].sum())))
    finally:
        if gc_was_on:
            gc.enable()
    report.rows.sort(key=lambda r: (r.policy, r.length_bucket, r.trial))
    return report


# -------------------------------------------------------------- perplexity


def sequence_nll(params: TransformerParams, tokens: Sequence[int], policy: PolicyConfig,
                 controller: ControllerParams | None = None, audit: bool = False) -> np.ndarray:
    """Teacher-forced next-token negative log-likelihood (nats) at positions ``1..T-1``
    with the policy's cache deciding what each step can attend to."""
    session = new_session(params, policy, controller, audit)
    out = np.zeros(len(tokens) - 1)
    for i in range(len(tokens) - 1):
        lg = feed_token(session, int(tokens[i])).astype(np.float64)
        lg -= lg.max()
        out[i] = math.log(np.exp(lg).sum()) - lg[int(tokens[i + 1])]
    return out


def bucket_means(nll: np.ndarray, width: int) -> dict[int, float]:
    """Mean NLL per length bucket; row ``i`` of ``nll`` predicts 1-based token ``i + 1``."""
    nll = np.atleast_2d(nll)
    idx = np.arange(1, nll.shape[1] + 1)
    buckets = np.array([length_bucket(i, width) for i in idx])
    return {int(b): float(nll[:, buckets == b].mean()) for b in np.unique(buckets)}


def eval_perplexity(params: TransformerParams, sequences: Sequence[Sequence[int]],
                    policies: Mapping[str, PolicyConfig], controller: ControllerParams | None = None,
                    bucket: int = 128) -> dict[str, dict[int, float]]:
    """Per-policy perplexity per length bucket over the given held-out sequences."""
    out = {}
    for name, pol in policies.items():
        nll = np.stack([sequence_nll(params, s, pol, controller) for s in sequences])
        out[name] = {b: math.exp(v) for b, v in bucket_means(nll, bucket).items()}
    return out


def split_context_ppl(params: TransformerParams, sequences: Sequence[Sequence[int]],
                      policy: PolicyConfig, controller: ControllerParams | None = None
                      ) -> tuple[float, float]:
    """Perplexity on predicted positions within and beyond ``train_context``."""
    t = params.config.train_context
    nll = np.stack([sequence_nll(params, s, policy, controller) for s in sequences])
    within, beyond = nll[:, :t - 1], nll[:, t - 1:]
    return math.exp(within.mean()), math.exp(beyond.mean()) if beyond.size else float("nan")


def sample_sequences(tokens: np.ndarray, length: int, count: int, seed: int) -> list[np.ndarray]:
    """``count`` random windows of ``length`` tokens from a held-out stream."""
    if len(tokens) < length:
        raise ConfigError("held-out stream shorter than the requested sequence length")
    starts = make_rng(seed).integers(0, len(tokens) - length + 1, size=count)
    return [np.asarray(tokens[s:s + length]) for s in starts]


def ppl_table_text(ppl: Mapping[str, Mapping[int, float]]) -> str:
    buckets = sorted({b for v in ppl.values() for b in v})
    lines = [f"{'policy':<12}" + "".join(f"{'<=' + str(b):>10}" for b in buckets)]
    for name, row in ppl.items():
        lines.append(f"{name:<12}" + "".join(f"{row.get(b, float('nan')):>10.3f}" for b in buckets))
    return "\n".join(lines) + "\n"


def ppl_csv_text(ppl: Mapping[str, Mapping[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "length_bucket", "ppl"])
    for name, row in ppl.items():
        for b, v in sorted(row.items()):
            w.writerow([name, b, f"{v:.4f}"])
    return buf.getvalue()


# ------------------------------------------------------ uniform-set analysis


@dataclass
class LayerAnalysis:
    overlap: float          # |uniform & layer top set| / ceil(K/2)
    uniform_mass: float     # softmax mass on the uniform set
    random_mass: float      # softmax mass on a random set of the same size
    curve: np.ndarray       # mean attention weights sorted in decreasing order


def analyze_uniform_policy(params: TransformerParams, sequences: Sequence[Sequence[int]],
                           k: int, seed: int = 0, min_position: int | None = None
                           ) -> list[LayerAnalysis]:
    """Per layer: how well the cross-layer uniform set stands in for the per-layer top sets.

    Positions ``n >= min_position`` (default ``2K``) of every sequence are used;
    the random control draws ``min(K, n)`` distinct past positions.
    """
    rng = make_rng(seed)
    kh = half_k(k)
    start = 2 * k if min_position is None else min_position
    n_layers = params.config.n_layers
    overlap = [[] for _ in range(n_layers)]
    umass = [[] for _ in range(n_layers)]
    rmass = [[] for _ in range(n_layers)]
    curves = [[] for _ in range(n_layers)]
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        tape = forward_batch(params, seq[None, :])
        attn = [lt.p[0] for lt in tape.layers]  # (H, T, T)
        for n in range(max(start, 1), len(seq)):
            rows = [head_max_attention(p[:, n, :n]) for p in attn]
            sets = [top_indices(r, min(kh, n)) for r in rows]
            uni = uniform_set(sets, n, k, [r[s] for r, s in zip(rows, sets)])
            rand = rng.choice(n, size=min(k, n), replace=False)
            for li, p in enumerate(attn):
                overlap[li].append(len(np.intersect1d(uni, sets[li])) / len(sets[li]))
                full = p[:, n, :n + 1]
                umass[li].append(float(full[:, uni].sum(-1).mean()))
                rmass[li].append(float(full[:, rand].sum(-1).mean()))
                curves[li].append(np.sort(full.mean(0))[::-1][:2 * k])
    out = []
    for li in range(n_layers):
        width = min(len(c) for c in curves[li])
        curve = np.mean([c[:width] for c in curves[li]], axis=0)
        out.append(LayerAnalysis(float(np.mean(overlap[li])), float(np.mean(umass[li])),
                                 float(np.mean(rmass[li])), curve))
    return out


def analysis_text(report: Sequence[LayerAnalysis]) -> str:
    lines = [f"{'layer':<6}{'overlap':>10}{'uniform':>10}{'random':>10}"]
    for i, r in enumerate(report):
        lines.append(f"{i:<6}{r.overlap:>10.3f}{r.uniform_mass:>10.3f}{r.random_mass:>10.3f}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- ablation


def run_ablation(params: TransformerParams, controller: ControllerParams,
                 sequences: Sequence[Sequence[int]], k: int,
                 multiples: Sequence[int] = (1, 2, 3), rebuilds: Sequence[int] = (0, 4, 8)
                 ) -> list[dict]:
    """Held-out perplexity of adore over cache sizes ``m = c*K`` and rebuild counts ``R``.

    Cells with ``R > m`` (only possible for tiny K) are skipped.
    """
    rows = []
    for c in multiples:
        for r in rebuilds:
            if r > c * k:
                continue
            pol = PolicyConfig.make("adore", k=k, capacity=c * k, rebuild=r)
            nll = np.concatenate([sequence_nll(params, s, pol, controller) for s in sequences])
            rows.append({"m": c * k, "R": r, "ppl": math.exp(nll.mean())})
    return rows


def ablation_csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "R", "ppl"])
    for row in rows:
        w.writerow([row["m"], row["R"], f"{row['ppl']:.4f}"])
    return buf.getvalue()


GNUPLOT_SCRIPT = """\
# usage: gnuplot -p throughput.gp   (reads bench.csv written next to it)
set datafile separator ','
set key autotitle columnhead
set xlabel 'generated length'
set ylabel 'tokens / sec'
plot for [p in 'full window strided sink h2o h2o_rebuilt adore'] \\
    '< grep -E "^'.p.'," bench.csv' using 2:4 with points title p
"""


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
