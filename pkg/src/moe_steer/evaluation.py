"""Report metrics, multiplier x top-l sweeps and table rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from ._rng import SplitMix64
from .npmi import CognitiveExpertSet, NpmiReport
from .sim import CLOSE, EOS, THINK, Task, ToyMoeModel, run_tasks
from .steering import SteeringConfig, from_ranked, uniform_config
from .trace import ExpertKey, PathOrFile, _open

DEFAULT_MULTIPLIERS = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512)
DEFAULT_SWITCH_MARKERS = frozenset({"Alternatively"})
RANDOM_ARM = "Random"


@dataclass(frozen=True)
class GenerationMetrics:
    token_count: int
    thought_count: int
    think_span_found: bool
    think_span_closed: bool
    answer: tuple[str, ...] | None = None
    correct: bool | None = None


def think_span(tokens: Sequence[str]) -> tuple[int, int, bool] | None:
    """(start, end, closed) of the first think span, end exclusive, or None."""
    try:
        start = list(tokens).index(THINK)
    except ValueError:
        return None
    for i in range(start + 1, len(tokens)):
        if tokens[i] == CLOSE:
            return start, i, True
    return start, len(tokens), False


def thought_count(tokens: Sequence[str], switch_markers: Iterable[str] = DEFAULT_SWITCH_MARKERS) -> int:
    """Number of reasoning segments: 1 + switch markers inside the think span.

    0 when there is no think span; an unterminated span is counted to the
    end of the sequence.
    """
    span = think_span(tokens)
    if span is None:
        return 0
    switches = set(switch_markers)
    start, end, _ = span
    return 1 + sum(1 for t in tokens[start + 1 : end] if t in switches)


def measure(
    tokens: Sequence[str], answer: str | None = None, switch_markers: Iterable[str] = DEFAULT_SWITCH_MARKERS
) -> GenerationMetrics:
    span = think_span(tokens)
    after: tuple[str, ...] | None = None
    if span is not None and span[2]:
        after = tuple(t for t in tokens[span[1] + 1 :] if t != EOS)
    correct = None if answer is None else (after is not None and answer in after)
    return GenerationMetrics(
        token_count=len(tokens),
        thought_count=thought_count(tokens, switch_markers),
        think_span_found=span is not None,
        think_span_closed=bool(span and span[2]),
        answer=after,
        correct=correct,
    )


@dataclass(frozen=True)
class MetricsSummary:
    """Benchmark-level aggregate: accuracy in percent, mean thoughts and tokens."""

    n: int
    accuracy: float
    thoughts: float
    tokens: float

    def to_json(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "thoughts": self.thoughts, "tokens": self.tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsSummary":
        return cls(int(obj["n"]), float(obj["accuracy"]), float(obj["thoughts"]), float(obj["tokens"]))


def summarize(metrics: Sequence[GenerationMetrics]) -> MetricsSummary:
    n = len(metrics)
    if n == 0:
        return MetricsSummary(0, math.nan, math.nan, math.nan)
    correct = sum(1 for m in metrics if m.correct)
    return MetricsSummary(
        n,
        100.0 * correct / n,
        math.fsum(m.thought_count for m in metrics) / n,
        math.fsum(m.token_count for m in metrics) / n,
    )


# -- pass@k ---------------------------------------------------------------------


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """1 - C(n-c, k) / C(n, k) as an exact fraction."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got n={n}, c={c}")
    if k > n:
        raise ValueError(f"k={k} exceeds the n={n} samples")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    return float(pass_at_k_exact(n, c, k))


def mean_pass_at_k(samples: Iterable[tuple[int, int]], k: int) -> float:
    """Average pass@k over problems given (n, c) per problem."""
    vals = [pass_at_k_exact(n, c, k) for n, c in samples]
    if not vals:
        raise ValueError("no problems")
    return float(sum(vals) / len(vals))


# -- planted recovery -------------------------------------------------------------


@dataclass(frozen=True)
class RecoveryResult:
    precision_at_l: float
    recall: float
    identified: CognitiveExpertSet
    planted: frozenset[ExpertKey]


def recovery(identified: CognitiveExpertSet, planted: Iterable[ExpertKey]) -> RecoveryResult:
    if identified.l < 1:
        raise ValueError("identified set is empty")
    truth = frozenset(ExpertKey(*k) for k in planted)
    hits = len(set(identified.experts) & truth)
    rec = hits / len(truth) if truth else 0.0
    return RecoveryResult(hits / identified.l, rec, identified, truth)


# -- sweeps -----------------------------------------------------------------------


def arm_name(l: int) -> str:
    return f"Top{l}"


@dataclass
class SweepReport:
    multipliers: list[float]
    arms: list[str]
    baseline: MetricsSummary
    cells: dict[tuple[float, str], MetricsSummary] = field(default_factory=dict)
    arm_experts: dict[str, list[ExpertKey]] = field(default_factory=dict)
    renormalize: bool = False

    def cell(self, beta: float, arm: str | int) -> MetricsSummary:
        if isinstance(arm, int):
            arm = arm_name(arm)
        return self.cells[(float(beta), arm)]

    def to_json(self) -> dict:
        return {
            "renormalize": self.renormalize,
            "multipliers": self.multipliers,
            "arms": self.arms,
            "arm_experts": {a: [list(k) for k in ks] for a, ks in self.arm_experts.items()},
            "baseline": self.baseline.to_json(),
            "cells": [
                {"multiplier": b, "arm": a, **self.cells[(b, a)].to_json()}
                for b in self.multipliers
                for a in self.arms
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SweepReport":
        cells = {(float(c["multiplier"]), c["arm"]): MetricsSummary.from_json(c) for c in obj["cells"]}
        return cls(
            [float(b) for b in obj["multipliers"]],
            list(obj["arms"]),
            MetricsSummary.from_json(obj["baseline"]),
            cells,
            {a: [ExpertKey(*k) for k in ks] for a, ks in obj.get("arm_experts", {}).items()},
            bool(obj.get("renormalize", False)),
        )


def random_experts(model: ToyMoeModel, exclude: Iterable[ExpertKey], count: int, seed: int) -> list[ExpertKey]:
    """Uniform draw without replacement from a dedicated seed stream."""
    excluded = set(exclude)
    pool = [
        ExpertKey(l, e)
        for l in range(model.shape.n_layers)
        for e in range(model.shape.n_experts)
        if ExpertKey(l, e) not in excluded
    ]
    rng = SplitMix64(seed).fork("random-arm")
    picked = []
    for u in rng.uniform(min(count, len(pool))):
        picked.append(pool.pop(int(u * len(pool))))
    return sorted(picked)


def evaluate(model: ToyMoeModel, tasks: Sequence[Task], config: SteeringConfig | None = None, max_tokens: int = 64):
    results = run_tasks(model, list(tasks), config, max_tokens)
    return [measure(toks, t.answer) for (toks, _), t in zip(results, tasks)]


def sweep(
    model: ToyMoeModel,
    tasks: Sequence[Task],
    multipliers: Sequence[float],
    top_ls: Sequence[int],
    expert_report: NpmiReport,
    random_arm: bool = True,
    renormalize: bool = False,
    seed: int = 0,
    max_tokens: int = 64,
) -> SweepReport:
    """Evaluate every (multiplier, arm) cell on the task set.

    The baseline is an unsteered run; each cell steers the top-l experts of
    ``expert_report`` (or the random pair) with the cell's multiplier.
    """
    mults = [float(b) for b in multipliers]
    if 1.0 not in mults:
        raise ValueError("multipliers must include 1 so the baseline row exists")
    if len(set(mults)) != len(mults) or len(set(top_ls)) != len(top_ls):
        raise ValueError("multipliers and top-l values must be unique")
    arms = {arm_name(l): list(expert_report.top(l).experts) for l in top_ls}
    if random_arm:
        top_set = expert_report.top(max(top_ls)).experts if top_ls else ()
        arms[RANDOM_ARM] = random_experts(model, top_set, 2, seed)
    report = SweepReport(
        mults, list(arms), summarize(evaluate(model, tasks, None, max_tokens)), arm_experts=arms, renormalize=renormalize
    )
    for beta in mults:
        for arm, keys in arms.items():
            if arm == RANDOM_ARM:
                config = uniform_config(keys, beta, renormalize, "random")
            else:
                config = from_ranked(CognitiveExpertSet(tuple(keys)), beta, renormalize)
            report.cells[(beta, arm)] = summarize(evaluate(model, tasks, config, max_tokens))
    return report


def write_sweep(report: SweepReport, sink: PathOrFile) -> None:
    with _open(sink, "w") as f:
        json.dump(report.to_json(), f, indent=1)
        f.write("\n")


def read_sweep(source: PathOrFile) -> SweepReport:
    with _open(source, "r") as f:
        return SweepReport.from_json(json.load(f))


# -- comparison tables --------------------------------------------------------------

METRICS = ("accuracy", "thoughts", "tokens")
_HEAD = {"accuracy": "Accuracy", "thoughts": "Thoughts", "tokens": "#Tokens"}


@dataclass(frozen=True)
class Comparison:
    benchmark: str
    baseline_label: str
    steered_label: str
    baseline: MetricsSummary
    steered: MetricsSummary
    deltas: dict[str, float]


def compare_report(
    baseline: MetricsSummary,
    steered: MetricsSummary,
    benchmark: str = "synthetic",
    baseline_label: str = "baseline",
    steered_label: str = "steered",
) -> Comparison:
    if baseline.n == 0 or steered.n == 0:
        raise ValueError(f"no instances in benchmark {benchmark!r}")
    deltas = {m: getattr(steered, m) - getattr(baseline, m) for m in METRICS}
    return Comparison(benchmark, baseline_label, steered_label, baseline, steered, deltas)


def _fmt(metric: str, v: float, signed: bool = False) -> str:
    if math.isnan(v):
        return "-"
    sign = "+" if signed else ""
    if metric == "tokens":
        return format(round(v), f"{sign},d")
    return format(v, f"{sign}.1f")


def _table(header: list[str], rows: list[list[str]], fmt: str) -> str:
    if fmt == "tsv":
        return "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown table format {fmt!r} (md or tsv)")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render_comparison(comp: Comparison, fmt: str = "md") -> str:
    header = ["Benchmark", "Method"] + [_HEAD[m] for m in METRICS]
    rows = [
        [comp.benchmark, comp.baseline_label] + [_fmt(m, getattr(comp.baseline, m)) for m in METRICS],
        [comp.benchmark, comp.steered_label] + [_fmt(m, getattr(comp.steered, m)) for m in METRICS],
        [comp.benchmark, "delta"] + [_fmt(m, comp.deltas[m], signed=True) for m in METRICS],
    ]
    return _table(header, rows, fmt)


def render_sweep(report: SweepReport, metric: str = "accuracy", fmt: str = "md") -> str:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    header = ["Multiplier"] + report.arms
    rows = [["baseline"] + [_fmt(metric, getattr(report.baseline, metric))] * len(report.arms)]
    for beta in report.multipliers:
        label = format(beta, "g")
        rows.append([label] + [_fmt(metric, getattr(report.cells[(beta, a)], metric)) for a in report.arms])
    return _table(header, rows, fmt)
