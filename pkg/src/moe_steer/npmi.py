"""Count statistics, nPMI scoring and cognitive-expert ranking.

For a marker token x and an expert key e the estimators are::

    p(e | x) = k / M_x      p(e) = K / T      p(x, e) = k / T

    nPMI(x, e) = (log2(k / M_x) + log2(T / K)) / log2(T / k)

where k counts tokens equal to x at which e was selected, K counts all
tokens at which e was selected, M_x counts occurrences of x and T counts
tokens. Keys are (layer, expert) pairs, so an expert is selected at most
once per token and every count is bounded by T.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Mapping, Union

import numpy as np

from . import _kernels
from .trace import ExpertKey, MarkerSet, ModelShape, PathOrFile, RoutingTable, TraceCorpus, _open


class UndefinedNpmiError(ValueError):
    pass


@dataclass(eq=False)
class CountStats:
    """Mergeable sufficient statistics for nPMI over flat (layer, expert) keys."""

    shape: ModelShape
    markers: MarkerSet
    K: np.ndarray
    k: np.ndarray
    M: np.ndarray
    T: int = 0

    @classmethod
    def empty(cls, shape: ModelShape, markers: MarkerSet) -> "CountStats":
        n = shape.n_keys
        return cls(
            shape, markers,
            np.zeros(n, dtype=np.int64),
            np.zeros((len(markers), n), dtype=np.int64),
            np.zeros(len(markers), dtype=np.int64),
            0,
        )

    def activations(self, key: ExpertKey) -> int:
        return int(self.K[self.shape.flat(key)])

    def co_activations(self, key: ExpertKey, marker: str) -> int:
        return int(self.k[self.markers.tokens.index(marker), self.shape.flat(key)])

    def occurrences(self, marker: str) -> int:
        return int(self.M[self.markers.tokens.index(marker)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountStats):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.markers == other.markers
            and self.T == other.T
            and np.array_equal(self.K, other.K)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.M, other.M)
        )

    def to_json(self) -> dict:
        return {
            "shape": self.shape.to_json(),
            "markers": [list(e) for e in self.markers.entries],
            "T": self.T,
            "M": self.M.tolist(),
            "K": self.K.tolist(),
            "k": self.k.tolist(),
        }


Countable = Union[TraceCorpus, RoutingTable]


def _count_table(table: RoutingTable) -> CountStats:
    shape = table.shape
    markers = table.markers
    if table.n_tokens == 0:
        return CountStats.empty(shape, markers)
    K, k, M = _kernels.count_routing(table.marker_ids(), table.slots, len(markers), shape.n_keys)
    return CountStats(shape, markers, K, k, M, table.n_tokens)


def count_stats(data: Countable, domain: str | None = None, workers: int = 1, shards: int | None = None) -> CountStats:
    """Count activations over a corpus or columnar table.

    With ``workers > 1`` (or an explicit ``shards``) the token range is split
    into contiguous shards counted concurrently and folded with merge_stats;
    the result is identical to a single pass.
    """
    if isinstance(data, TraceCorpus):
        data = RoutingTable.from_corpus(data.select(domain))
    elif domain is not None:
        raise ValueError("domain filtering applies to TraceCorpus input; use read_table(domain=...) for tables")
    n_shards = shards or workers
    if n_shards <= 1:
        return _count_table(data)
    parts = data.shards(n_shards)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counted = list(pool.map(_count_table, parts))
    else:
        counted = [_count_table(p) for p in parts]
    return reduce(merge_stats, counted)


def merge_stats(a: CountStats, b: CountStats) -> CountStats:
    if a.shape != b.shape:
        raise ValueError(f"cannot merge stats of different shapes: {a.shape} vs {b.shape}")
    if a.markers != b.markers:
        raise ValueError(f"cannot merge stats over different markers: {a.markers} vs {b.markers}")
    return CountStats(a.shape, a.markers, a.K + b.K, a.k + b.k, a.M + b.M, a.T + b.T)


def npmi(k_n: int, K_n: int, M_x: int, T: int) -> float:
    """Normalized PMI of one (marker, expert) pair from raw counts.

    Returns exactly -1.0 when ``k_n == 0`` (the never-co-occur limit) and
    exactly 1.0 when ``k_n == K_n == M_x``.
    """
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if not (0 <= k_n <= K_n and k_n <= M_x):
        raise ValueError(f"need 0 <= k_n <= min(K_n, M_x), got k_n={k_n}, K_n={K_n}, M_x={M_x}")
    if K_n > T or M_x > T:
        raise ValueError(f"counts exceed T={T}: K_n={K_n}, M_x={M_x}")
    if k_n == 0:
        return -1.0
    if k_n == T:
        raise UndefinedNpmiError(f"nPMI undefined when k_n == T == {T} (marker and expert at every token)")
    return (math.log2(k_n / M_x) + math.log2(T / K_n)) / math.log2(T / k_n)


def npmi_array(k: np.ndarray, K: np.ndarray, M, T: int) -> np.ndarray:
    """Vectorized ``npmi``; M broadcasts against k."""
    k = np.asarray(k, dtype=np.int64)
    K = np.broadcast_to(np.asarray(K, dtype=np.int64), k.shape)
    M = np.broadcast_to(np.asarray(M, dtype=np.int64), k.shape)
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if np.any(k == T):
        raise UndefinedNpmiError(f"nPMI undefined when k_n == T == {T}")
    out = np.full(k.shape, -1.0)
    pos = k > 0
    kp, Kp, Mp = k[pos].astype(np.float64), K[pos].astype(np.float64), M[pos].astype(np.float64)
    out[pos] = (np.log2(kp / Mp) + np.log2(T / Kp)) / np.log2(T / kp)
    return out


def combined_score(per_marker_npmi: Mapping[str, float], markers: MarkerSet) -> float:
    missing = [t for t in markers.tokens if t not in per_marker_npmi]
    if missing:
        raise KeyError(f"no nPMI value for markers {missing}")
    total = 0.0
    for token, coef in markers.entries:
        total += coef * per_marker_npmi[token]
    return total


@dataclass(frozen=True)
class ExpertScore:
    key: ExpertKey
    rank: int
    combined: float
    npmi: dict[str, float]
    activations: int


@dataclass
class NpmiReport:
    markers: MarkerSet
    n_tokens: int
    entries: list[ExpertScore] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def ranked_keys(self) -> list[ExpertKey]:
        return [e.key for e in self.entries]

    def get(self, key: ExpertKey) -> ExpertScore:
        for e in self.entries:
            if e.key == key:
                return e
        raise KeyError(f"expert {key} not in report")

    def top(self, l: int, source_domain: str = "all") -> "CognitiveExpertSet":
        if l > len(self.entries):
            raise ValueError(f"l={l} exceeds the {len(self.entries)} scored experts")
        return CognitiveExpertSet(tuple(e.key for e in self.entries[:l]), source_domain)


@dataclass(frozen=True)
class CognitiveExpertSet:
    experts: tuple[ExpertKey, ...]
    source_domain: str = "all"

    @property
    def l(self) -> int:
        return len(self.experts)

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(ExpertKey(*e) for e in self.experts))

    def to_json(self) -> dict:
        return {"source_domain": self.source_domain, "l": self.l, "experts": [list(e) for e in self.experts]}

    @classmethod
    def from_json(cls, obj: dict) -> "CognitiveExpertSet":
        experts = tuple(ExpertKey(int(a), int(b)) for a, b in obj["experts"])
        if "l" in obj and int(obj["l"]) != len(experts):
            raise ValueError(f"expert set declares l={obj['l']} but lists {len(experts)} experts")
        return cls(experts, obj.get("source_domain", "all"))


def score_experts(stats: CountStats, markers: MarkerSet | None = None) -> NpmiReport:
    """Score every expert with at least one activation and sort by combined score."""
    markers = markers or stats.markers
    counted = stats.markers.tokens
    missing = [t for t in markers.tokens if t not in counted]
    if missing:
        raise KeyError(f"markers {missing} were not counted (counted: {list(counted)})")
    report = NpmiReport(markers, stats.T)
    active = np.flatnonzero(stats.K > 0)
    if active.size == 0:
        return report
    rows = [counted.index(t) for t in markers.tokens]
    values = npmi_array(stats.k[rows][:, active], stats.K[active], stats.M[rows][:, None], stats.T)
    combined = np.zeros(active.size)
    for j, (_, coef) in enumerate(markers.entries):
        combined += coef * values[j]
    # flat index order is (layer, expert) order, so it doubles as the tie-break
    order = np.lexsort((active, -combined))
    for rank, i in enumerate(order, start=1):
        report.entries.append(
            ExpertScore(
                key=stats.shape.unflat(active[i]),
                rank=rank,
                combined=float(combined[i]),
                npmi={t: float(values[j, i]) for j, t in enumerate(markers.tokens)},
                activations=int(stats.K[active[i]]),
            )
        )
    return report


def rank_experts(
    stats: CountStats, markers: MarkerSet | None = None, l: int = 2, source_domain: str = "all"
) -> tuple[NpmiReport, CognitiveExpertSet]:
    if l < 1:
        raise ValueError(f"l must be positive, got {l}")
    report = score_experts(stats, markers)
    return report, report.top(l, source_domain)


# -- files ----------------------------------------------------------------------


def _sig12(v: float) -> float:
    return float(format(v, ".12g"))


def report_to_json(report: NpmiReport) -> dict:
    return {
        "markers": [[t, c] for t, c in report.markers.entries],
        "T": report.n_tokens,
        "experts": [
            {
                "rank": e.rank,
                "layer": e.key.layer,
                "expert": e.key.expert,
                "combined": _sig12(e.combined),
                "npmi": {t: _sig12(v) for t, v in e.npmi.items()},
                "K": e.activations,
            }
            for e in report.entries
        ],
    }


def write_report(report: NpmiReport, sink: PathOrFile) -> None:
    with _open(sink, "w") as f:
        json.dump(report_to_json(report), f, indent=1, ensure_ascii=False)
        f.write("\n")


def read_report(source: PathOrFile) -> NpmiReport:
    with _open(source, "r") as f:
        obj = json.load(f)
    markers = MarkerSet(tuple((t, c) for t, c in obj["markers"]))
    entries = [
        ExpertScore(ExpertKey(e["layer"], e["expert"]), e["rank"], e["combined"], dict(e["npmi"]), e["K"])
        for e in sorted(obj["experts"], key=lambda e: e["rank"])
    ]
    return NpmiReport(markers, obj["T"], entries)


def write_expert_set(experts: CognitiveExpertSet, sink: PathOrFile) -> None:
    with _open(sink, "w") as f:
        json.dump(experts.to_json(), f)
        f.write("\n")


def read_expert_set(source: PathOrFile) -> CognitiveExpertSet:
    with _open(source, "r") as f:
        return CognitiveExpertSet.from_json(json.load(f))
