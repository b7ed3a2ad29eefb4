"""Routing-trace data model and the line-delimited trace file format.

A trace file is UTF-8 text, one JSON record per line. The first line is a
header carrying the format version, the model shape and the marker set::

    {"v":1,"shape":{"L":4,"N":16,"O":2},"markers":[["<think>",1.0],...]}

Every following line is one routing event (one emitted token)::

    {"i":"inst-0","d":"math","p":0,"t":"<think>","s":[[0,3,0.71...],...]}

``s`` holds ``[layer, expert, weight]`` triples, O per traced layer. ``d``
(domain) is written on the first record of each instance only. Instances are
contiguous blocks of records sharing ``i``.
"""

from __future__ import annotations

import io
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from . import _kernels

FORMAT_VERSION = 1
WEIGHT_SUM_TOL = 1e-9

PathOrFile = Union[str, "os.PathLike[str]", IO[str]]


class TraceParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class FormatVersionError(TraceParseError):
    pass


class TraceValidationError(TraceParseError):
    pass


class ExpertKey(NamedTuple):
    """(layer, expert) pair; tuple ordering gives the lexicographic tie-break."""

    layer: int
    expert: int

    def __str__(self) -> str:
        return f"({self.layer}, {self.expert})"


@dataclass(frozen=True)
class ModelShape:
    n_layers: int
    n_experts: int
    top_o: int

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 1 <= self.top_o <= self.n_experts:
            raise ValueError(f"need 1 <= top_o <= n_experts, got O={self.top_o}, N={self.n_experts}")

    @property
    def n_keys(self) -> int:
        return self.n_layers * self.n_experts

    def contains(self, key: ExpertKey) -> bool:
        return 0 <= key.layer < self.n_layers and 0 <= key.expert < self.n_experts

    def flat(self, key: ExpertKey) -> int:
        return key.layer * self.n_experts + key.expert

    def unflat(self, index: int) -> ExpertKey:
        return ExpertKey(*divmod(int(index), self.n_experts))

    def to_json(self) -> dict:
        return {"L": self.n_layers, "N": self.n_experts, "O": self.top_o}


@dataclass(frozen=True)
class MarkerSet:
    """Marker tokens with their signed coefficients for the combined score."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(t), float(c)) for t, c in self.entries)
        object.__setattr__(self, "entries", entries)
        dupes = [t for t, n in Counter(t for t, _ in entries).items() if n > 1]
        if dupes:
            raise ValueError(f"duplicate marker tokens: {dupes}")

    @classmethod
    def default(cls) -> "MarkerSet":
        return cls((("<think>", 1.0), ("</think>", -1.0), ("Alternatively", -1.0)))

    @classmethod
    def single(cls, token: str) -> "MarkerSet":
        return cls(((token, 1.0),))

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.tokens


@dataclass(frozen=True)
class RoutingEvent:
    position: int
    token: str
    selections: tuple[tuple[ExpertKey, float], ...]

    def by_layer(self) -> dict[int, list[tuple[ExpertKey, float]]]:
        layers: dict[int, list[tuple[ExpertKey, float]]] = {}
        for key, w in self.selections:
            layers.setdefault(key.layer, []).append((key, w))
        return layers


@dataclass(frozen=True)
class TraceInstance:
    instance_id: str
    domain: str
    events: tuple[RoutingEvent, ...]

    @property
    def tokens(self) -> list[str]:
        return [e.token for e in self.events]


@dataclass(frozen=True)
class TraceCorpus:
    shape: ModelShape
    instances: tuple[TraceInstance, ...] = ()
    markers: MarkerSet = field(default_factory=MarkerSet.default)

    @property
    def n_tokens(self) -> int:
        return sum(len(inst.events) for inst in self.instances)

    def select(self, domain: str | None) -> "TraceCorpus":
        if domain is None:
            return self
        keep = tuple(i for i in self.instances if i.domain == domain)
        return TraceCorpus(self.shape, keep, self.markers)


# -- validation ---------------------------------------------------------------


class Violation(NamedTuple):
    instance_id: str
    position: int | None
    kind: str
    detail: str


def event_problems(event: RoutingEvent, shape: ModelShape | None) -> list[tuple[str, str]]:
    problems = []
    for layer, sel in sorted(event.by_layer().items()):
        keys = [k for k, _ in sel]
        if len(set(keys)) != len(keys):
            dup = sorted(k for k, n in Counter(keys).items() if n > 1)
            problems.append(("duplicate_expert", f"layer {layer}: duplicate experts {[tuple(k) for k in dup]}"))
        for k, w in sel:
            if not (0.0 < w <= 1.0):
                problems.append(("weight_range", f"layer {layer}: weight {w!r} of expert {k.expert} outside (0, 1]"))
        total = math.fsum(w for _, w in sel)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            problems.append(("weight_sum", f"layer {layer}: weights sum to {total!r}"))
        if shape is not None:
            if len(sel) != shape.top_o:
                problems.append(("selection_count", f"layer {layer}: {len(sel)} selections, expected {shape.top_o}"))
            for k in keys:
                if not shape.contains(k):
                    problems.append(("out_of_shape", f"expert {tuple(k)} outside shape L={shape.n_layers} N={shape.n_experts}"))
    return problems


@dataclass
class ValidationReport:
    n_instances: int = 0
    n_tokens: int = 0
    marker_counts: dict[str, int] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "instances": self.n_instances,
            "T": self.n_tokens,
            "markers": self.marker_counts,
            "violations": [v._asdict() for v in self.violations],
        }


def validate_corpus(corpus: TraceCorpus) -> ValidationReport:
    report = ValidationReport(marker_counts={t: 0 for t in corpus.markers.tokens})
    seen_ids: set[str] = set()
    for inst in corpus.instances:
        report.n_instances += 1
        report.n_tokens += len(inst.events)
        if inst.instance_id in seen_ids:
            report.violations.append(Violation(inst.instance_id, None, "duplicate_instance", "instance id repeated"))
        seen_ids.add(inst.instance_id)
        if not inst.events:
            report.violations.append(Violation(inst.instance_id, None, "empty_instance", "instance has no events"))
        prev = -1
        for ev in inst.events:
            if (prev < 0 and ev.position != 0) or ev.position <= prev:
                want = "first position 0" if prev < 0 else f"position > {prev}"
                report.violations.append(Violation(inst.instance_id, ev.position, "position", f"expected {want}"))
            prev = max(prev, ev.position, 0)
            if ev.token in report.marker_counts:
                report.marker_counts[ev.token] += 1
            for kind, detail in event_problems(ev, corpus.shape):
                report.violations.append(Violation(inst.instance_id, ev.position, kind, detail))
    return report


# -- serialization ------------------------------------------------------------


def _fmt_weight(w: float) -> str:
    return format(w, ".17g")


def header_line(shape: ModelShape, markers: MarkerSet) -> str:
    marks = ",".join(f"[{json.dumps(t)},{c!r}]" for t, c in markers.entries)
    return f'{{"v":{FORMAT_VERSION},"shape":{{"L":{shape.n_layers},"N":{shape.n_experts},"O":{shape.top_o}}},"markers":[{marks}]}}'


def event_line(instance_id: str, event: RoutingEvent, domain: str | None = None) -> str:
    sel = ",".join(f"[{k.layer},{k.expert},{_fmt_weight(w)}]" for k, w in event.selections)
    d = f',"d":{json.dumps(domain)}' if domain is not None else ""
    return f'{{"i":{json.dumps(instance_id)}{d},"p":{event.position},"t":{json.dumps(event.token)},"s":[{sel}]}}'


class TraceWriter:
    """Sequential writer; one owner per sink."""

    def __init__(self, sink: IO[str], shape: ModelShape, markers: MarkerSet):
        self.sink = sink
        self.sink.write(header_line(shape, markers) + "\n")

    def write_instance(self, inst: TraceInstance) -> None:
        if not inst.events:
            raise ValueError(f"instance {inst.instance_id!r} has no events and cannot be serialized")
        lines = [event_line(inst.instance_id, inst.events[0], inst.domain)]
        lines.extend(event_line(inst.instance_id, ev) for ev in inst.events[1:])
        self.sink.write("\n".join(lines) + "\n")


def _open(target: PathOrFile, mode: str):
    if isinstance(target, (str, os.PathLike)):
        return open(target, mode, encoding="utf-8", newline="\n")
    return _NoClose(target)


class _NoClose:
    def __init__(self, f):
        self.f = f

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        return False


def write_corpus(corpus: TraceCorpus, sink: PathOrFile) -> None:
    with _open(sink, "w") as f:
        writer = TraceWriter(f, corpus.shape, corpus.markers)
        for inst in corpus.instances:
            writer.write_instance(inst)


def parse_header(line: str, lineno: int = 1) -> tuple[ModelShape, MarkerSet]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"malformed header: {exc.msg}", lineno) from None
    if not isinstance(rec, dict) or "v" not in rec:
        raise TraceParseError("header record missing format version 'v'", lineno)
    if rec["v"] != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported trace format version {rec['v']!r} (expected {FORMAT_VERSION})", lineno)
    try:
        s = rec["shape"]
        shape = ModelShape(int(s["L"]), int(s["N"]), int(s["O"]))
        markers = MarkerSet(tuple((t, c) for t, c in rec["markers"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceParseError(f"malformed header: {exc}", lineno) from None
    return shape, markers


def _decode_event(line: str, lineno: int | None) -> tuple[str, str | None, RoutingEvent]:
    try:
        rec = json.loads(line)
        inst_id = rec["i"]
        position = rec["p"]
        token = rec["t"]
        triples = rec["s"]
        if not isinstance(inst_id, str) or not isinstance(token, str) or type(position) is not int:
            raise TypeError("fields i/t must be strings and p an integer")
        selections = []
        for triple in triples:
            layer, expert, w = triple
            if type(layer) is not int or type(expert) is not int or layer < 0 or expert < 0:
                raise TypeError(f"bad expert index in {triple!r}")
            selections.append((ExpertKey(layer, expert), float(w)))
        domain = rec.get("d")
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"malformed record: {exc.msg}", lineno) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceParseError(f"malformed record: {exc}", lineno) from None
    return inst_id, domain, RoutingEvent(position, token, tuple(selections))


def parse_event(line: str, lineno: int | None = None, shape: ModelShape | None = None) -> RoutingEvent:
    """Parse and validate one event record.

    Raises TraceParseError for malformed records and TraceValidationError when
    the event breaks a routing invariant (weight sums, duplicates, and, when
    ``shape`` is given, selection counts and index ranges).
    """
    _, _, event = _decode_event(line, lineno)
    problems = event_problems(event, shape)
    if problems:
        raise TraceValidationError("; ".join(d for _, d in problems), lineno)
    return event


def _lines(f: IO[str]) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(f, start=1):
        line = line.rstrip("\n")
        if line.strip():
            yield lineno, line


def read_corpus(source: PathOrFile, strict: bool = True) -> TraceCorpus:
    """Read a trace file.

    With ``strict`` every event is validated on the way in; otherwise only
    the record structure is checked and ``validate_corpus`` reports problems.
    """
    with _open(source, "r") as f:
        it = _lines(f)
        try:
            lineno, first = next(it)
        except StopIteration:
            raise TraceParseError("empty trace file: missing header") from None
        shape, markers = parse_header(first, lineno)
        instances: list[TraceInstance] = []
        finished: set[str] = set()
        cur_id, cur_domain, cur_events = None, "", []
        for lineno, line in it:
            inst_id, domain, ev = _decode_event(line, lineno)
            if strict:
                problems = event_problems(ev, shape)
                if problems:
                    raise TraceValidationError("; ".join(d for _, d in problems), lineno)
            if inst_id != cur_id:
                if cur_id is not None:
                    instances.append(TraceInstance(cur_id, cur_domain, tuple(cur_events)))
                    finished.add(cur_id)
                if inst_id in finished:
                    raise TraceParseError(f"instance {inst_id!r} is not a contiguous block", lineno)
                cur_id, cur_domain, cur_events = inst_id, domain if domain is not None else "", []
            cur_events.append(ev)
        if cur_id is not None:
            instances.append(TraceInstance(cur_id, cur_domain, tuple(cur_events)))
    return TraceCorpus(shape, tuple(instances), markers)


def corpus_to_text(corpus: TraceCorpus) -> str:
    buf = io.StringIO()
    write_corpus(corpus, buf)
    return buf.getvalue()


# -- columnar form --------------------------------------------------------------


@dataclass
class RoutingTable:
    """Columnar routing trace used by the counting kernels.

    ``slots[t, j]`` is the flat key (layer * N + expert) of the j-th selection
    at token t, or -1 for padding when a layer is not traced.
    """

    shape: ModelShape
    markers: MarkerSet
    vocab: list[str]
    token_ids: np.ndarray
    slots: np.ndarray
    offsets: np.ndarray
    instance_ids: list[str]
    domains: list[str]

    @property
    def n_tokens(self) -> int:
        return int(self.token_ids.shape[0])

    def marker_ids(self) -> np.ndarray:
        """Per-token marker index into ``markers.tokens``, -1 for non-markers."""
        lut = np.full(len(self.vocab) + 1, -1, dtype=np.int32)
        index = {t: i for i, t in enumerate(self.vocab)}
        for j, tok in enumerate(self.markers.tokens):
            if tok in index:
                lut[index[tok]] = j
        return lut[self.token_ids]

    def shards(self, n: int) -> list["RoutingTable"]:
        """Split into ``n`` contiguous token ranges (instance structure dropped)."""
        bounds = np.linspace(0, self.n_tokens, n + 1).astype(np.int64)
        return [
            RoutingTable(
                self.shape, self.markers, self.vocab,
                self.token_ids[a:b], self.slots[a:b],
                np.array([0, b - a], dtype=np.int64), [], [],
            )
            for a, b in zip(bounds[:-1], bounds[1:])
        ]

    @classmethod
    def from_corpus(cls, corpus: TraceCorpus) -> "RoutingTable":
        shape = corpus.shape
        width = shape.n_layers * shape.top_o
        vocab: dict[str, int] = {}
        T = corpus.n_tokens
        token_ids = np.empty(T, dtype=np.int32)
        slots = np.full((T, width), -1, dtype=np.int32)
        offsets = [0]
        t = 0
        for inst in corpus.instances:
            for ev in inst.events:
                token_ids[t] = vocab.setdefault(ev.token, len(vocab))
                flat = [k.layer * shape.n_experts + k.expert for k, _ in ev.selections]
                slots[t, : len(flat)] = flat[:width]
                t += 1
            offsets.append(t)
        return cls(
            shape, corpus.markers, list(vocab), token_ids, slots,
            np.array(offsets, dtype=np.int64),
            [i.instance_id for i in corpus.instances],
            [i.domain for i in corpus.instances],
        )


def read_table(source: PathOrFile, domain: str | None = None) -> RoutingTable:
    """Stream a trace file straight into columnar form, skipping event objects.

    With numba enabled, canonical records (as written by TraceWriter) are
    scanned from raw bytes; anything else is read record by record with json.
    """
    if _kernels.USE_NUMBA:
        if isinstance(source, (str, os.PathLike)):
            buf = np.fromfile(source, dtype=np.uint8)
        else:
            text = source.read()
            source = io.StringIO(text)
            buf = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
        table = _scan_table(buf, domain)
        if table is not None:
            return table
    return _read_table_json(source, domain)


def _json_str(buf: np.ndarray, start: int, end: int) -> str:
    # span excludes the quotes; include them so json handles escapes
    return json.loads(buf[start - 1 : end + 1].tobytes().decode("utf-8"))


def _line_end(buf: np.ndarray, pos: int) -> int:
    step = 4096
    while True:
        hits = np.flatnonzero(buf[pos : pos + step] == 10)
        if hits.size:
            return pos + int(hits[0])
        if pos + step >= buf.size:
            return int(buf.size)
        step *= 2


def _scan_table(buf: np.ndarray, domain: str | None) -> RoutingTable | None:
    """Byte-level fast path; None means fall back to the json reader."""
    pos, lineno = 0, 1
    while True:
        if pos >= buf.size:
            return None
        end = _line_end(buf, pos)
        try:
            header = buf[pos:end].tobytes().decode("utf-8")
        except UnicodeDecodeError:
            return None
        if header.strip():
            break
        pos, lineno = end + 1, lineno + 1
    shape, markers = parse_header(header, lineno)
    width = shape.n_layers * shape.top_o
    n, bad, spans, slots, new_inst, tok_hash = _kernels.scan_records(buf, end + 1, shape.n_layers, shape.n_experts, width)
    if bad:
        return None
    spans, slots, new_inst, tok_hash = spans[:n], slots[:n], new_inst[:n], tok_hash[:n]

    uniq, first, inverse = np.unique(tok_hash, return_index=True, return_inverse=True)
    if not _kernels.spans_equal_numba(buf, spans, first, inverse.astype(np.int64)):
        return None
    # vocab ids in first-appearance order, merging spellings that decode equal
    vocab: dict[str, int] = {}
    remap = np.empty(uniq.size, dtype=np.int32)
    for u in np.argsort(first, kind="stable"):
        r = first[u]
        remap[u] = vocab.setdefault(_json_str(buf, spans[r, 4], spans[r, 5]), len(vocab))
    token_ids = remap[inverse]

    starts = np.flatnonzero(new_inst)
    lengths = np.diff(np.append(starts, n))
    ids = [_json_str(buf, spans[r, 0], spans[r, 1]) for r in starts]
    domains = [_json_str(buf, spans[r, 2], spans[r, 3]) if spans[r, 2] >= 0 else "" for r in starts]
    if domain is not None:
        keep = np.array([d == domain for d in domains], dtype=bool)
        mask = np.repeat(keep, lengths)
        token_ids, slots = token_ids[mask], slots[mask]
        lengths = lengths[keep]
        ids = [i for i, k in zip(ids, keep) if k]
        domains = [d for d, k in zip(domains, keep) if k]
        # vocab covers kept tokens only, still in first-appearance order
        used, first, inverse = np.unique(token_ids, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty(used.size, dtype=np.int32)
        rank[order] = np.arange(used.size, dtype=np.int32)
        token_ids = rank[inverse]
        names = list(vocab)
        vocab = {names[used[i]]: j for j, i in enumerate(order)}
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return RoutingTable(
        shape, markers, list(vocab), np.ascontiguousarray(token_ids, dtype=np.int32),
        np.ascontiguousarray(slots), offsets, ids, domains,
    )


def _read_table_json(source: PathOrFile, domain: str | None) -> RoutingTable:
    with _open(source, "r") as f:
        it = _lines(f)
        try:
            lineno, first = next(it)
        except StopIteration:
            raise TraceParseError("empty trace file: missing header") from None
        shape, markers = parse_header(first, lineno)
        width = shape.n_layers * shape.top_o
        n_exp, n_layers = shape.n_experts, shape.n_layers
        vocab: dict[str, int] = {}
        tok_list: list[int] = []
        slot_list: list[list[int]] = []
        offsets = [0]
        ids: list[str] = []
        domains: list[str] = []
        cur_id = None
        keep = True
        loads = json.loads
        for lineno, line in it:
            try:
                rec = loads(line)
                inst_id = rec["i"]
                if inst_id != cur_id:
                    if cur_id is not None and keep:
                        offsets.append(len(tok_list))
                    cur_id = inst_id
                    d = rec.get("d", "")
                    keep = domain is None or d == domain
                    if keep:
                        ids.append(inst_id)
                        domains.append(d)
                if not keep:
                    continue
                tok_list.append(vocab.setdefault(rec["t"], len(vocab)))
                pairs = [(l, e) for l, e, _ in rec["s"]]
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"malformed record: {exc.msg}", lineno) from None
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceParseError(f"malformed record: {exc}", lineno) from None
            if any(not (0 <= l < n_layers and 0 <= e < n_exp) for l, e in pairs):
                raise TraceValidationError(f"expert index outside shape L={n_layers} N={n_exp}", lineno)
            row = [l * n_exp + e for l, e in pairs]
            if len(row) < width:
                row = row + [-1] * (width - len(row))
            elif len(row) > width:
                raise TraceValidationError(f"{len(row)} selections exceed L*O={width}", lineno)
            slot_list.append(row)
        if cur_id is not None and keep:
            offsets.append(len(tok_list))
    token_ids = np.array(tok_list, dtype=np.int32)
    slots = np.array(slot_list, dtype=np.int32).reshape(len(tok_list), width)
    return RoutingTable(shape, markers, list(vocab), token_ids, slots, np.array(offsets, dtype=np.int64), ids, domains)


def iter_instances(corpora: Iterable[TraceCorpus]) -> Iterator[TraceInstance]:
    for c in corpora:
        yield from c.instances


def concat_corpora(parts: Sequence[TraceCorpus]) -> TraceCorpus:
    if not parts:
        raise ValueError("nothing to concatenate")
    shape, markers = parts[0].shape, parts[0].markers
    for p in parts[1:]:
        if p.shape != shape or p.markers != markers:
            raise ValueError("corpora disagree on shape or markers")
    return TraceCorpus(shape, tuple(iter_instances(parts)), markers)
