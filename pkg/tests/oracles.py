"""Independent reference implementations used as test oracles.

None of these import the package's counting or scoring code paths.
"""

import itertools
import math
from fractions import Fraction

import numpy as np

from moe_steer.trace import ExpertKey, MarkerSet, ModelShape, RoutingEvent, TraceCorpus, TraceInstance

FILLER = ("w0", "w1", "w2", "Q3", "A3")


def random_corpus(seed: int, max_keys: int = 5, max_tokens: int = 200, n_instances: int | None = None) -> TraceCorpus:
    """Small random corpus; the first token is never a marker so k_n < T always."""
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 3))
    N = int(rng.integers(1, max_keys // L + 1))
    O = int(rng.integers(1, N + 1))
    shape = ModelShape(L, N, O)
    markers = MarkerSet.default()
    vocab = list(markers.tokens) + list(FILLER)
    T = int(rng.integers(1, max_tokens + 1))
    n_inst = n_instances or int(rng.integers(1, min(T, 6) + 1))
    cuts = sorted(rng.choice(np.arange(1, T), size=min(n_inst - 1, T - 1), replace=False).tolist()) if T > 1 else []
    bounds = [0] + cuts + [T]
    # skew towards markers so co-occurrence is common
    p = np.array([3.0] * len(markers) + [1.0] * len(FILLER))
    p /= p.sum()
    instances = []
    t_global = 0
    for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        events = []
        for pos in range(b - a):
            tok = FILLER[0] if t_global == 0 else vocab[int(rng.choice(len(vocab), p=p))]
            sel = []
            for layer in range(L):
                experts = rng.choice(N, size=O, replace=False)
                w = rng.random(O) + 0.05
                w = w / w.sum()
                sel.extend((ExpertKey(layer, int(e)), float(x)) for e, x in zip(experts, w))
            events.append(RoutingEvent(pos, tok, tuple(sel)))
            t_global += 1
        instances.append(TraceInstance(f"r{seed}-{i}", "dom" + str(i % 2), tuple(events)))
    return TraceCorpus(shape, tuple(instances), markers)


def flat_tokens(corpus: TraceCorpus) -> list[tuple[str, frozenset]]:
    return [(ev.token, frozenset(k for k, _ in ev.selections)) for inst in corpus.instances for ev in inst.events]


def brute_counts(corpus: TraceCorpus):
    """(K, k, M, T) as plain dicts by direct enumeration."""
    rows = flat_tokens(corpus)
    K, k, M = {}, {}, {}
    for tok, keys in rows:
        if tok in corpus.markers:
            M[tok] = M.get(tok, 0) + 1
        for key in keys:
            K[key] = K.get(key, 0) + 1
            if tok in corpus.markers:
                k[(tok, key)] = k.get((tok, key), 0) + 1
    return K, k, M, len(rows)


def table_npmi(corpus: TraceCorpus, marker: str, key: ExpertKey) -> float:
    """nPMI from exact probability tables: PMI(x, y) / -log2 p(x, y)."""
    rows = flat_tokens(corpus)
    T = len(rows)
    p_x = Fraction(sum(1 for t, _ in rows if t == marker), T)
    p_y = Fraction(sum(1 for _, s in rows if key in s), T)
    p_xy = Fraction(sum(1 for t, s in rows if t == marker and key in s), T)
    if p_xy == 0:
        return -1.0
    pmi = math.log2(p_xy / (p_x * p_y))
    return pmi / -math.log2(p_xy)


def enumerate_pass_at_k(n: int, c: int, k: int) -> Fraction:
    """Fraction of all size-k subsets of n samples (first c correct) containing a correct one."""
    hits = total = 0
    for combo in itertools.combinations(range(n), k):
        total += 1
        hits += any(i < c for i in combo)
    return Fraction(hits, total)


def softmax_topk(logits, o: int) -> list[tuple[int, float]]:
    """Reference gate: softmax, take the o largest (lower index on ties), renormalize."""
    m = max(logits)
    ex = [math.exp(z - m) for z in logits]
    s = math.fsum(ex)
    p = [e / s for e in ex]
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:o]
    tot = math.fsum(p[i] for i in order)
    return [(i, p[i] / tot) for i in order]


def synthetic_block(seed: int, shape: ModelShape, n_events: int, planted: ExpertKey | None = None) -> TraceInstance:
    """One instance of random routing; ``planted`` is selected exactly at "<think>" tokens."""
    rng = np.random.default_rng(seed)
    markers = MarkerSet.default()
    vocab = list(markers.tokens) + list(FILLER)
    p = np.array([1.0] * len(markers) + [4.0] * len(FILLER))
    p /= p.sum()
    toks = rng.choice(len(vocab), size=n_events, p=p)
    w = 1.0 / shape.top_o
    events = []
    for pos, t in enumerate(toks):
        tok = vocab[int(t)]
        sel = []
        for layer in range(shape.n_layers):
            pool = np.arange(shape.n_experts)
            if planted is not None and layer == planted.layer:
                pool = pool[pool != planted.expert]
            experts = rng.choice(pool, size=shape.top_o, replace=False)
            if planted is not None and layer == planted.layer and tok == "<think>":
                experts[0] = planted.expert
            sel.extend((ExpertKey(layer, int(e)), w) for e in experts)
        events.append(RoutingEvent(pos, tok, tuple(sel)))
    return TraceInstance("@@@@@@@", "synthetic", tuple(events))


def write_large_trace(path, n_tokens: int, shape: ModelShape, planted: ExpertKey | None = None,
                      block: int = 1000, n_templates: int = 8) -> TraceCorpus:
    """Write ``n_tokens`` events as repeated instance templates; returns the templates.

    Instance ``j`` is template ``j % n_templates`` with id ``b<j>``, so exact
    counts follow from the templates and the repeat counts.
    """
    from moe_steer.trace import event_line, header_line

    assert n_tokens % block == 0
    templates = [synthetic_block(s, shape, block, planted) for s in range(n_templates)]
    texts = ["\n".join(event_line(t.instance_id, ev, t.domain) for ev in t.events) + "\n" for t in templates]
    with open(path, "w") as f:
        f.write(header_line(shape, MarkerSet.default()) + "\n")
        for j in range(n_tokens // block):
            f.write(texts[j % n_templates].replace("@@@@@@@", f"b{j:06d}"))
    return TraceCorpus(shape, tuple(templates), MarkerSet.default())
