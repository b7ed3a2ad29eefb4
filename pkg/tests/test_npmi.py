import io
import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from moe_steer.npmi import (
    CognitiveExpertSet,
    CountStats,
    UndefinedNpmiError,
    combined_score,
    count_stats,
    merge_stats,
    npmi,
    npmi_array,
    rank_experts,
    read_expert_set,
    read_report,
    score_experts,
    write_expert_set,
    write_report,
)
from moe_steer.sim import build_model, make_tasks, simulate
from moe_steer.trace import ExpertKey, MarkerSet, ModelShape, RoutingEvent, RoutingTable, TraceCorpus, TraceInstance

from oracles import brute_counts, random_corpus, table_npmi

DEFAULT = MarkerSet.default()


def _planted_corpus(target=ExpertKey(0, 5), n=10, shape=ModelShape(1, 8, 2)):
    """Each instance: <think>, 3 filler tokens, </think>. ``target`` fires only on <think>."""
    insts = []
    others = [e for e in range(shape.n_experts) if e != target.expert]
    for i in range(n):
        evs = []
        for p, tok in enumerate(["<think>", "w0", "w1", "w2", "</think>"]):
            if tok == "<think>":
                pair = [target.expert, others[p % len(others)]]
            else:
                pair = [others[(i + p) % len(others)], others[(i + p + 1) % len(others)]]
            evs.append(RoutingEvent(p, tok, tuple((ExpertKey(target.layer, e), 0.5) for e in pair)))
        insts.append(TraceInstance(f"i{i}", "math", tuple(evs)))
    return TraceCorpus(shape, tuple(insts), DEFAULT)


# -- counting -------------------------------------------------------------------


def test_planted_counts():
    stats = count_stats(_planted_corpus())
    key = ExpertKey(0, 5)
    assert stats.co_activations(key, "<think>") == 10
    assert stats.activations(key) == 10
    assert stats.occurrences("<think>") == 10
    assert stats.T == 50


def test_empty_corpus_stats():
    stats = count_stats(TraceCorpus(ModelShape(2, 3, 1)))
    assert stats.T == 0
    assert not stats.K.any() and not stats.k.any() and not stats.M.any()


def test_simulator_counts_match_brute_force():
    corpus = simulate(build_model(7), make_tasks(20, 7))
    stats = count_stats(corpus)
    K, k, M, T = brute_counts(corpus)
    assert stats.T == T
    for key, n in K.items():
        assert stats.activations(key) == n
    assert int(stats.K.sum()) == sum(K.values())
    for (tok, key), n in k.items():
        assert stats.co_activations(key, tok) == n
    assert int(stats.k.sum()) == sum(k.values())
    for tok in DEFAULT.tokens:
        assert stats.occurrences(tok) == M.get(tok, 0)


@pytest.mark.parametrize("seed", range(10))
def test_count_invariants(seed):
    corpus = random_corpus(seed)
    stats = count_stats(corpus)
    s = corpus.shape
    assert int(stats.K.sum()) == stats.T * s.top_o * s.n_layers
    assert np.all(stats.k <= stats.K[None, :])
    assert np.all(stats.k <= stats.M[:, None])
    assert (stats.K >= 0).all() and (stats.k >= 0).all()


def test_domain_filter():
    corpus = random_corpus(4, n_instances=4)
    assert count_stats(corpus, domain="dom0") == count_stats(corpus.select("dom0"))
    with pytest.raises(ValueError):
        count_stats(RoutingTable.from_corpus(corpus), domain="dom0")


def test_merge_identity_and_commutativity():
    a = count_stats(random_corpus(2))
    b = count_stats(TraceCorpus(a.shape, random_corpus(2).instances[:1], a.markers))
    empty = CountStats.empty(a.shape, a.markers)
    assert merge_stats(a, empty) == a
    assert merge_stats(a, b) == merge_stats(b, a)


def test_merge_shape_mismatch():
    a = CountStats.empty(ModelShape(1, 2, 1), DEFAULT)
    b = CountStats.empty(ModelShape(1, 3, 1), DEFAULT)
    with pytest.raises(ValueError, match="shape"):
        merge_stats(a, b)


def test_fifty_instance_five_shards():
    corpus = simulate(build_model(1), make_tasks(50, 1))
    parts = [TraceCorpus(corpus.shape, corpus.instances[i::5], corpus.markers) for i in range(5)]
    assert reduce(merge_stats, [count_stats(p) for p in parts]) == count_stats(corpus)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 4))
def test_sharded_counting_equals_single_pass(seed, shards, workers):
    corpus = random_corpus(seed)
    assert count_stats(corpus, workers=workers, shards=shards) == count_stats(corpus)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_merge_associative(s1, s2, s3):
    shape = ModelShape(1, 5, 2)
    stats = []
    for s in (s1, s2, s3):
        c = random_corpus(s)
        stats.append(count_stats(TraceCorpus(shape, c.instances, c.markers)) if c.shape == shape else CountStats.empty(shape, DEFAULT))
    a, b, c = stats
    assert merge_stats(merge_stats(a, b), c) == merge_stats(a, merge_stats(b, c))


# -- nPMI -----------------------------------------------------------------------


def test_npmi_examples():
    assert npmi(10, 10, 10, 1000) == 1.0
    assert npmi(0, 7, 10, 1000) == -1.0
    # log2(0.005 / (0.01 * 0.05)) / -log2(0.005)
    assert npmi(5, 50, 10, 1000) == pytest.approx(0.434587, abs=1e-6)
    assert npmi(5, 50, 10, 1000) == pytest.approx(math.log2(10) / -math.log2(0.005), abs=1e-15)


def test_npmi_undefined_and_bad_counts():
    with pytest.raises(UndefinedNpmiError):
        npmi(20, 20, 20, 20)
    with pytest.raises(ValueError):
        npmi(5, 4, 10, 100)
    with pytest.raises(ValueError):
        npmi(1, 1, 1, 0)


counts = st.integers(1, 5000).flatmap(
    lambda T: st.tuples(st.just(T), st.integers(1, T), st.integers(1, T)).flatmap(
        lambda t: st.tuples(st.integers(0, min(t[1], t[2])), st.just(t[1]), st.just(t[2]), st.just(t[0]))
    )
)


@settings(max_examples=400)
@given(counts)
def test_npmi_range_and_unit_iff(c):
    k, K, M, T = c
    assume(k < T)
    v = npmi(k, K, M, T)
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12
    if k == K == M:
        assert v == 1.0
    elif k > 0:
        assert v < 1.0


@settings(max_examples=400)
@given(counts)
def test_npmi_strictly_increasing_in_k(c):
    _, K, M, T = c
    hi = min(K, M)
    assume(hi >= 2 and hi < T)
    vals = [npmi(k, K, M, T) for k in range(1, hi + 1)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_npmi_array_matches_scalar():
    rng = np.random.default_rng(0)
    T = 500
    K = rng.integers(1, T, 200)
    M = rng.integers(1, T, 200)
    k = np.array([rng.integers(0, min(a, b) + 1) for a, b in zip(K, M)])
    got = npmi_array(k, K, M, T)
    want = [npmi(int(a), int(b), int(c), T) for a, b, c in zip(k, K, M)]
    assert got.tolist() == want


@pytest.mark.parametrize("seed", range(25))
def test_oracle_equivalence(seed):
    corpus = random_corpus(seed)
    report = score_experts(count_stats(corpus))
    for e in report.entries:
        for marker in corpus.markers.tokens:
            assert abs(e.npmi[marker] - table_npmi(corpus, marker, e.key)) <= 1e-12


# -- combined score and ranking -----------------------------------------------------


def test_combined_score_examples():
    assert combined_score({"<think>": 0.8, "</think>": 0.5, "Alternatively": 0.1}, DEFAULT) == pytest.approx(0.2, abs=1e-15)
    assert combined_score({"<think>": 0, "</think>": 0, "Alternatively": 0}, DEFAULT) == 0
    assert combined_score({"<think>": 1, "</think>": -1, "Alternatively": -1}, DEFAULT) == 3.0
    with pytest.raises(KeyError):
        combined_score({"<think>": 1.0}, DEFAULT)


def test_planted_expert_ranked_first():
    target = ExpertKey(3, 7)
    corpus = _planted_corpus(target, shape=ModelShape(4, 8, 2))
    report, top = rank_experts(count_stats(corpus), l=2)
    assert top.experts[0] == target
    assert report.entries[0].npmi["<think>"] == 1.0
    assert report.entries[0].combined == 3.0


def test_tie_break_by_key():
    evs = [
        RoutingEvent(0, "<think>", ((ExpertKey(1, 2), 0.5), (ExpertKey(1, 0), 0.5))),
        RoutingEvent(1, "w0", ((ExpertKey(1, 1), 0.5), (ExpertKey(1, 3), 0.5))),
    ]
    corpus = TraceCorpus(ModelShape(2, 4, 2), (TraceInstance("a", "", tuple(evs)),))
    report = score_experts(count_stats(corpus))
    assert report.ranked_keys() == [ExpertKey(1, 0), ExpertKey(1, 2), ExpertKey(1, 1), ExpertKey(1, 3)]
    assert [e.rank for e in report.entries] == [1, 2, 3, 4]


def test_l_exceeds_scored():
    stats = count_stats(_planted_corpus())
    with pytest.raises(ValueError, match=r"l=99 exceeds the 8 scored"):
        rank_experts(stats, l=99)


def test_custom_markers_must_be_counted():
    stats = count_stats(_planted_corpus())
    with pytest.raises(KeyError):
        score_experts(stats, MarkerSet.single("Wait"))
    single = score_experts(stats, MarkerSet.single("<think>"))
    assert single.entries[0].combined == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_report_invariants_and_order_independence(seed, rnd):
    corpus = random_corpus(seed)
    report = score_experts(count_stats(corpus))
    assert sorted(e.rank for e in report.entries) == list(range(1, len(report) + 1))
    for a, b in zip(report.entries, report.entries[1:]):
        assert a.combined > b.combined or (a.combined == b.combined and a.key < b.key)
    shuffled = list(corpus.instances)
    rnd.shuffle(shuffled)
    again = score_experts(count_stats(TraceCorpus(corpus.shape, tuple(shuffled), corpus.markers)))
    assert again.entries == report.entries


def test_report_file_round_trip():
    report = score_experts(count_stats(random_corpus(8)))
    buf = io.StringIO()
    write_report(report, buf)
    back = read_report(io.StringIO(buf.getvalue()))
    assert back.ranked_keys() == report.ranked_keys()
    for a, b in zip(back.entries, report.entries):
        assert abs(a.combined - b.combined) <= 1e-11 * max(1.0, abs(b.combined))
    buf2 = io.StringIO()
    write_report(back, buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_expert_set_round_trip():
    s = CognitiveExpertSet((ExpertKey(39, 182), ExpertKey(29, 126)), "math")
    buf = io.StringIO()
    write_expert_set(s, buf)
    assert read_expert_set(io.StringIO(buf.getvalue())) == s
    with pytest.raises(ValueError):
        CognitiveExpertSet.from_json({"l": 3, "experts": [[0, 1]]})
