import io
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from moe_steer.evaluation import (
    RANDOM_ARM,
    GenerationMetrics,
    MetricsSummary,
    compare_report,
    evaluate,
    mean_pass_at_k,
    measure,
    pass_at_k,
    pass_at_k_exact,
    random_experts,
    read_sweep,
    recovery,
    render_comparison,
    render_sweep,
    summarize,
    sweep,
    think_span,
    thought_count,
    write_sweep,
)
from moe_steer.npmi import CognitiveExpertSet, count_stats, score_experts
from moe_steer.sim import PlantSpec, build_model, make_tasks, plant, simulate
from moe_steer.trace import ExpertKey

from oracles import enumerate_pass_at_k

E = [ExpertKey(0, i) for i in range(4)]


# -- metrics ----------------------------------------------------------------------


def test_think_span_and_thoughts():
    toks = ["<think>", "w1", "Alternatively", "w2", "Alternatively", "</think>", "A3", "<eos>"]
    assert think_span(toks) == (0, 5, True)
    assert thought_count(toks) == 3
    assert thought_count(["w0", "A1"]) == 0
    assert thought_count(["<think>", "w0", "Alternatively"]) == 2
    assert thought_count(toks, switch_markers={"w1", "w2"}) == 3


token_lists = st.lists(st.sampled_from(["w0", "Alternatively", "A1", "Wait"]), max_size=10)


@given(token_lists, token_lists, token_lists)
def test_thought_count_ignores_outside_span(inner, before, after):
    before = [t for t in before if t != "Alternatively"] + ["w0"]
    base = ["<think>"] + inner + ["</think>"]
    assert thought_count(before + base + after) == thought_count(base)


def test_measure_correctness():
    toks = ["<think>", "w1", "</think>", "A3", "<eos>"]
    m = measure(toks, "A3")
    assert m.correct and m.answer == ("A3",) and m.token_count == 5 and m.think_span_closed
    assert measure(toks, "A4").correct is False
    assert measure(["<think>", "A3"], "A3").correct is False
    assert measure(toks).correct is None


def test_summarize():
    ms = [GenerationMetrics(10, 2, True, True, ("A1",), True), GenerationMetrics(20, 1, True, True, ("A2",), False)]
    s = summarize(ms)
    assert s == MetricsSummary(2, 50.0, 1.5, 15.0)
    assert math.isnan(summarize([]).accuracy)


# -- pass@k ---------------------------------------------------------------------


def test_pass_at_k_examples():
    assert pass_at_k(16, 16, 1) == 1.0
    assert pass_at_k(16, 0, 8) == 0.0
    assert pass_at_k(2, 1, 1) == 0.5


def test_pass_at_k_errors():
    with pytest.raises(ValueError):
        pass_at_k(4, 1, 5)
    with pytest.raises(ValueError):
        pass_at_k(4, 5, 1)
    with pytest.raises(ValueError):
        pass_at_k(4, 1, 0)


def test_pass_at_k_against_enumeration_small():
    for n in range(1, 9):
        for c in range(n + 1):
            for k in range(1, n + 1):
                assert pass_at_k_exact(n, c, k) == enumerate_pass_at_k(n, c, k)


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, n))))
def test_pass_at_k_monotone(case):
    n, c, k = case
    v = pass_at_k_exact(n, c, k)
    assert 0 <= v <= 1
    if k < n:
        assert pass_at_k_exact(n, c, k + 1) >= v
    if c < n:
        assert pass_at_k_exact(n, c + 1, k) >= v
    assert (pass_at_k_exact(n, c, n) == 1) == (c >= 1)


def test_mean_pass_at_k():
    assert mean_pass_at_k([(2, 1), (2, 2)], 1) == 0.75
    with pytest.raises(ValueError):
        mean_pass_at_k([], 1)


# -- recovery --------------------------------------------------------------------


def test_recovery_examples():
    r = recovery(CognitiveExpertSet((E[0], E[1])), {E[0], E[1]})
    assert (r.precision_at_l, r.recall) == (1.0, 1.0)
    r = recovery(CognitiveExpertSet((E[2], E[3])), {E[0], E[1]})
    assert (r.precision_at_l, r.recall) == (0.0, 0.0)
    r = recovery(CognitiveExpertSet((E[0], E[1])), {E[0]})
    assert (r.precision_at_l, r.recall) == (0.5, 1.0)


# -- sweep ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def planted():
    model = plant(build_model(0), PlantSpec((2, 5), 20.0))
    tasks = make_tasks(40, 0)
    report = score_experts(count_stats(simulate(model, tasks)))
    return model, tasks, report


def test_random_experts_excludes_and_is_seeded(planted):
    model, _, report = planted
    top = report.top(5).experts
    a = random_experts(model, top, 2, 0)
    assert a == random_experts(model, top, 2, 0)
    assert len(set(a)) == 2 and not set(a) & set(top)


def test_sweep_shape_and_baseline_row(planted):
    model, tasks, report = planted
    mults = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512]
    res = sweep(model, tasks[:10], mults, [1, 2, 3, 4, 5], report, random_arm=True)
    assert res.arms == ["Top1", "Top2", "Top3", "Top4", "Top5", RANDOM_ARM]
    assert len(res.cells) == 10 * 6
    for arm in res.arms:
        assert res.cell(1, arm) == res.baseline
    assert res.arm_experts["Top1"] == [ExpertKey(2, 5)]


def test_sweep_requires_unit_multiplier(planted):
    model, tasks, report = planted
    with pytest.raises(ValueError, match="include 1"):
        sweep(model, tasks, [2, 4], [1], report)


def test_planted_arm_beats_random_at_beta4(planted):
    model, tasks, report = planted
    res = sweep(model, tasks, [1, 4], [1], report, random_arm=True, seed=0)
    assert res.cell(4, "Top1").accuracy >= res.cell(4, RANDOM_ARM).accuracy


def test_sweep_deterministic_and_round_trip(planted):
    model, tasks, report = planted
    a = sweep(model, tasks[:8], [1, 64], [1, 2], report, renormalize=True)
    b = sweep(model, tasks[:8], [1, 64], [1, 2], report, renormalize=True)
    assert a == b
    buf = io.StringIO()
    write_sweep(a, buf)
    back = read_sweep(io.StringIO(buf.getvalue()))
    assert back == a


def test_evaluate_matches_measure(planted):
    model, tasks, _ = planted
    ms = evaluate(model, tasks[:3])
    assert len(ms) == 3 and all(m.think_span_found for m in ms)


# -- comparison tables ----------------------------------------------------------------


def test_compare_identical_zero_deltas():
    s = MetricsSummary(30, 73.3, 12.0, 9219.0)
    assert compare_report(s, s).deltas == {"accuracy": 0.0, "thoughts": 0.0, "tokens": 0.0}


def test_compare_empty_benchmark():
    with pytest.raises(ValueError, match="no instances"):
        compare_report(MetricsSummary(0, math.nan, math.nan, math.nan), MetricsSummary(1, 1, 1, 1), "AIME24")


def test_render_formats():
    c = compare_report(MetricsSummary(30, 73.3, 12.0, 9219.0), MetricsSummary(30, 83.3, 10.2, 8317.0), "AIME24")
    md = render_comparison(c, "md")
    assert "| AIME24 | delta | +10.0 | -1.8 | -902 |" in md
    assert "| AIME24 | baseline | 73.3 | 12.0 | 9,219 |" in md
    tsv = render_comparison(c, "tsv")
    assert tsv.splitlines()[0].split("\t") == ["Benchmark", "Method", "Accuracy", "Thoughts", "#Tokens"]
    with pytest.raises(ValueError):
        render_comparison(c, "html")


def test_render_sweep_table(planted):
    model, tasks, report = planted
    res = sweep(model, tasks[:4], [1, 2], [1], report, random_arm=False)
    lines = render_sweep(res, "accuracy", "tsv").splitlines()
    assert lines[0] == "Multiplier\tTop1"
    assert [l.split("\t")[0] for l in lines[1:]] == ["baseline", "1", "2"]
    with pytest.raises(ValueError):
        render_sweep(res, "latency")
