import math

import pytest
from hypothesis import given, settings, strategies as st

from spotpipe.metrics import (PRICES, RunResult, buckets_csv, cost_rate, gnuplot_panels, integrate_steps,
                              summarize_batch, summary_csv, throughput, time_buckets, value)

HOUR = 3600.0


def run(samples=1000, wall=100.0, nodes=4, cls="spot", **kw):
    return RunResult(samples, wall, {cls: nodes * wall}, **kw)


def test_throughput():
    assert throughput(run(samples=0)) == 0
    assert throughput(run(samples=500, wall=4.0)) == 125.0
    with pytest.raises(ValueError):
        throughput(RunResult(0, 0.0))


def test_cost_examples():
    assert cost_rate(run(nodes=32, cls="demand")) == pytest.approx(97.92)
    assert cost_rate(run(nodes=46)) == pytest.approx(42.228)
    assert round(cost_rate(run(nodes=46)), 2) == 42.23
    assert cost_rate(run(nodes=0)) == 0
    mixed = RunResult(0, HOUR, {"spot": 2 * HOUR, "demand": HOUR})
    assert cost_rate(mixed) == pytest.approx(2 * PRICES["spot"] + PRICES["demand"])


def test_value_examples():
    assert round(value(118, 97.92), 2) == 1.21
    assert value(0, 10) == 0
    assert round(value(87.99, 41.11), 2) == 2.14
    assert value(87.99, 41.11) == pytest.approx(2.10, rel=0.03)
    with pytest.raises(ValueError):
        value(1, 0)


def test_result_validation_and_round_trip():
    with pytest.raises(ValueError):
        RunResult(-1, 10.0)
    r = run(fatal_restarts=2, paused_s=3.5)
    assert RunResult.from_dict(r.to_dict()) == r
    assert r.time_split["paused"] == 3.5


def test_single_result_summary_equals_result():
    r = run(samples=4200, wall=3600.0, nodes=44, preemption_count=9, mean_live_nodes=44.0)
    s = summarize_batch([r])
    assert s.throughput == throughput(r)
    assert s.cost_rate == pytest.approx(cost_rate(r))
    assert s.value == pytest.approx(throughput(r) / cost_rate(r))
    assert s.preemption_count == 9 and s.mean_live_nodes == 44.0
    assert s.pooled_interval_s == 400.0
    assert s.pooled_live_nodes == pytest.approx(44.0)
    with pytest.raises(ValueError):
        summarize_batch([])


results_st = st.lists(
    st.builds(run, st.integers(0, 10_000), st.floats(10.0, 1e5), st.integers(1, 48),
              preemption_count=st.integers(0, 50)),
    min_size=1, max_size=8)


@settings(max_examples=100)
@given(results_st, st.randoms())
def test_summary_is_permutation_invariant(results, rnd):
    shuffled = list(results)
    rnd.shuffle(shuffled)
    a, b = summarize_batch(results), summarize_batch(shuffled)
    assert (a.throughput, a.cost_rate, a.value, a.pooled_interval_s) == \
        (b.throughput, b.cost_rate, b.value, b.pooled_interval_s)
    assert a.means == b.means


@settings(max_examples=100)
@given(results_st, st.sampled_from([0.5, 2.0, 10.0]))
def test_value_scales_with_prices_only(results, factor):
    base = summarize_batch(results)
    scaled = summarize_batch(results, prices={k: v * factor for k, v in PRICES.items()})
    assert scaled.cost_rate == pytest.approx(base.cost_rate * factor)
    assert scaled.value == pytest.approx(base.value / factor)
    assert scaled.throughput == base.throughput


def test_value_uses_mean_throughput_and_mean_cost():
    rs = [run(samples=100, wall=10.0, nodes=10), run(samples=900, wall=10.0, nodes=30)]
    s = summarize_batch(rs)
    T = (10 + 90) / 2
    C = (10 + 30) / 2 * PRICES["spot"]
    assert s.value == pytest.approx(T / C)


def test_summary_csv_has_one_row_per_summary():
    rs = [run(preemption_count=3)]
    text = summary_csv([summarize_batch(rs, label="p=0.1"), summarize_batch(rs, label="p=0.2")])
    lines = text.splitlines()
    assert lines[0].startswith("label,replicas,preemptions,interval_h")
    assert [x.split(",")[0] for x in lines[1:]] == ["p=0.1", "p=0.2"]


def test_integrate_steps():
    assert integrate_steps([(0, 4), (10, 2), (30, 5)], 40) == 4 * 10 + 2 * 20 + 5 * 10
    assert integrate_steps([(0, 3)], 0) == 0


def test_time_buckets():
    ns = 1_000_000_000
    rows = time_buckets([(0, 4), (5 * ns, 2)], [(1 * ns, 10), (6 * ns, 20), (9 * ns, 5)], 10 * ns, 5.0, price=1.0)
    assert [r["live_nodes"] for r in rows] == [4.0, 2.0]
    assert [r["throughput"] for r in rows] == [2.0, 5.0]
    assert [r["cost_per_h"] for r in rows] == [4.0, 2.0]
    text = buckets_csv(rows)
    assert text.splitlines()[0] == "bucket_start_s,live_nodes,throughput,cost_per_h"
    panels = gnuplot_panels(rows)
    assert set(panels) == {"live_nodes", "throughput", "cost_per_h"}
    assert panels["live_nodes"].splitlines()[1] == "0.000000 4.000000"


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(1, 10**10), st.integers(0, 48)), max_size=20), st.integers(1, 10**10))
def test_bucket_areas_sum_to_integral(changes, end):
    first = {}
    for t, level in changes:
        first.setdefault(t, level)
    levels = [(0, 48)] + sorted((t, v) for t, v in first.items() if t < end)
    rows = time_buckets(levels, [], end, 0.7)
    width = round(0.7e9)
    total = 0.0
    for i, r in enumerate(rows):
        span = min(width, end - i * width)
        total += r["live_nodes"] * span
    assert math.isclose(total, integrate_steps(levels, end), rel_tol=1e-9)
