import csv

import numpy as np
import pytest
from scipy import stats

from incnas.evaluation import (
    EpisodeRecord,
    best_after_queries,
    bootstrap_ci,
    charge_queries,
    generate_initial_set,
    group_runs,
    improvement_stats,
    query_events,
    read_initial_set,
    read_records,
    run_evaluation,
    write_curve_csv,
    write_histogram_csv,
    write_initial_set,
    write_records,
)
from incnas.oracle import Metrics, SyntheticOracle, TabularOracle
from incnas.space import NB101, with_caps

MICRO = with_caps(NB101, max_vertices=5, max_edges=6)


def rec(initial, final, algorithm="walk", run=0, episode=0, steps=(), queries=1):
    return EpisodeRecord(algorithm, run, episode, 0, "i", initial, "f", final, list(steps), queries)


def local_steps(counts, accs):
    return [{"digest": "x", "acc": a, "action": 1, "candidates": c} for c, a in zip(counts, accs)]


def test_charge_queries():
    assert charge_queries("local", local_steps([25, 25, 10], [0.1, 0.2, 0.3])) == 60
    assert charge_queries("walk", local_steps([25] * 9, [0.1] * 9)) == 1
    assert charge_queries("qagent", []) == 1
    assert charge_queries("local", local_steps([25], [0.5])) == 25


def test_constant_improvements():
    st = improvement_stats([rec(0.8, 0.83) for _ in range(5)])
    assert st.median == pytest.approx(0.03)
    assert all(lo == pytest.approx(hi) for lo, hi in st.intervals.values())
    assert st.skew == 0.0


def test_symmetric_improvements():
    st = improvement_stats([rec(0.9, 0.9 + d) for d in (-0.01, 0.0, 0.01)])
    assert st.median == pytest.approx(0.0, abs=1e-12)
    for lo, hi in st.intervals.values():
        assert lo == pytest.approx(-hi)


def test_stats_invariants():
    rng = np.random.default_rng(0)
    d = rng.normal(0.01, 0.05, size=300)
    recs = [rec(0.5, 0.5 + x) for x in d]
    st = improvement_stats(recs)
    assert st.counts.sum() + st.below + st.above == len(recs)
    assert st.skew == pytest.approx(stats.skew(d, bias=False), rel=1e-9)
    shuffled = improvement_stats([recs[i] for i in rng.permutation(len(recs))])
    assert shuffled.median == st.median and shuffled.skew == st.skew
    assert np.array_equal(shuffled.counts, st.counts)
    assert st.intervals[95][0] <= st.intervals[80][0] <= st.intervals[50][0] <= st.median


def test_stats_need_two_records():
    with pytest.raises(ValueError):
        improvement_stats([rec(0.8, 0.9)])


def test_running_max_curve():
    runs = [[rec(0.5, a, episode=i) for i, a in enumerate([0.90, 0.95, 0.92])]]
    curve = best_after_queries(runs, [0, 1, 2, 3])
    assert curve.budgets.tolist() == [1, 2, 3]
    assert curve.values[0].tolist() == [0.90, 0.95, 0.95]


def test_local_search_curve_jumps_at_first_payment():
    r = rec(0.80, 0.90, algorithm="local", steps=local_steps([50, 40], [0.80, 0.88]), queries=90)
    events = query_events([r])
    assert events == [(50, 0.88), (90, 0.90)]
    curve = best_after_queries([[r], [r]], range(1, 100))
    assert curve.budgets[0] == 50
    assert curve.mean[curve.budgets.tolist().index(89)] == 0.88
    assert curve.mean[-1] == 0.90


def test_curves_are_monotone():
    rng = np.random.default_rng(1)
    runs = [[rec(0.5, float(a), episode=i) for i, a in enumerate(rng.uniform(0.8, 0.95, 40))] for _ in range(4)]
    curve = best_after_queries(runs, range(1, 41), resamples=500)
    assert np.all(np.diff(curve.values, axis=1) >= 0)
    assert np.all(curve.ci_lo <= curve.mean + 1e-12) and np.all(curve.mean <= curve.ci_hi + 1e-12)


def test_bootstrap_constant_and_normal():
    lo, hi = bootstrap_ci([0.7] * 20)
    assert lo == hi == pytest.approx(0.7)
    x = np.random.default_rng(5).normal(size=10_000)
    lo, hi = bootstrap_ci(x, rng=np.random.default_rng(6))
    assert hi - lo == pytest.approx(2 * 1.96 / 100, rel=0.1)
    assert lo < x.mean() < hi
    with pytest.raises(ValueError):
        bootstrap_ci([1.0])


def test_bootstrap_coverage():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(1000):
        lo, hi = bootstrap_ci(rng.normal(size=50), rng=rng)
        hits += lo <= 0.0 <= hi
    assert 0.93 <= hits / 1000 <= 0.97


def test_run_evaluation_protocol():
    oracle = SyntheticOracle(MICRO)
    init = generate_initial_set(MICRO, 12, seed=3)
    local = run_evaluation("local", init, MICRO, oracle, seed=1, neighbor_cap=20)
    for r in local:
        accs = [s["acc"] for s in r.steps] + [r.final_acc]
        moves = accs[:-1] if r.steps[-1]["action"] == 0 else accs
        assert all(a < b for a, b in zip(moves, moves[1:]))
        assert r.queries == sum(s["candidates"] for s in r.steps)
    rand = run_evaluation("random", init, MICRO, oracle, seed=1)
    assert all(r.queries == 1 and r.steps == [] for r in rand)
    walk = run_evaluation("walk", init, MICRO, oracle, seed=1, max_steps=32)
    assert all(len(r.steps) <= 32 and r.queries == 1 for r in walk)
    again = run_evaluation("walk", init, MICRO, oracle, seed=1, max_steps=32)
    assert [r.to_json() for r in walk] == [r.to_json() for r in again]


def test_oracle_failures_are_recorded():
    init = generate_initial_set(MICRO, 6, seed=0)
    syn = SyntheticOracle(MICRO)
    table = TabularOracle({a.digest: syn.query(a) for a in init[:3]})
    table.entries[init[3].digest] = Metrics(0.5)
    recs = run_evaluation("local", init, MICRO, table, seed=0)
    assert len(recs) == 6
    assert any(not r.ok for r in recs)
    assert all(r.error.startswith("missing oracle entry") for r in recs if not r.ok)


def test_record_and_initial_set_io(tmp_path):
    init = generate_initial_set(MICRO, 5, seed=2)
    write_initial_set(init, tmp_path / "init.txt")
    assert [a.digest for a in read_initial_set(tmp_path / "init.txt")] == [a.digest for a in init]
    recs = run_evaluation("walk", init, MICRO, SyntheticOracle(MICRO), seed=4)
    write_records(recs, tmp_path / "r.jsonl")
    back = read_records(tmp_path / "r.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]
    assert list(group_runs(back)) == ["walk"]


def test_csv_headers(tmp_path):
    recs = [rec(0.8, 0.8 + d, episode=i) for i, d in enumerate([-0.2, 0.01, 0.02, 0.3])]
    st = improvement_stats(recs)
    write_histogram_csv(st, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_lo", "bin_hi", "count"]
    assert sum(int(r[2]) for r in rows[1:]) == 4
    assert rows[1][0] == "-inf" and rows[-1][1] == "inf"
    curve = best_after_queries([recs, recs], [1, 2, 3])
    write_curve_csv(curve, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["budget", "mean", "ci_lo", "ci_hi"] and len(rows) == 4
