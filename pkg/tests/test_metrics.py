import random

import pytest

from streamgraph.edge_table import EdgeTable, NodeRef, insert_edge
from streamgraph.metrics import (
    BucketHistory,
    DelayLedger,
    PerfSample,
    density,
    diversity_ratio,
    velocity_and_slope,
)

from oracles import graph_density


def _table(*edges, extra_nodes=()):
    table = EdgeTable()
    for key in extra_nodes:
        table.register_node(NodeRef("n", key))
    for start, end in edges:
        insert_edge(NodeRef("n", start), NodeRef("n", end), "e", {}, table)
    return table


# -- perf samples -----------------------------------------------------------------


def test_perf_sample_range_check():
    PerfSample(ts=0.0, cpu_user=0.0, mem_available=1)
    PerfSample(ts=0.0, cpu_user=100.0, mem_available=1)
    with pytest.raises(ValueError, match="out of range"):
        PerfSample(ts=0.0, cpu_user=100.1, mem_available=1)
    with pytest.raises(ValueError, match="out of range"):
        PerfSample(ts=0.0, cpu_user=-0.1, mem_available=1)


# -- density ----------------------------------------------------------------------


def test_density_two_nodes_one_edge():
    assert density(_table(("a", "b"))) == 1.0


def test_density_four_nodes_three_edges():
    table = _table(("a", "b"), ("b", "c"), ("c", "d"))
    assert density(table) == 0.5


def test_density_under_two_nodes_is_zero():
    assert density(EdgeTable()) == 0.0
    assert density(_table(extra_nodes=("solo",))) == 0.0


def test_density_clamped_for_saturated_directed_graph():
    # both directions between two nodes would score 2 unclamped
    assert density(_table(("a", "b"), ("b", "a"))) == 1.0


def test_density_matches_recount_oracle():
    rng = random.Random(5)
    for _ in range(30):
        n_keys = rng.randint(2, 30)
        edges = [(str(rng.randrange(n_keys)), str(rng.randrange(n_keys)))
                 for _ in range(rng.randint(1, 80))]
        table = _table(*edges)
        assert density(table) == pytest.approx(
            graph_density(table.n_nodes, table.n_edges))


# -- diversity --------------------------------------------------------------------


def test_first_bucket_is_all_new():
    history = BucketHistory(window=5)
    history.observe(_table(("a", "b")))
    assert diversity_ratio(history) == 1.0


def test_repeated_bucket_scores_zero():
    history = BucketHistory(window=1)
    history.observe(_table(("a", "b")))
    history.observe(_table(("a", "b")))
    assert diversity_ratio(history, window=1) == 0.0


def test_half_new_nodes_score_half():
    history = BucketHistory(window=4)
    history.observe(_table(extra_nodes=("c", "n0")))
    for i in range(1, 6):
        history.observe(_table(extra_nodes=("c", f"n{i}")))
    # last four buckets each introduced one of two nodes
    assert diversity_ratio(history, window=4) == 0.5


def test_zero_node_buckets_excluded():
    history = BucketHistory(window=3)
    history.observe(_table(("a", "b")))
    history.observe(EdgeTable())
    history.observe(_table(("a", "b")))
    # the empty middle bucket does not drag the mean
    assert diversity_ratio(history, window=3) == 0.5


def test_no_usable_buckets_means_max_diversity():
    history = BucketHistory(window=5)
    assert diversity_ratio(history) == 1.0
    history.observe(EdgeTable())
    assert diversity_ratio(history) == 1.0


def test_diversity_ignores_record_multiplicity():
    history1 = BucketHistory(window=2)
    history1.observe(_table(("a", "b")))
    history1.observe(_table(("a", "c")))
    history2 = BucketHistory(window=2)
    history2.observe(_table(("a", "b"), ("a", "b"), ("a", "b")))
    history2.observe(_table(("a", "c"), ("a", "c")))
    assert diversity_ratio(history1) == diversity_ratio(history2)


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        BucketHistory(window=0)
    history = BucketHistory(window=2)
    with pytest.raises(ValueError):
        diversity_ratio(history, window=0)


def test_new_node_window_slides():
    history = BucketHistory(window=1)
    history.observe(_table(extra_nodes=("a",)))
    history.observe(_table(extra_nodes=("b",)))
    # "a" fell out of the one-bucket window, so it counts as new again
    meta = history.observe(_table(extra_nodes=("a",)))
    assert meta.n_new_nodes == 1


# -- velocity and slope -------------------------------------------------------------


def test_flat_series():
    velocity, slope = velocity_and_slope([10, 10, 10])
    assert velocity == 0.0
    assert slope == pytest.approx(0.0, abs=1e-12)


def test_unit_ramp():
    velocity, slope = velocity_and_slope([0, 1, 2, 3])
    assert velocity == pytest.approx(1.0)
    assert slope == pytest.approx(1.0)


def test_velocity_uses_timestamps():
    velocity, _ = velocity_and_slope([0, 10], timestamps=[0, 4])
    assert velocity == pytest.approx(2.5)


def test_insufficient_samples():
    assert velocity_and_slope([]) == (None, None)
    assert velocity_and_slope([5]) == (None, None)


def test_zero_dt_velocity_is_none():
    velocity, slope = velocity_and_slope([1, 2], timestamps=[3, 3])
    assert velocity is None
    assert slope is None  # no time spread inside the window either


def test_length_mismatch_raises():
    with pytest.raises(ValueError, match="equal length"):
        velocity_and_slope([1, 2], timestamps=[1])


def test_slope_window_is_trailing():
    values = [0] * 10 + [5, 10, 15]
    _, slope = velocity_and_slope(values, window=3)
    assert slope == pytest.approx(5.0)


def test_planted_slope_recovered():
    rng = random.Random(17)
    ts = list(range(50))
    values = [2.5 * t + rng.gauss(0, 0.1) for t in ts]
    _, slope = velocity_and_slope(values, ts, window=50)
    assert 2.4 <= slope <= 2.6


# -- delay ledger ----------------------------------------------------------------


def test_empty_ledger_total_is_zero():
    assert DelayLedger().total_delay() == 0.0


def test_ledger_sums_components():
    ledger = DelayLedger()
    ledger.record_delay(0, 1.0, 0.5)
    ledger.record_delay(1, 2.0, 0.0)
    assert ledger.total_delay() == pytest.approx(3.5)


def test_ledger_rejects_negative_components():
    ledger = DelayLedger()
    with pytest.raises(ValueError, match="must be >= 0"):
        ledger.record_delay(0, -0.1, 0.0)
    with pytest.raises(ValueError, match="must be >= 0"):
        ledger.record_delay(0, 0.0, -1.0)


def test_ledger_keyed_by_bucket():
    ledger = DelayLedger()
    ledger.record_delay(3, 1.0, 1.0)
    ledger.record_delay(3, 0.25, 0.25)
    assert ledger.total_delay() == pytest.approx(0.5)
