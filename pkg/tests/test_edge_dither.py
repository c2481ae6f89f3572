import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edagcn.edge_dither import (
    DitherConfig,
    DitheredGraphSet,
    EdgeEventCounts,
    count_edge_events,
    dither,
    edge_restore_probability,
    load_graph_set,
    monte_carlo_recovery,
    neighborhood_recovery_probability,
    per_pair_union_probability,
    save_graph_set,
)
from edagcn.errors import BoundsError, ShapeError, ValidationError
from edagcn.graph_core import Graph

K3 = Graph(3, [(0, 1), (0, 2), (1, 2)])
probs = st.floats(0.01, 0.99)


class TestConfig:
    @pytest.mark.parametrize("q1,q2,i", [(-0.1, 0.5, 1), (0.5, 1.1, 1), (0.5, 0.5, 0), (math.nan, 0.5, 1)])
    def test_rejects(self, q1, q2, i):
        with pytest.raises(ValidationError):
            DitherConfig(q1, q2, i)


class TestDither:
    def test_keep_all(self):
        g = Graph(5, [(0, 1), (2, 4)])
        gs = dither(g, DitherConfig(1.0, 1.0, 4, seed=3))
        assert len(gs) == 4 and all(d == g for d in gs.graphs)

    def test_drop_all(self):
        gs = dither(K3, DitherConfig(0.0, 1.0, 5))
        assert all(d.n_edges == 0 for d in gs.graphs)

    def test_insert_all(self):
        gs = dither(Graph(4), DitherConfig(1.0, 0.0, 2))
        assert all(d.n_edges == 6 for d in gs.graphs)

    def test_k3_keep_rate(self):
        gs = dither(K3, DitherConfig(0.9, 1.0, 10_000, seed=0))
        counts = np.zeros(3)
        for d in gs.graphs:
            counts += np.isin(K3.edge_keys, d.edge_keys)
        assert np.all(np.abs(counts / 10_000 - 0.9) <= 3 * math.sqrt(0.09 / 10_000))

    def test_deterministic(self):
        g = Graph(30, [(i, (i * 7 + 3) % 30) for i in range(30) if i != (i * 7 + 3) % 30])
        cfg = DitherConfig(0.8, 0.95, 6, seed=11)
        assert dither(g, cfg).graphs == dither(g, cfg).graphs

    def test_seed_changes_output(self):
        g = Graph(30, [(0, 1), (2, 3)])
        a = dither(g, DitherConfig(0.5, 0.9, 3, seed=0)).graphs
        b = dither(g, DitherConfig(0.5, 0.9, 3, seed=1)).graphs
        assert a != b

    def test_graphs_are_independent_streams(self):
        # graph i depends only on (seed, i), so a longer set extends a shorter one
        g = Graph(20, [(0, 1), (5, 9)])
        short = dither(g, DitherConfig(0.7, 0.9, 2, seed=4)).graphs
        long = dither(g, DitherConfig(0.7, 0.9, 5, seed=4)).graphs
        assert long[:2] == short

    def test_set_requires_common_n(self):
        with pytest.raises(ShapeError):
            DitheredGraphSet.from_graphs([Graph(3), Graph(4)])


class TestClosedForms:
    def test_spurious(self):
        assert edge_restore_probability("spurious_edge", 0.9, 1.0, 10) == pytest.approx(0.6513215599, abs=1e-10)

    def test_spurious_never_dropped(self):
        assert edge_restore_probability("spurious_edge", 1.0, 0.5, 7) == 0.0

    def test_missing(self):
        assert edge_restore_probability("missing_edge", 0.9, 0.999, 10) == pytest.approx(1 - 0.999**10, rel=1e-12)
        assert edge_restore_probability("missing_edge", 0.9, 0.999, 10) == pytest.approx(0.009955, abs=5e-7)

    def test_unknown_case(self):
        with pytest.raises(ValidationError):
            edge_restore_probability("kept_edge", 0.9, 0.9, 1)

    def test_per_pair_single_draw(self):
        assert per_pair_union_probability("kept_edge", 0.9, 0.5, 1) == pytest.approx(0.9)
        assert abs(per_pair_union_probability("kept_nonedge", 0.5, 0.999, 10) - 1.0) <= 1e-15

    @given(probs, probs)
    def test_i1_is_single_draw(self, q1, q2):
        expected = {"kept_edge": q1, "spurious_edge": 1 - q1, "missing_edge": 1 - q2, "kept_nonedge": q2}
        for case, p in expected.items():
            assert per_pair_union_probability(case, q1, q2, 1) == pytest.approx(p, rel=1e-12)

    def test_empty_product(self):
        assert neighborhood_recovery_probability(EdgeEventCounts(0, 0, 0, 0), 0.3, 0.4, 5) == 1.0

    def test_deterministic_keep(self):
        assert neighborhood_recovery_probability(EdgeEventCounts(7, 0, 0, 12), 1.0, 1.0, 3) == 1.0

    def test_hand_case(self):
        p = neighborhood_recovery_probability(EdgeEventCounts(1, 1, 0, 0), 0.9, 1.0, 10)
        assert p == pytest.approx((1 - 0.1**10) * (1 - 0.9**10), rel=1e-14)
        assert p == pytest.approx(0.651321, abs=1e-6)

    def test_log_domain_agrees(self):
        counts = EdgeEventCounts(40, 5, 3, 200)
        q1, q2, i = 0.85, 0.97, 4
        direct = 1.0
        for case, c in (("kept_edge", 40), ("spurious_edge", 5), ("missing_edge", 3), ("kept_nonedge", 200)):
            direct *= per_pair_union_probability(case, q1, q2, i) ** c
        assert neighborhood_recovery_probability(counts, q1, q2, i) == pytest.approx(direct, rel=1e-12)

    @settings(max_examples=200)
    @given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6), st.integers(0, 60), probs, probs, st.integers(1, 30))
    def test_monotone_in_i(self, k, l, m, n, q1, q2, i):
        c = EdgeEventCounts(k, l, m, n)
        assert neighborhood_recovery_probability(c, q1, q2, i + 1) >= neighborhood_recovery_probability(c, q1, q2, i)


class TestCounts:
    def test_identical_k3(self):
        assert count_edge_events(K3, K3) == EdgeEventCounts(3, 0, 0, 0)

    def test_global(self):
        a, abar = Graph(3, [(0, 1)]), Graph(3, [(0, 1), (1, 2)])
        assert count_edge_events(a, abar) == EdgeEventCounts(1, 1, 0, 1)

    def test_node_restricted(self):
        a, abar = Graph(3, [(0, 1)]), Graph(3, [(0, 1), (1, 2)])
        assert count_edge_events(a, abar, node=1) == EdgeEventCounts(1, 1, 0, 0)

    def test_errors(self):
        with pytest.raises(BoundsError):
            count_edge_events(K3, K3, node=3)
        with pytest.raises(ShapeError):
            count_edge_events(K3, Graph(4))


class TestMonteCarlo:
    def test_exact_when_q_is_one(self):
        cfg = DitherConfig(1.0, 1.0, 3)
        same = monte_carlo_recovery(K3, K3, 0, cfg, 500)
        assert (same.mean, same.stderr) == (1.0, 0.0)
        diff = monte_carlo_recovery(K3, Graph(3, [(0, 1)]), 0, cfg, 500)
        assert diff.mean == 0.0

    def test_hand_case_bracketed(self):
        a, abar = Graph(3, [(0, 1)]), Graph(3, [(0, 1), (0, 2)])
        cfg = DitherConfig(0.9, 1.0, 10, seed=5)
        closed = neighborhood_recovery_probability(count_edge_events(a, abar, 0), 0.9, 1.0, 10)
        union = monte_carlo_recovery(a, abar, 0, cfg, 100_000, "per_pair_union")
        single = monte_carlo_recovery(a, abar, 0, cfg, 100_000, "single_draw_full")
        assert union.brackets(closed)
        assert single.mean <= union.mean

    def test_batches_do_not_change_result(self):
        a, abar = Graph(6, [(0, 1), (0, 2)]), Graph(6, [(0, 1), (0, 4)])
        cfg = DitherConfig(0.7, 0.8, 4, seed=9)
        assert monte_carlo_recovery(a, abar, 0, cfg, 3000, batch=3000) == monte_carlo_recovery(a, abar, 0, cfg, 3000, batch=7)

    def test_validation(self):
        cfg = DitherConfig(0.9, 0.9, 2)
        with pytest.raises(ValidationError):
            monte_carlo_recovery(K3, K3, 0, cfg, 0)
        with pytest.raises(ValidationError):
            monte_carlo_recovery(K3, K3, 0, cfg, 10, "majority")
        with pytest.raises(BoundsError):
            monte_carlo_recovery(K3, K3, 5, cfg, 10)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        g = Graph(8, [(0, 1), (2, 5), (3, 7)])
        gs = dither(g, DitherConfig(0.8, 0.9, 3, seed=2))
        path = save_graph_set(gs, tmp_path, extra={"config_hash": "abc"})
        manifest = json.loads(path.read_text())
        assert manifest["q1"] == 0.8 and manifest["q2"] == 0.9 and manifest["i_count"] == 3
        assert manifest["seed"] == 2 and manifest["source_hash"] == g.content_hash()
        assert manifest["config_hash"] == "abc"
        back = load_graph_set(path, source=g)
        assert back.graphs == gs.graphs

    def test_source_hash_checked(self, tmp_path):
        g = Graph(4, [(0, 1)])
        path = save_graph_set(dither(g, DitherConfig(1.0, 1.0, 1)), tmp_path)
        with pytest.raises(ValidationError):
            load_graph_set(path, source=Graph(4, [(1, 2)]))
