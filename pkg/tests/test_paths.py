import io
import math

import numpy as np
import pytest

from odflow.baseline import BaselineFit, BaselineModel, ObservedStats
from odflow.config import RtoVariant
from odflow.errors import SchemaError, WindowError
from odflow.geo import CellTable, load_cells
from odflow.ingest import ComponentSpec, parse_flows
from odflow.markov import build_step_operators
from odflow.paths import (
    SweepDay,
    WindowedOD,
    candidate_pairs,
    city_rto,
    decompose_paths,
    detect_gups,
    direct_edges,
    evaluate_pairs,
    occupancy_bound,
    propagate,
    rto,
    select_effective,
    time_sweep,
    windowed_distance,
)
from tests.conftest import TINY_FLOWS
from tests.helpers import dense_operator, make_slice, random_chain


def enumerate_first_passages(ops, jj, ii, t_max):
    """(pi, x) per step by depth-first enumeration of admissible paths."""
    dense = [(op.M.toarray(), op.d.toarray()) for op in ops[:t_max]]
    prob_sum = np.zeros(t_max)
    cost_sum = np.zeros(t_max)

    def walk(s, node, prob, dist):
        M, D = dense[s]
        for k in np.flatnonzero(M[:, node]):
            p, d = prob * M[k, node], dist + D[k, node]
            if k == ii:
                prob_sum[s] += p
                cost_sum[s] += p * d
            elif k != jj and s + 1 < t_max:
                walk(s + 1, k, p, d)

    walk(0, jj, 1.0, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        x = np.where(prob_sum > 0, cost_sum / prob_sum, np.nan)
    return prob_sum, x


def three_cell_chain():
    component = ComponentSpec(cells=("i", "j", "k"), t_range=(0, 1))
    # positions: i=0, j=1, k=2
    M1 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    D1 = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    M2 = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    D2 = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return [dense_operator(M1, D1, 0, component), dense_operator(M2, D2, 1, component)]


def swap_chain(steps=2, dist=2.0):
    component = ComponentSpec(cells=("j", "k"), t_range=(0, steps - 1))
    M = np.array([[0.0, 1.0], [1.0, 0.0]])
    D = np.full((2, 2), dist)
    return [dense_operator(M, D, t, component) for t in range(steps)]


class TestPropagate:
    """Tests for the masked first-passage recursion."""

    def test_matches_path_enumeration(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 7))
            t_max = int(rng.integers(1, 6))
            component, ops = random_chain(rng, n, t_max)
            jj, ii = (int(v) for v in rng.integers(0, n, size=2))
            trace = propagate(ops, component.cells[jj], component.cells[ii], t_max)
            pi, x = enumerate_first_passages(ops, jj, ii, t_max)
            np.testing.assert_allclose(trace.pi, pi, rtol=0, atol=1e-12)
            hit = pi > 0
            assert np.array_equal(np.isnan(trace.x), ~hit)
            np.testing.assert_allclose(trace.x[hit], x[hit], rtol=1e-12, atol=1e-12)

    def test_conservation(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 51))
            steps = int(rng.integers(1, 51))
            component, ops = random_chain(rng, n, steps, density=0.2)
            jj, ii = (int(v) for v in rng.integers(0, n, size=2))
            trace = propagate(ops, component.cells[jj], component.cells[ii])
            assert trace.conservation_error() <= 1e-10
            assert (trace.p >= 0).all() and (trace.p <= 1 + 1e-12).all()

    def test_single_step_reduction(self, rng):
        component, ops = random_chain(rng, 5, 3)
        for jj in range(5):
            for ii in range(5):
                m, d = ops[0].entry(ii, jj)
                if m == 0:
                    continue
                trace = propagate(ops, component.cells[jj], component.cells[ii], 1)
                result = windowed_distance(trace, 1, 1)
                assert result.P == m
                assert result.x_bar == d

    def test_three_cell_chain(self):
        trace = propagate(three_cell_chain(), "j", "i")
        assert list(trace.pi) == [0.0, 1.0]
        assert trace.x[1] == 5.0
        assert math.isnan(trace.x[0])

    def test_unreachable(self):
        component = ComponentSpec(cells=("a", "b"), t_range=(0, 2))
        ops = [dense_operator(np.eye(2), np.zeros((2, 2)), t, component) for t in range(3)]
        trace = propagate(ops, "a", "b")
        assert not trace.pi.any()
        assert windowed_distance(trace, 1, 3).x_bar is None

    def test_errors(self):
        ops = swap_chain()
        with pytest.raises(SchemaError):
            propagate(ops, "j", "zz")
        with pytest.raises(WindowError):
            propagate(ops, "j", "k", 3)
        with pytest.raises(WindowError):
            propagate([], "j", "k")

    def test_missing_costs_rejected(self):
        component = ComponentSpec(cells=("a", "b"), t_range=(0, 0))
        M = np.array([[0.0, 1.0], [1.0, 0.0]])
        D = np.array([[0.0, 1.0], [np.nan, 0.0]])
        with pytest.raises(SchemaError, match="missing step costs"):
            propagate([dense_operator(M, D, 0, component)], "a", "b")


class TestWindowedDistance:
    """Tests for window averages of first-passage statistics."""

    def trace(self):
        component = ComponentSpec(cells=("a", "b", "c"), t_range=(0, 1))
        # a -> b directly with 0.2 (cost 10), or via c with 0.2 (cost 20 in total)
        M1 = np.array([[0.6, 0.0, 0.0], [0.2, 1.0, 0.0], [0.2, 0.0, 1.0]])
        D1 = np.array([[1.0, 0.0, 0.0], [10.0, 0.0, 0.0], [12.0, 0.0, 0.0]])
        M2 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        D2 = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 8.0], [0.0, 0.0, 0.0]])
        ops = [dense_operator(M1, D1, 0, component), dense_operator(M2, D2, 1, component)]
        return propagate(ops, "a", "b")

    def test_weighted_mean(self):
        result = windowed_distance(self.trace(), 1, 2)
        assert result.P == pytest.approx(0.4)
        assert result.x_bar == pytest.approx(15.0)

    def test_single_hit(self):
        result = windowed_distance(self.trace(), 2, 2)
        assert result.x_bar == pytest.approx(20.0)

    def test_monotone_in_t2(self, rng):
        component, ops = random_chain(rng, 6, 8)
        trace = propagate(ops, component.cells[0], component.cells[3])
        Ps = [windowed_distance(trace, 1, t2).P for t2 in range(1, 9)]
        assert all(b >= a for a, b in zip(Ps, Ps[1:]))

    def test_invalid_window(self):
        trace = self.trace()
        with pytest.raises(WindowError):
            windowed_distance(trace, 0, 1)
        with pytest.raises(WindowError):
            windowed_distance(trace, 2, 1)
        with pytest.raises(WindowError):
            windowed_distance(trace, 1, 3)


def test_detect_gups():
    slices = [
        make_slice(0, [("a", "b", 1), ("a", "a", 2)]),
        make_slice(1, [("b", "c", 1)]),
    ]
    gups = detect_gups(slices, [("a", "b"), ("a", "c"), ("a", "a"), ("c", "a")])
    assert gups == {("a", "b"): False, ("a", "c"): True, ("a", "a"): False, ("c", "a"): True}


class TestDecomposePaths:
    """Tests for ranked path decompositions."""

    def parallel_routes(self):
        component = ComponentSpec(cells=("a", "b", "i", "j"), t_range=(0, 1))
        # positions: a=0, b=1, i=2, j=3
        M1 = np.eye(4)
        M1[:, 3] = [0.3, 0.1, 0.0, 0.6]
        M2 = np.eye(4)
        M2[:, 0] = [0.9, 0.0, 0.1, 0.0]
        M2[:, 1] = [0.0, 0.9, 0.1, 0.0]
        D = np.ones((4, 4))
        return [dense_operator(M1, D, 0, component), dense_operator(M2, D, 1, component)]

    def test_two_routes_ranked(self):
        result = decompose_paths(self.parallel_routes(), "j", "i", top_k=2)
        assert [p.nodes for p in result.paths] == [("j", "a", "i"), ("j", "b", "i")]
        assert result.paths[0].prob == 0.3 * 0.1
        assert result.paths[1].prob == 0.1 * 0.1
        assert result.paths[0].arrival_step == 2
        assert result.paths[0].dist == 2.0
        assert result.exhaustive and result.complete

    def test_absolute_steps(self):
        result = decompose_paths(self.parallel_routes(), "j", "i", top_k=2).at_steps(5)
        assert result.window == (5, 6)
        assert [p.arrival_step for p in result.paths] == [6, 6]
        assert result.paths[0].prob == 0.3 * 0.1

    def test_single_path_matches_pi(self):
        ops = three_cell_chain()
        result = decompose_paths(ops, "j", "i", top_k=5)
        (path,) = result.paths
        assert path.nodes == ("j", "k", "i")
        assert path.prob == propagate(ops, "j", "i").pi[1]

    def test_top_k_zero(self):
        assert decompose_paths(self.parallel_routes(), "j", "i", top_k=0).paths == ()

    def test_exhaustive_sums_match_pi(self, rng):
        for _ in range(20):
            component, ops = random_chain(rng, 5, 4)
            j, i = component.cells[0], component.cells[4]
            result = decompose_paths(ops, j, i, top_k=10**6)
            trace = propagate(ops, j, i)
            for t in range(1, 5):
                total = math.fsum(p.prob for p in result.paths if p.arrival_step == t)
                assert total == pytest.approx(trace.pi[t - 1], abs=1e-12)

    def test_beam_fallback(self, rng, monkeypatch):
        monkeypatch.setattr("odflow.paths.EXHAUSTIVE_LIMIT", 1)
        component, ops = random_chain(rng, 6, 4, density=1.0)
        result = decompose_paths(ops, component.cells[0], component.cells[1], top_k=3, beam_width=2)
        assert not result.exhaustive
        assert result.beam_width == 2
        assert not result.complete
        assert len(result.paths) <= 3


class TestRto:
    """Tests for return-to-origin measures."""

    def test_home_is_first_step_self_cost(self):
        component = ComponentSpec(cells=("j", "k"), t_range=(0, 0))
        M = np.array([[0.7, 0.0], [0.3, 1.0]])
        D = np.array([[1.2, 0.0], [5.0, 0.4]])
        result = rto([dense_operator(M, D, 0, component)], "j", 1, RtoVariant.HOME)
        assert result.x_bar == 1.2
        assert result.P == 0.7

    def test_roaming_out_and_back(self):
        result = rto(swap_chain(), "j", 2, RtoVariant.ROAMING)
        assert result.x_bar == 4.0
        assert result.P == 1.0

    def test_roaming_without_departure(self):
        component = ComponentSpec(cells=("j", "k"), t_range=(0, 2))
        ops = [dense_operator(np.eye(2), np.ones((2, 2)), t, component) for t in range(3)]
        result = rto(ops, "j", 3, RtoVariant.ROAMING)
        assert result.P == 0.0
        assert result.x_bar is None

    def test_roaming_needs_two_steps(self):
        with pytest.raises(WindowError):
            rto(swap_chain(), "j", 1, RtoVariant.ROAMING)


class TestCityRto:
    """Tests for city-level return-to-origin averages."""

    def slices(self):
        return [make_slice(0, [("a", "a", 1, 4.0), ("b", "b", 3, 8.0), ("a", "b", 1, 2.0), ("b", "a", 1, 2.0)])]

    def test_home_weighted_mean(self):
        slices = self.slices()
        component = ComponentSpec(cells=("a", "b"), t_range=(0, 0))
        ops = build_step_operators(slices, component)
        result = city_rto(ops, slices[0], 1, RtoVariant.HOME)
        assert result.value == 7.0
        assert result.excluded_mass == 0.0

    def test_single_origin(self):
        slices = [make_slice(0, [("a", "a", 2, 1.5)])]
        component = ComponentSpec(cells=("a",), t_range=(0, 0))
        ops = build_step_operators(slices, component)
        assert city_rto(ops, slices[0], 1, RtoVariant.HOME).value == 1.5

    def test_zero_home_weight(self):
        slices = [make_slice(0, [("a", "b", 1, 1.0), ("b", "a", 1, 1.0)])]
        component = ComponentSpec(cells=("a", "b"), t_range=(0, 0))
        ops = build_step_operators(slices, component)
        with pytest.raises(WindowError):
            city_rto(ops, slices[0], 1, RtoVariant.HOME)

    def test_roaming_excludes_undefined(self):
        # b leaves but never returns within the window
        slices = [
            make_slice(0, [("a", "b", 1, 2.0), ("b", "c", 3, 5.0), ("c", "c", 1, 0.5)]),
            make_slice(1, [("b", "a", 1, 2.0), ("c", "c", 1, 0.5)]),
        ]
        component = ComponentSpec(cells=("a", "b", "c"), t_range=(0, 1))
        ops = build_step_operators(slices, component)
        result = city_rto(ops, slices[0], 2, RtoVariant.ROAMING)
        assert result.value == 4.0
        assert result.excluded_mass == pytest.approx(0.75)


class TestCandidates:
    """Tests for the occupancy prefilter and pair evaluation."""

    def test_bound_dominates_hit_probability(self, rng):
        component, ops = random_chain(rng, 6, 5, density=0.3)
        U = occupancy_bound(ops)
        U = U.toarray() if hasattr(U, "toarray") else U
        for jj in range(6):
            for ii in range(6):
                trace = propagate(ops, component.cells[jj], component.cells[ii])
                assert windowed_distance(trace, 1, 5).P <= U[ii, jj] + 1e-12

    def test_candidates_skip_direct_and_respect_budget(self, rng):
        component, ops = random_chain(rng, 6, 3)
        exclude = {(component.cells[0], component.cells[1])}
        pairs = candidate_pairs(ops, 1e-6, budget=1000, exclude=exclude)
        assert all(o != d for o, d in pairs)
        assert (component.cells[0], component.cells[1]) not in pairs
        assert len(candidate_pairs(ops, 1e-6, budget=2)) == 2
        assert candidate_pairs(ops, float(len(ops)) + 1, budget=1000) == []

    def test_evaluate_marks_gups(self):
        ops = three_cell_chain()
        direct = {("j", "k")}
        (result,) = evaluate_pairs(ops, [("j", "i")], gup_edges=direct)
        assert result.gup is True
        assert result.x_bar == 5.0
        assert result.d_eff is None

    def test_zero_denominator_pair_keeps_batch(self):
        ops = three_cell_chain()
        cells = CellTable({"i": (0.0, 0.0), "j": (0.0, 0.01), "k": (0.0, 0.02)})
        fit = BaselineFit(slope=1.0, intercept=0.0, rmse=0.0, n_points=2, weight_total=2.0)
        observed = {
            ("j", "i"): ObservedStats(median=3.0, std=2.0, weight=1.0),
            ("j", "k"): ObservedStats(median=0.0, std=0.0, weight=1.0),
        }
        model = BaselineModel(fit, cells, observed)
        to_i, to_k = evaluate_pairs(ops, [("j", "i"), ("j", "k")], model, set())
        assert to_i.d_eff == 1.0
        assert to_k.x_bar == 2.0
        assert to_k.d_eff is None
        assert select_effective([to_i, to_k], 0, 1e-6) == [to_i]


def test_select_effective_applies_cutoff_then_percentile():
    results = [
        WindowedOD("a", "b", (1, 2), x_bar=10.0, P=1e-7, d_eff=9.0),
        WindowedOD("a", "c", (1, 2), x_bar=10.0, P=1e-3, d_eff=2.0),
        WindowedOD("b", "c", (1, 2), x_bar=10.0, P=1e-3, d_eff=4.0),
    ]
    assert [r.dest for r in select_effective(results, 0, 1e-6)] == ["c", "c"]
    assert [r.origin for r in select_effective(results, 100, 1e-6)] == ["b"]


def test_time_sweep_on_tiny_data(tiny_files):
    _, cells_path = tiny_files
    slices = parse_flows(io.StringIO(TINY_FLOWS))
    cells = load_cells(cells_path)
    component = ComponentSpec(cells=("a", "b", "c"), t_range=(0, 1))
    ops = build_step_operators(slices, component)
    model = BaselineModel.from_slices(slices, cells)
    direct = direct_edges(slices)

    rows = time_sweep([SweepDay("day0000", tuple(ops))], model, direct, q=0.0)
    assert rows
    assert {(r.origin, r.dest) for r in rows} <= {("a", "c"), ("b", "a"), ("c", "b")}
    assert all(r.day == "day0000" and r.P >= 1e-6 for r in rows)


def test_time_sweep_day_edges_override_shared(tiny_files):
    _, cells_path = tiny_files
    slices = parse_flows(io.StringIO(TINY_FLOWS))
    component = ComponentSpec(cells=("a", "b", "c"), t_range=(0, 1))
    ops = tuple(build_step_operators(slices, component))
    model = BaselineModel.from_slices(slices, load_cells(cells_path))
    direct = direct_edges(slices)

    shared = time_sweep([SweepDay("day0000", ops)], model, direct, q=0.0)
    own = frozenset(direct | {("a", "c")})
    scoped = time_sweep([SweepDay("day0000", ops, direct=own)], model, direct, q=0.0)
    assert ("a", "c") not in {(r.origin, r.dest) for r in scoped}
    assert {(r.origin, r.dest) for r in scoped} <= {(r.origin, r.dest) for r in shared}
