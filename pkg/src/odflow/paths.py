"""First-passage propagation of path probability and accumulated step cost.

For an ordered pair (origin j, dest i) admissible paths start at j and first
reach i at some step without visiting i or j in between. Mass that returns to
j before reaching i is absorbed separately. With i == j the mask is {j} and
absorption at j is the first return.
"""

import heapq
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import sparse

from odflow.baseline import BaselineModel
from odflow.config import RtoVariant
from odflow.errors import SchemaError, WindowError, ZeroDenominatorError
from odflow.ingest import FlowSlice
from odflow.markov import ElapsedOperator, StepOperator
from odflow.netflow import percentile_threshold
from odflow.utils.logger import logger

EXHAUSTIVE_LIMIT = 10**6


@dataclass(frozen=True)
class PassageTrace:
    origin: str
    dest: str
    p: np.ndarray  # (t_max, n) probability arriving at each cell
    y: np.ndarray  # (t_max, n) mean accumulated cost, NaN where p == 0
    pi: np.ndarray  # first-passage probability per step
    x: np.ndarray  # mean cost of first-passage paths, NaN where pi == 0
    rho: np.ndarray  # mass absorbed by returning to the origin (i != j)
    live: np.ndarray  # masked mass still travelling after each step

    @property
    def t_max(self) -> int:
        return len(self.pi)

    def conservation_error(self) -> float:
        if self.t_max == 0:
            return 0.0
        total = self.live + np.cumsum(self.pi) + np.cumsum(self.rho)
        return float(np.abs(total - 1.0).max())


@dataclass(frozen=True)
class WindowedOD:
    origin: str
    dest: str
    window: tuple[int, int]
    x_bar: Optional[float]
    P: float
    d_eff: Optional[float] = None
    gup: Optional[bool] = None


@dataclass(frozen=True)
class PathEntry:
    nodes: tuple[str, ...]
    arrival_step: int
    prob: float
    dist: float


@dataclass(frozen=True)
class PathDecomposition:
    origin: str
    dest: str
    window: tuple[int, int]
    paths: tuple[PathEntry, ...]
    exhaustive: bool
    complete: bool
    beam_width: Optional[int] = None

    def at_steps(self, first: int) -> "PathDecomposition":
        """Window and arrival steps as absolute 0-based step indices, starting at `first`."""
        shift = first - 1
        return replace(
            self,
            window=(self.window[0] + shift, self.window[1] + shift),
            paths=tuple(replace(p, arrival_step=p.arrival_step + shift) for p in self.paths),
        )


def _require_costs(op: StepOperator) -> None:
    if op.missing_costs:
        raise SchemaError(
            f"step {op.t} has {op.missing_costs} missing step costs; impute them from the baseline first"
        )


def _weighted_costs(op: StepOperator) -> sparse.csc_matrix:
    return sparse.csc_matrix((op.M.data * op.d.data, op.M.indices, op.M.indptr), shape=op.M.shape)


def _dense_column(a: sparse.csc_matrix, j: int) -> np.ndarray:
    col = np.zeros(a.shape[0])
    lo, hi = a.indptr[j], a.indptr[j + 1]
    col[a.indices[lo:hi]] = a.data[lo:hi]
    return col


def propagate(
    ops: Sequence[StepOperator], origin: str, dest: str, t_max: Optional[int] = None
) -> PassageTrace:
    """Run the masked first-passage recursion for one ordered pair."""
    if not ops:
        raise WindowError("propagation needs at least one step operator")
    t_max = len(ops) if t_max is None else t_max
    if not 1 <= t_max <= len(ops):
        raise WindowError(f"t_max {t_max} outside 1..{len(ops)}")
    component = ops[0].component
    jj = component.position(origin)
    ii = component.position(dest)
    n = component.n

    mask = np.ones(n, dtype=bool)
    mask[[ii, jj]] = False

    p_hist = np.zeros((t_max, n))
    y_hist = np.full((t_max, n), np.nan)
    pi = np.zeros(t_max)
    x = np.full(t_max, np.nan)
    rho = np.zeros(t_max)
    live = np.zeros(t_max)

    p_tilde = y_tilde = None
    for s, op in enumerate(ops[:t_max]):
        _require_costs(op)
        if s == 0:
            # y^0 = 0, so first-step costs are taken as is.
            p = _dense_column(op.M, jj)
            reached = p > 0
            y = np.full(n, np.nan)
            y[reached] = _dense_column(op.d, jj)[reached]
        else:
            p = op.M @ p_tilde
            num = _weighted_costs(op) @ p_tilde + op.M @ (y_tilde * p_tilde)
            reached = p > 0
            y = np.full(n, np.nan)
            y[reached] = num[reached] / p[reached]

        p_hist[s] = p
        y_hist[s] = y
        pi[s] = p[ii]
        x[s] = y[ii]
        if ii != jj:
            rho[s] = p[jj]
        p_tilde = np.where(mask, p, 0.0)
        y_tilde = np.where(mask & reached, y, 0.0)
        live[s] = p_tilde.sum()

    return PassageTrace(
        origin=origin, dest=dest, p=p_hist, y=y_hist, pi=pi, x=x, rho=rho, live=live
    )


def windowed_distance(trace: PassageTrace, t1: int, t2: int) -> WindowedOD:
    """Probability-weighted mean cost of first passages arriving in [t1, t2]."""
    if not 1 <= t1 <= t2 <= trace.t_max:
        raise WindowError(f"window [{t1}, {t2}] outside 1..{trace.t_max}")
    pis = trace.pi[t1 - 1 : t2]
    xs = trace.x[t1 - 1 : t2]
    hit = pis > 0
    P = math.fsum(pis)
    if not hit.any():
        x_bar = None
    elif hit.sum() == 1:
        x_bar = float(xs[hit][0])
    else:
        x_bar = math.fsum(xs[hit] * pis[hit]) / math.fsum(pis[hit])
    return WindowedOD(origin=trace.origin, dest=trace.dest, window=(t1, t2), x_bar=x_bar, P=P)


def direct_edges(slices: Iterable[FlowSlice]) -> set[tuple[str, str]]:
    edges = set()
    for s in slices:
        edges |= s.edges()
    return edges


def detect_gups(
    slices: Iterable[FlowSlice], pairs: Iterable[tuple[str, str]]
) -> dict[tuple[str, str], bool]:
    """A pair (origin, dest) is a GUP iff no slice holds a record origin -> dest."""
    edges = direct_edges(slices)
    return {pair: pair not in edges for pair in pairs}


def count_path_prefixes(ops: Sequence[StepOperator], origin: str, dest: str, t_max: int) -> float:
    """Number of admissible path prefixes a depth-first enumeration would visit."""
    component = ops[0].component
    jj, ii = component.position(origin), component.position(dest)
    c = np.zeros(component.n)
    c[jj] = 1.0
    total = 0.0
    for op in ops[:t_max]:
        support = sparse.csc_matrix(
            ((op.M.data > 0).astype(float), op.M.indices, op.M.indptr), shape=op.M.shape
        )
        c = support @ c
        total += c.sum()
        c[[ii, jj]] = 0.0
    return total


def decompose_paths(
    ops: Sequence[StepOperator],
    origin: str,
    dest: str,
    t_max: Optional[int] = None,
    top_k: int = 10,
    beam_width: int = 1000,
) -> PathDecomposition:
    """Rank admissible first-passage paths by probability.

    Enumerates every path when the prefix count is at most EXHAUSTIVE_LIMIT,
    otherwise keeps the `beam_width` most probable prefixes per step.
    """
    t_max = len(ops) if t_max is None else t_max
    if not 1 <= t_max <= len(ops):
        raise WindowError(f"t_max {t_max} outside 1..{len(ops)}")
    window = (1, t_max)
    if top_k <= 0:
        return PathDecomposition(origin, dest, window, (), exhaustive=True, complete=True)

    component = ops[0].component
    cells = component.cells
    jj, ii = component.position(origin), component.position(dest)
    exhaustive = count_path_prefixes(ops, origin, dest, t_max) <= EXHAUSTIVE_LIMIT
    if not exhaustive:
        logger.debug(f"Path decomposition {origin}->{dest} falls back to beam width {beam_width}")
    complete = True

    frontier = [((jj,), 1.0, 0.0)]
    finished: list[PathEntry] = []
    for s, op in enumerate(ops[:t_max]):
        _require_costs(op)
        nxt = []
        M, d = op.M, op.d
        for nodes, prob, dist in frontier:
            r = nodes[-1]
            for k in range(M.indptr[r], M.indptr[r + 1]):
                m = M.data[k]
                if m <= 0:
                    continue
                dest_k = int(M.indices[k])
                step = (nodes + (dest_k,), prob * m, dist + d.data[k])
                if dest_k == ii:
                    finished.append(
                        PathEntry(tuple(cells[v] for v in step[0]), s + 1, step[1], float(step[2]))
                    )
                elif dest_k != jj:
                    nxt.append(step)
        if not exhaustive and len(nxt) > beam_width:
            complete = False
            nxt = heapq.nsmallest(beam_width, nxt, key=lambda e: (-e[1], e[0]))
        frontier = nxt

    finished.sort(key=lambda e: (-e.prob, e.arrival_step, e.nodes))
    return PathDecomposition(
        origin=origin,
        dest=dest,
        window=window,
        paths=tuple(finished[:top_k]),
        exhaustive=exhaustive,
        complete=complete,
        beam_width=None if exhaustive else beam_width,
    )


def rto(
    ops: Sequence[StepOperator], origin: str, t2: int, variant: RtoVariant = RtoVariant.HOME
) -> WindowedOD:
    """Return-to-origin cost for one location.

    Home uses the first-step self-transition; roaming averages first returns
    over steps 2..t2, excluding that self-transition.
    """
    if not ops:
        raise WindowError("return-to-origin needs at least one step operator")
    variant = RtoVariant(variant)
    if variant == RtoVariant.HOME:
        j = ops[0].component.position(origin)
        m, d = ops[0].entry(j, j)
        return WindowedOD(
            origin=origin, dest=origin, window=(1, 1), x_bar=d if m > 0 else None, P=m
        )
    if t2 < 2:
        raise WindowError("roaming return-to-origin needs a window of at least two steps")
    trace = propagate(ops, origin, origin, t2)
    return windowed_distance(trace, 2, t2)


@dataclass(frozen=True)
class CityRto:
    variant: RtoVariant
    value: float
    excluded_mass: float
    per_origin: dict[str, WindowedOD] = field(default_factory=dict)


def rto_weights(first_slice: FlowSlice, component, variant: RtoVariant) -> dict[str, float]:
    """Origin weights: self flow for home, outflow to other cells for roaming."""
    weights: dict[str, float] = {}
    for r in first_slice.records:
        if r.origin not in component or r.dest not in component:
            continue
        if (r.origin == r.dest) == (variant == RtoVariant.HOME):
            weights[r.origin] = weights.get(r.origin, 0.0) + r.count
    total = math.fsum(weights.values())
    if total <= 0:
        raise WindowError(f"slice {first_slice.t} has no {variant.value} weight")
    return {cell: w / total for cell, w in sorted(weights.items())}


def city_rto(
    ops: Sequence[StepOperator],
    first_slice: FlowSlice,
    t2: int,
    variant: RtoVariant = RtoVariant.HOME,
) -> CityRto:
    """Weighted city-level return-to-origin cost; undefined origins are renormalized away."""
    variant = RtoVariant(variant)
    weights = rto_weights(first_slice, ops[0].component, variant)
    per_origin = {}
    terms = []
    excluded = 0.0
    for cell, w in weights.items():
        result = rto(ops, cell, t2, variant)
        per_origin[cell] = result
        if result.x_bar is None:
            excluded += w
        else:
            terms.append((w, result.x_bar))
    if not terms:
        raise WindowError(f"no origin has a defined {variant.value} return-to-origin value")
    value = math.fsum(w * v for w, v in terms)
    if excluded > 0:
        value /= math.fsum(w for w, _ in terms)
        logger.warning(f"{variant.value} RTO excluded origin mass {excluded:.3g}")
    return CityRto(variant=variant, value=value, excluded_mass=excluded, per_origin=per_origin)


def occupancy_bound(ops: Sequence[StepOperator]):
    """U = sum_t A^t over the window; an upper bound on every pair's path-hit probability."""
    elapsed = ElapsedOperator.identity(ops[0].component)
    total = None
    for op in ops:
        elapsed = elapsed.advance(op)
        A = elapsed.A
        if total is None:
            total = A.copy()
        elif isinstance(A, np.ndarray) or isinstance(total, np.ndarray):
            total = (total.toarray() if sparse.issparse(total) else total) + (
                A.toarray() if sparse.issparse(A) else A
            )
        else:
            total = total + A
    return total


def candidate_pairs(
    ops: Sequence[StepOperator],
    p_cut: float,
    budget: int,
    exclude: Optional[set[tuple[str, str]]] = None,
) -> list[tuple[str, str]]:
    """Ordered pairs (origin, dest), origin != dest, that may reach `p_cut`.

    Pairs in `exclude` (direct edges when only GUPs are wanted) are skipped;
    the rest are ranked by their occupancy bound and capped at `budget`.
    """
    cells = ops[0].component.cells
    U = occupancy_bound(ops)
    if sparse.issparse(U):
        coo = sparse.coo_matrix(U)
        rows, cols, vals = coo.row, coo.col, coo.data
    else:
        rows, cols = np.nonzero(U)
        vals = U[rows, cols]

    ranked = []
    for i, j, u in zip(rows, cols, vals):
        if i == j or u < p_cut or u <= 0:
            continue
        pair = (cells[j], cells[i])
        if exclude is not None and pair in exclude:
            continue
        ranked.append((-float(u), pair))
    ranked.sort()
    if len(ranked) > budget:
        logger.warning(f"Candidate pairs capped at {budget} of {len(ranked)}")
        ranked = ranked[:budget]
    return [pair for _, pair in ranked]


def evaluate_pairs(
    ops: Sequence[StepOperator],
    pairs: Sequence[tuple[str, str]],
    model: Optional[BaselineModel] = None,
    gup_edges: Optional[set[tuple[str, str]]] = None,
    map_fn: Callable = map,
) -> list[WindowedOD]:
    """Propagate every pair over the whole window and attach effective distances."""
    t_max = len(ops)

    def one(pair: tuple[str, str]) -> WindowedOD:
        origin, dest = pair
        result = windowed_distance(propagate(ops, origin, dest, t_max), 1, t_max)
        gup = None if gup_edges is None else pair not in gup_edges
        d_eff = None
        if model is not None and result.x_bar is not None:
            try:
                d_eff = model.effective(origin, dest, result.x_bar)
            except ZeroDenominatorError as e:
                logger.warning(f"No effective distance: {e}")
        return replace(result, d_eff=d_eff, gup=gup)

    return list(map_fn(one, pairs))


def select_effective(results: Sequence[WindowedOD], q: float, p_cut: float) -> list[WindowedOD]:
    """Drop pairs below `p_cut`, then keep those at or above the q-th percentile of d_eff."""
    kept = [r for r in results if r.P >= p_cut and r.d_eff is not None]
    if not kept:
        return []
    threshold = percentile_threshold([r.d_eff for r in kept], q)
    return [r for r in kept if r.d_eff >= threshold]


@dataclass(frozen=True)
class SweepDay:
    label: str
    ops: tuple[StepOperator, ...]
    direct: Optional[frozenset[tuple[str, str]]] = None


@dataclass(frozen=True)
class SweepRow:
    day: str
    origin: str
    dest: str
    d_eff: float
    P: float


def time_sweep(
    days: Sequence[SweepDay],
    model: BaselineModel,
    direct: set[tuple[str, str]],
    q: float = 99.0,
    p_cut: float = 1e-6,
    pair_budget: int = 20_000,
    map_fn: Callable = map,
) -> list[SweepRow]:
    """High effective-distance GUPs for the same window on every day.

    A day with its own `direct` edges uses them instead of the shared set.
    """
    rows = []
    for day in days:
        edges = direct if day.direct is None else day.direct
        pairs = candidate_pairs(day.ops, p_cut, pair_budget, exclude=edges)
        results = evaluate_pairs(day.ops, pairs, model, edges, map_fn)
        for r in select_effective(results, q, p_cut):
            rows.append(SweepRow(day=day.label, origin=r.origin, dest=r.dest, d_eff=r.d_eff, P=r.P))
        logger.debug(f"Sweep day {day.label}: {len(pairs)} candidates")
    return rows
