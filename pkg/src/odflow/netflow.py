"""Time-elapsed net trip-counts between ordered cell pairs."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from odflow.errors import DimensionError, WindowError
from odflow.ingest import ComponentSpec, FlowSlice
from odflow.markov import ElapsedOperator


@dataclass(frozen=True)
class InitialDistribution:
    component: ComponentSpec
    n_total: float
    n_by_origin: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class NetFlow:
    origin: str
    dest: str
    value: float


@dataclass(frozen=True)
class NetFlowResult:
    """Net flows for pairs dest < origin in component order.

    A positive value means net flow from `origin` to `dest`.
    """

    window: tuple[int, int] | None
    entries: tuple[NetFlow, ...]
    threshold: float | None = None

    def __len__(self) -> int:
        return len(self.entries)


def initial_distribution(first_slice: FlowSlice, component: ComponentSpec) -> InitialDistribution:
    """Origin weights p^1_j from the outflow of the first slice."""
    n_by_origin = np.zeros(component.n)
    for r in first_slice.records:
        if r.origin in component and r.dest in component:
            n_by_origin[component.position(r.origin)] += r.count
    n_total = math.fsum(n_by_origin)
    if n_total <= 0:
        raise WindowError(f"slice {first_slice.t} carries no flow inside the component")
    return InitialDistribution(
        component=component, n_total=n_total, n_by_origin=n_by_origin, p=n_by_origin / n_total
    )


def net_flows(elapsed: ElapsedOperator, init: InitialDistribution) -> NetFlowResult:
    """s(i, j) = a_ij n_j - a_ji n_i for every ordered pair i < j with s != 0."""
    if elapsed.component.cells != init.component.cells:
        raise DimensionError("elapsed operator and initial distribution use different components")
    cells = elapsed.component.cells
    A = elapsed.A
    if isinstance(A, np.ndarray):
        S = A * init.n_by_origin[None, :]
        S = np.triu(S - S.T, k=1)
        rows, cols = np.nonzero(S)
        values = S[rows, cols]
    else:
        S = sparse.csr_matrix(A).multiply(init.n_by_origin[None, :]).tocsr()
        S = sparse.triu(S - S.T, k=1).tocoo()
        keep = S.data != 0
        rows, cols, values = S.row[keep], S.col[keep], S.data[keep]
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]

    entries = tuple(
        NetFlow(origin=cells[j], dest=cells[i], value=float(v))
        for i, j, v in zip(rows, cols, values)
    )
    return NetFlowResult(window=elapsed.t_span, entries=entries)


def pair_net_flow(elapsed: ElapsedOperator, init: InitialDistribution, dest: str, origin: str) -> float:
    """Net flow from `origin` to `dest` for one ordered pair, either orientation."""
    i = elapsed.component.position(dest)
    j = elapsed.component.position(origin)
    A = elapsed.A
    a_ij, a_ji = float(A[i, j]), float(A[j, i])
    return a_ij * init.n_by_origin[j] - a_ji * init.n_by_origin[i]


def percentile_threshold(values, q: float) -> float:
    """Linear-interpolation percentile of `values`."""
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {q}")
    return float(np.percentile(np.asarray(values, dtype=float), q, method="linear"))


def top_percentile(result: NetFlowResult, q: float) -> NetFlowResult:
    """Keep entries with |s| at or above the q-th percentile; ties are kept."""
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {q}")
    if not result.entries:
        raise WindowError("no net flows to filter")
    magnitudes = [abs(e.value) for e in result.entries]
    threshold = percentile_threshold(magnitudes, q)
    kept = tuple(e for e, m in zip(result.entries, magnitudes) if m >= threshold)
    return NetFlowResult(window=result.window, entries=kept, threshold=threshold)
