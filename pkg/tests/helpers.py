"""Builders shared by the test modules."""

import numpy as np

from odflow.geo import CellTable
from odflow.ingest import ComponentSpec, FlowRecord, FlowSlice
from odflow.markov import StepOperator, csc_from_entries


def make_component(n: int, t_range=(0, 0)) -> ComponentSpec:
    return ComponentSpec(cells=tuple(f"c{k:02d}" for k in range(n)), t_range=t_range)


def dense_operator(M, D, t: int, component: ComponentSpec) -> StepOperator:
    """Step operator from dense matrices; zero entries of M are left out."""
    M = np.asarray(M, dtype=float)
    D = np.asarray(D, dtype=float)
    rows, cols = np.nonzero(M)
    M_csc, d_csc = csc_from_entries(component.n, rows, cols, M[rows, cols], D[rows, cols])
    return StepOperator(t=t, component=component, M=M_csc, d=d_csc)


def random_stochastic(rng: np.random.Generator, n: int, density: float = 0.5) -> np.ndarray:
    """Random column-stochastic matrix; every column keeps at least one entry."""
    mask = rng.random((n, n)) < density
    mask[rng.integers(0, n, size=n), np.arange(n)] = True
    M = np.where(mask, rng.random((n, n)) + 0.05, 0.0)
    M /= M.sum(axis=0, keepdims=True)
    return M


def random_chain(rng: np.random.Generator, n: int, steps: int, density: float = 0.5):
    component = make_component(n, (0, steps - 1))
    ops = []
    for t in range(steps):
        M = random_stochastic(rng, n, density)
        D = rng.uniform(0.5, 10.0, size=(n, n))
        ops.append(dense_operator(M, D, t, component))
    return component, ops


def line_cells(n: int, spacing_deg: float = 0.01) -> CellTable:
    """Cells c00..c(n-1) along the equator."""
    return CellTable({f"c{k:02d}": (0.0, k * spacing_deg) for k in range(n)})


def record(t, origin, dest, count, dist=None, std=None, dur=None):
    return FlowRecord(
        t=t,
        origin=origin,
        dest=dest,
        count=count,
        dist_mean=dist,
        dist_median=dist,
        dist_std=std,
        dur_mean=dur,
        dur_median=dur,
    )


def make_slice(t, rows) -> FlowSlice:
    records = tuple(sorted((record(t, *row) for row in rows), key=lambda r: (r.origin, r.dest)))
    return FlowSlice(t=t, records=records)


