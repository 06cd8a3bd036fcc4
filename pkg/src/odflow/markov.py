"""Per-step column-stochastic operators, elapsed products and approximate roots.

Convention: row = destination i, column = origin j.
"""

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.linalg import null_space

from odflow.config import GapPolicy, Measure
from odflow.errors import DimensionError, GapPolicyError, StochasticityError
from odflow.ingest import ComponentSpec, FlowRecord, FlowSlice
from odflow.utils.logger import logger

STEP_TOL = 1e-12
ELAPSED_TOL = 1e-10
DENSE_FILL = 0.25
NEWTON_MAX_N = 10
STALL_WINDOW = 100
STALL_RATIO = 0.99


def _record_cost(record: FlowRecord, measure: Measure) -> float:
    if measure == Measure.DURATION:
        value = record.dur_median if record.dur_median is not None else record.dur_mean
    else:
        value = record.dist_median if record.dist_median is not None else record.dist_mean
    return math.nan if value is None else value


def _column_sums(a) -> np.ndarray:
    return np.asarray(a.sum(axis=0)).ravel()


@dataclass(frozen=True)
class StepOperator:
    """One step's transition matrix `M` with aligned step costs `d`.

    `d` holds km (or minutes for the duration measure); NaN marks a missing
    cost that still has to be imputed.
    """

    t: int
    component: ComponentSpec
    M: sparse.csc_matrix
    d: sparse.csc_matrix

    def __post_init__(self):
        n = self.component.n
        if self.M.shape != (n, n) or self.d.shape != (n, n):
            raise DimensionError(f"operator at step {self.t} is not {n}x{n}")
        if not (
            np.array_equal(self.M.indptr, self.d.indptr)
            and np.array_equal(self.M.indices, self.d.indices)
        ):
            raise DimensionError(f"cost sparsity at step {self.t} is not aligned with M")
        if self.M.nnz and (self.M.data.min() < 0 or self.M.data.max() > 1):
            raise StochasticityError(f"operator at step {self.t} has entries outside [0, 1]")
        drift = np.abs(_column_sums(self.M) - 1.0).max() if n else 0.0
        if drift > STEP_TOL:
            raise StochasticityError(f"operator at step {self.t} has column drift {drift:.3g}")
        costs = self.d.data[~np.isnan(self.d.data)]
        if costs.size and costs.min() < 0:
            raise StochasticityError(f"operator at step {self.t} has negative step costs")

    @property
    def n(self) -> int:
        return self.component.n

    @property
    def support(self) -> set[tuple[int, int]]:
        coo = self.M.tocoo()
        return {(int(i), int(j)) for i, j, v in zip(coo.row, coo.col, coo.data) if v > 0}

    @property
    def missing_costs(self) -> int:
        return int(np.isnan(self.d.data).sum())

    def with_costs(self, data: np.ndarray) -> "StepOperator":
        d = sparse.csc_matrix((data, self.M.indices.copy(), self.M.indptr.copy()), shape=self.M.shape)
        return StepOperator(t=self.t, component=self.component, M=self.M, d=d)

    def entry(self, i: int, j: int) -> tuple[float, float]:
        """Return (m_ij, d_ij); d is NaN when the entry is absent."""
        lo, hi = self.M.indptr[j], self.M.indptr[j + 1]
        rows = self.M.indices[lo:hi]
        hit = np.flatnonzero(rows == i)
        if hit.size == 0:
            return 0.0, math.nan
        k = lo + hit[0]
        return float(self.M.data[k]), float(self.d.data[k])


def csc_from_entries(n, rows, cols, values, costs) -> tuple[sparse.csc_matrix, sparse.csc_matrix]:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    order = np.lexsort((rows, cols))
    indices = rows[order].astype(np.int32)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(cols, minlength=n))]).astype(np.int32)
    M = sparse.csc_matrix((np.asarray(values, float)[order], indices, indptr), shape=(n, n))
    d = sparse.csc_matrix((np.asarray(costs, float)[order], indices.copy(), indptr.copy()), shape=(n, n))
    return M, d


def build_step_operator(
    flow_slice: FlowSlice,
    component: ComponentSpec,
    gap_policy: GapPolicy = GapPolicy.SELF_LOOP,
    measure: Measure = Measure.DISTANCE,
) -> StepOperator:
    """Normalize one slice's counts column-wise into a step operator."""
    n = component.n
    rows, cols, counts, costs = [], [], [], []
    for r in flow_slice.records:
        if r.origin not in component or r.dest not in component:
            continue
        rows.append(component.position(r.dest))
        cols.append(component.position(r.origin))
        counts.append(r.count)
        costs.append(_record_cost(r, measure))

    counts_arr = np.asarray(counts, dtype=float)
    cols_arr = np.asarray(cols, dtype=np.int64)
    outflow = np.bincount(cols_arr, weights=counts_arr, minlength=n)
    values = list(counts_arr / outflow[cols_arr]) if counts else []

    for j in np.flatnonzero(outflow == 0):
        j = int(j)
        if gap_policy == GapPolicy.FAIL:
            raise GapPolicyError(component.cells[j], flow_slice.t)
        if gap_policy == GapPolicy.UNIFORM:
            for i in range(n):
                rows.append(i)
                cols.append(j)
                values.append(1.0 / n)
                costs.append(0.0 if i == j else math.nan)
        else:
            rows.append(j)
            cols.append(j)
            values.append(1.0)
            costs.append(0.0)

    M, d = csc_from_entries(n, rows, cols, values, costs)
    return StepOperator(t=flow_slice.t, component=component, M=M, d=d)


def build_step_operators(
    slices: Sequence[FlowSlice],
    component: ComponentSpec,
    gap_policy: GapPolicy = GapPolicy.SELF_LOOP,
    measure: Measure = Measure.DISTANCE,
) -> list[StepOperator]:
    return [build_step_operator(s, component, gap_policy, measure) for s in slices]


@dataclass(frozen=True)
class ElapsedOperator:
    """Cumulative product A = M^t ... M^1 over `steps`."""

    component: ComponentSpec
    A: sparse.csc_matrix | np.ndarray
    steps: tuple[int, ...] = ()
    drift: tuple[tuple[int, float], ...] = field(default=())

    @classmethod
    def identity(cls, component: ComponentSpec) -> "ElapsedOperator":
        return cls(component=component, A=sparse.identity(component.n, format="csc"))

    @property
    def n(self) -> int:
        return self.component.n

    @property
    def t_span(self) -> Optional[tuple[int, int]]:
        return (self.steps[0], self.steps[-1]) if self.steps else None

    @property
    def is_dense(self) -> bool:
        return isinstance(self.A, np.ndarray)

    def dense(self) -> np.ndarray:
        return self.A if self.is_dense else self.A.toarray()

    def advance(self, op: StepOperator) -> "ElapsedOperator":
        """Left-multiply by the next step operator."""
        if op.component.cells != self.component.cells:
            raise DimensionError(f"operator at step {op.t} belongs to another component")
        if self.steps and op.t != self.steps[-1] + 1:
            raise DimensionError(f"operator at step {op.t} does not follow step {self.steps[-1]}")

        A = op.M @ self.A
        if not isinstance(A, np.ndarray):
            A = sparse.csc_matrix(A)
            if A.nnz > DENSE_FILL * self.n * self.n:
                A = A.toarray()
        else:
            A = np.asarray(A)

        drift = self.drift
        sums = _column_sums(A)
        worst = float(np.abs(sums - 1.0).max()) if self.n else 0.0
        if worst > ELAPSED_TOL:
            logger.debug(f"Renormalizing elapsed operator at step {op.t} (drift {worst:.3g})")
            if isinstance(A, np.ndarray):
                A = A / sums
            else:
                A = sparse.csc_matrix(A @ sparse.diags(1.0 / sums))
            drift = drift + ((op.t, worst),)
        return ElapsedOperator(
            component=self.component, A=A, steps=self.steps + (op.t,), drift=drift
        )


def elapse(ops: Sequence[StepOperator], component: ComponentSpec | None = None) -> ElapsedOperator:
    """A^t = M^t A^{t-1} with A^0 = I."""
    if not ops:
        if component is None:
            raise DimensionError("an empty operator chain needs its component")
        return ElapsedOperator.identity(component)
    elapsed = ElapsedOperator.identity(component or ops[0].component)
    for op in ops:
        elapsed = elapsed.advance(op)
    return elapsed


def project_columns_to_simplex(X: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column onto the probability simplex."""
    n, m = X.shape
    U = -np.sort(-X, axis=0)
    css = np.cumsum(U, axis=0) - 1.0
    ind = np.arange(1, n + 1)[:, None]
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[::-1], axis=0)
    theta = css[rho, np.arange(m)] / (rho + 1)
    return np.maximum(X - theta, 0.0)


@dataclass
class RootResult:
    H: np.ndarray
    residual: float
    iterations: int
    converged: bool
    metric: str
    history: list[float] = field(default_factory=list)
    experimental: bool = True
    restarts: int = 0


def _powers(H: np.ndarray, p: int) -> list[np.ndarray]:
    powers = [np.eye(H.shape[0])]
    for _ in range(p):
        powers.append(powers[-1] @ H)
    return powers


class _Objective:
    def __init__(self, M: np.ndarray, p: int, metric: str):
        self.M = M
        self.p = p
        self.metric = metric
        self.positive = M > 0

    def value(self, H: np.ndarray) -> float:
        B = np.linalg.matrix_power(H, self.p)
        if self.metric == "frobenius":
            return 0.5 * float(np.sum((B - self.M) ** 2))
        B = np.maximum(B, 1e-300)
        M = self.M[self.positive]
        return float(np.sum(M * np.log(M / B[self.positive])) - M.sum() + B.sum())

    def residual(self, f: float) -> float:
        return math.sqrt(2.0 * f) if self.metric == "frobenius" else f

    def gradient(self, H: np.ndarray) -> np.ndarray:
        powers = _powers(H, self.p)
        B = powers[self.p]
        if self.metric == "frobenius":
            outer = B - self.M
        else:
            outer = np.ones_like(B)
            outer[self.positive] -= self.M[self.positive] / np.maximum(B[self.positive], 1e-300)
        G = np.zeros_like(H)
        for k in range(self.p):
            G += powers[k].T @ outer @ powers[self.p - 1 - k].T
        return G


def _starting_points(M: np.ndarray, p: int, seed: int = 0) -> Iterator[np.ndarray]:
    n = M.shape[0]
    yield project_columns_to_simplex((1.0 - 1.0 / p) * np.eye(n) + M / p)
    yield M.copy()
    rng = np.random.default_rng(seed)
    while True:
        yield rng.dirichlet(np.ones(n), size=n).T


def _damped_newton_direction(H: np.ndarray, M: np.ndarray, p: int, basis: np.ndarray) -> Optional[np.ndarray]:
    """Levenberg-Marquardt direction for H^p = M restricted to zero column sums."""
    n = H.shape[0]
    powers = _powers(H, p)
    # vec(A X B) = (B^T kron A) vec(X), column-major
    J = sum(np.kron(powers[p - 1 - k].T, powers[k]) for k in range(p))
    J = J @ np.kron(np.eye(n), basis)
    r = (powers[p] - M).ravel(order="F")
    mu = float(np.linalg.norm(r))
    try:
        x = np.linalg.solve(J.T @ J + mu * np.eye(J.shape[1]), -(J.T @ r))
    except np.linalg.LinAlgError:
        return None
    return basis @ x.reshape((n - 1, n), order="F")


def _projected_step(objective: _Objective, H: np.ndarray, G: np.ndarray, f: float, step: float):
    """Armijo backtrack along the projected path; retries once from 1/|G|."""
    for trial in (step, 1.0 / max(float(np.linalg.norm(G)), 1e-300)):
        for _ in range(60):
            H_new = project_columns_to_simplex(H - trial * G)
            decrease = float(np.sum(G * (H - H_new)))
            if decrease <= 0:
                break
            f_new = objective.value(H_new)
            if f_new <= f - 1e-4 * decrease:
                return H_new, f_new, trial
            trial *= 0.5
    return None, f, step


def approximate_stochastic_root(
    M,
    p: int,
    max_iter: int = 10_000,
    tol: float = 1e-10,
    metric: str = "frobenius",
    seed: int = 0,
) -> RootResult:
    """Approximate column-stochastic p-th root of M by projected descent.

    Starts at (1-1/p)I + M/p. Each iteration tries a damped Gauss-Newton
    step (small N only), then a spectral (Barzilai-Borwein) projected
    gradient step with a monotone Armijo backtrack. Columns are projected
    onto the simplex after every step. When descent stalls it restarts from
    M and then from seeded random stochastic matrices; the best iterate is
    kept, so `history` never increases. Experimental.
    """
    if isinstance(M, StepOperator):
        M = M.M
    M = M.toarray() if sparse.issparse(M) else np.asarray(M, dtype=float)
    if p < 2 or int(p) != p:
        raise ValueError(f"p must be an integer >= 2, got {p}")
    if metric not in ("frobenius", "kl"):
        raise ValueError(f"unknown metric {metric!r}")
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError("root input must be square")
    if M.min() < -STEP_TOL or np.abs(M.sum(axis=0) - 1.0).max() > 1e-9:
        raise StochasticityError("root input is not column-stochastic")

    p = int(p)
    n = M.shape[0]
    objective = _Objective(M, p, metric)
    basis = null_space(np.ones((1, n))) if 1 < n <= NEWTON_MAX_N else None
    starts = _starting_points(M, p, seed)

    H = next(starts)
    f = objective.value(H)
    G = objective.gradient(H)
    step = 1.0
    trail = [f]
    best_H, best_f = H, f
    history = [objective.residual(f)]
    iterations = 0
    restarts = 0
    converged = history[-1] <= tol

    while not converged and iterations < max_iter:
        iterations += 1
        H_new = None
        if basis is not None:
            direction = _damped_newton_direction(H, M, p, basis)
            if direction is not None:
                H_try = project_columns_to_simplex(H + direction)
                f_try = objective.value(H_try)
                if f_try < f:
                    H_new, f_new = H_try, f_try
        if H_new is None:
            H_new, f_new, step = _projected_step(objective, H, G, f, step)

        stalled = H_new is None
        if not stalled:
            G_new = objective.gradient(H_new)
            s = H_new - H
            sy = float(np.sum(s * (G_new - G)))
            step = float(np.sum(s * s)) / sy if sy > 0 else step * 2.0
            step = min(max(step, 1e-12), 1e12)
            H, G, f = H_new, G_new, f_new
            trail.append(f)
            stalled = len(trail) > STALL_WINDOW and f > STALL_RATIO * trail[-STALL_WINDOW - 1]
            if f < best_f:
                best_H, best_f = H, f

        if stalled:
            restarts += 1
            H = next(starts)
            f = objective.value(H)
            G = objective.gradient(H)
            step = 1.0
            trail = [f]
            if f < best_f:
                best_H, best_f = H, f

        history.append(objective.residual(best_f))
        converged = history[-1] <= tol

    residual = history[-1]
    if restarts:
        logger.debug(f"Stochastic root (p={p}) restarted {restarts} times")
    if not converged:
        logger.warning(
            f"Stochastic root (p={p}, {metric}) did not reach tol {tol:g} after "
            f"{iterations} iterations; residual {residual:.3g}"
        )
    return RootResult(
        H=best_H,
        residual=residual,
        iterations=iterations,
        converged=converged,
        metric=metric,
        history=history,
        restarts=restarts,
    )
