"""Weighted regression of observed trip cost on geographic distance.

The fit supplies baselines for OD pairs absent from the data and the
normalization behind effective distance.
"""

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

from odflow.config import Measure
from odflow.errors import DegenerateFitError, ZeroDenominatorError
from odflow.geo import CellTable
from odflow.ingest import FlowSlice
from odflow.markov import StepOperator


@dataclass(frozen=True)
class ObservedStats:
    median: float
    std: Optional[float]
    weight: float


@dataclass(frozen=True)
class ScatterPoint:
    origin: str
    dest: str
    geo_km: float
    median: float
    weight: float


@dataclass(frozen=True)
class BaselineFit:
    slope: float
    intercept: float
    rmse: float
    n_points: int
    weight_total: float

    def predict(self, geo_km: float) -> float:
        return self.slope * geo_km + self.intercept

    def report(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "rmse": self.rmse,
            "n_points": self.n_points,
            "weight_total": self.weight_total,
        }


@dataclass(frozen=True)
class Baseline:
    baseline: float
    sigma: float
    imputed: bool


def _cost_fields(measure: Measure) -> tuple[str, str, str]:
    if measure == Measure.DURATION:
        return "dur_median", "dur_mean", "dur_std"
    return "dist_median", "dist_mean", "dist_std"


def observed_pairs(
    slices: Iterable[FlowSlice], measure: Measure = Measure.DISTANCE
) -> dict[tuple[str, str], ObservedStats]:
    """Count-weighted median and std per (origin, dest) over the given slices."""
    median_field, mean_field, std_field = _cost_fields(measure)
    acc: dict[tuple[str, str], list[tuple[float, float, Optional[float]]]] = {}
    for s in slices:
        for r in s.records:
            value = r.stat(median_field)
            if value is None:
                value = r.stat(mean_field)
            if value is None:
                continue
            acc.setdefault((r.origin, r.dest), []).append((r.count, value, r.stat(std_field)))

    observed = {}
    for pair in sorted(acc):
        rows = acc[pair]
        weight = math.fsum(c for c, _, _ in rows)
        median = math.fsum(c * v for c, v, _ in rows) / weight
        stds = [(c, sd) for c, _, sd in rows if sd is not None]
        std = math.fsum(c * sd for c, sd in stds) / math.fsum(c for c, _ in stds) if stds else None
        observed[pair] = ObservedStats(median=median, std=std, weight=weight)
    return observed


def scatter_points(
    observed: dict[tuple[str, str], ObservedStats], cells: CellTable
) -> list[ScatterPoint]:
    return [
        ScatterPoint(
            origin=o,
            dest=d,
            geo_km=cells.distance_km(o, d),
            median=stats.median,
            weight=stats.weight,
        )
        for (o, d), stats in sorted(observed.items())
    ]


def fit_points(points: Sequence[ScatterPoint]) -> BaselineFit:
    """Closed-form weighted least squares; sums are exactly rounded, so row order is irrelevant."""
    pts = sorted((p for p in points if p.weight > 0), key=lambda p: (p.origin, p.dest, p.geo_km))
    if len({p.geo_km for p in pts}) < 2:
        raise DegenerateFitError("baseline fit needs at least two distinct geographic distances")
    w = np.array([p.weight for p in pts])
    x = np.array([p.geo_km for p in pts])
    y = np.array([p.median for p in pts])

    W = math.fsum(w)
    x_mean = math.fsum(w * x) / W
    y_mean = math.fsum(w * y) / W
    sxx = math.fsum(w * (x - x_mean) ** 2)
    sxy = math.fsum(w * (x - x_mean) * (y - y_mean))
    if sxx <= 0:
        raise DegenerateFitError("baseline fit design is degenerate (all distances equal)")
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    residuals = y - (slope * x + intercept)
    rmse = math.sqrt(math.fsum(w * residuals**2) / W)
    return BaselineFit(
        slope=slope, intercept=intercept, rmse=rmse, n_points=len(pts), weight_total=W
    )


def fit_baseline(
    slices: Iterable[FlowSlice], cells: CellTable, measure: Measure = Measure.DISTANCE
) -> BaselineFit:
    """Fit observed median cost against centroid distance, weighted by trip counts.

    Self-loops enter at geographic distance 0 and carry most of the weight.
    """
    return fit_points(scatter_points(observed_pairs(slices, measure), cells))


def baseline_for(
    pair: tuple[str, str],
    observed: Optional[ObservedStats],
    fit: BaselineFit,
    cells: CellTable,
) -> Baseline:
    """Observed median (and std) when available, otherwise the regression estimate."""
    if observed is not None:
        sigma = observed.std if observed.std is not None else fit.rmse
        return Baseline(baseline=max(observed.median, 0.0), sigma=sigma, imputed=False)
    origin, dest = pair
    estimate = fit.predict(cells.distance_km(origin, dest))
    return Baseline(baseline=max(estimate, 0.0), sigma=fit.rmse, imputed=True)


def effective_distance(
    x_bar: float, baseline: float, sigma: float, pair: tuple[str, str] | None = None
) -> float:
    denominator = baseline + sigma
    if not denominator > 0:
        raise ZeroDenominatorError(pair)
    return x_bar / denominator


class BaselineModel:
    """Fit plus observed statistics, answering effective-distance queries per pair."""

    def __init__(
        self,
        fit: BaselineFit,
        cells: CellTable,
        observed: dict[tuple[str, str], ObservedStats],
    ):
        self.fit = fit
        self.cells = cells
        self.observed = observed

    @classmethod
    def from_slices(
        cls, slices: Sequence[FlowSlice], cells: CellTable, measure: Measure = Measure.DISTANCE
    ) -> "BaselineModel":
        observed = observed_pairs(slices, measure)
        return cls(fit_points(scatter_points(observed, cells)), cells, observed)

    def baseline(self, origin: str, dest: str) -> Baseline:
        pair = (origin, dest)
        return baseline_for(pair, self.observed.get(pair), self.fit, self.cells)

    def effective(self, origin: str, dest: str, x_bar: float) -> float:
        b = self.baseline(origin, dest)
        return effective_distance(x_bar, b.baseline, b.sigma, (origin, dest))


def impute_step_costs(
    ops: Sequence[StepOperator], fit: BaselineFit, cells: CellTable
) -> list[StepOperator]:
    """Fill missing step costs with the regression estimate at centroid distance."""
    imputed = []
    for op in ops:
        if not op.missing_costs:
            imputed.append(op)
            continue
        data = op.d.data.copy()
        component_cells = op.component.cells
        for j in range(op.n):
            for k in range(op.d.indptr[j], op.d.indptr[j + 1]):
                if math.isnan(data[k]):
                    i = op.d.indices[k]
                    geo = cells.distance_km(component_cells[j], component_cells[i])
                    data[k] = max(fit.predict(geo), 0.0)
        imputed.append(op.with_costs(data))
    return imputed
