"""CSV and JSON writers for analysis results."""

import json
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from odflow.baseline import BaselineFit, ScatterPoint
from odflow.netflow import NetFlowResult
from odflow.paths import PathDecomposition, SweepRow, WindowedOD

FLOAT_FORMAT = "%.17g"


def _write_csv(frame: pd.DataFrame, path: str | Path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")


def write_json(payload, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def netflow_frame(result: NetFlowResult) -> pd.DataFrame:
    start, end = result.window if result.window else (None, None)
    return pd.DataFrame(
        {
            "origin": [e.origin for e in result.entries],
            "dest": [e.dest for e in result.entries],
            "netflow": [e.value for e in result.entries],
            "window_start": start,
            "window_end": end,
        },
        columns=["origin", "dest", "netflow", "window_start", "window_end"],
    )


def write_netflows(result: NetFlowResult, path: str | Path) -> None:
    _write_csv(netflow_frame(result), path)


def windowed_frame(results: Iterable[WindowedOD]) -> pd.DataFrame:
    rows = [
        {
            "origin": r.origin,
            "dest": r.dest,
            "t1": r.window[0],
            "t2": r.window[1],
            "x_bar_km": r.x_bar,
            "P": r.P,
            "d_eff": r.d_eff,
            "gup": "" if r.gup is None else str(r.gup).lower(),
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=["origin", "dest", "t1", "t2", "x_bar_km", "P", "d_eff", "gup"])


def write_windowed(results: Iterable[WindowedOD], path: str | Path) -> None:
    _write_csv(windowed_frame(results), path)


def write_sweep(rows: Iterable[SweepRow], path: str | Path) -> None:
    frame = pd.DataFrame(
        [{"day": r.day, "origin": r.origin, "dest": r.dest, "d_eff": r.d_eff, "P": r.P} for r in rows],
        columns=["day", "origin", "dest", "d_eff", "P"],
    )
    _write_csv(frame, path)


def write_rto_series(rows: Sequence[dict], path: str | Path) -> None:
    """Rows with keys day, variant, city_value_km, excluded_mass."""
    _write_csv(pd.DataFrame(list(rows), columns=["day", "variant", "city_value_km", "excluded_mass"]), path)


def write_scatter(points: Iterable[ScatterPoint], path: str | Path) -> None:
    frame = pd.DataFrame(
        [{"geo_km": p.geo_km, "median_km": p.median, "weight": p.weight} for p in points],
        columns=["geo_km", "median_km", "weight"],
    )
    _write_csv(frame, path)


def write_fit_report(fit: BaselineFit, path: str | Path) -> None:
    write_json(fit.report(), path)


def decomposition_payload(decomposition: PathDecomposition) -> dict:
    return {
        "origin": decomposition.origin,
        "dest": decomposition.dest,
        "window": list(decomposition.window),
        "exhaustive": decomposition.exhaustive,
        "complete": decomposition.complete,
        "beam_width": decomposition.beam_width,
        "paths": [
            {
                "nodes": list(p.nodes),
                "arrival_step": p.arrival_step,
                "prob": p.prob,
                "dist_km": p.dist,
            }
            for p in decomposition.paths
        ],
    }


def write_paths(decompositions: Iterable[PathDecomposition], path: str | Path) -> None:
    write_json([decomposition_payload(d) for d in decompositions], path)


def write_vector(cells: Sequence[str], values, path: str | Path, column: str = "value") -> None:
    _write_csv(pd.DataFrame({"cell_id": list(cells), column: np.asarray(values, dtype=float)}), path)
