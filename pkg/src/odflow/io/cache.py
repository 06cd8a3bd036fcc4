"""Binary operator cache (ODF1) and small metadata files.

Layout, little-endian: magic ``ODF1``, version byte, operator count and N as
uint32, then per operator: t (int32), nnz (uint32), indptr (N + 1 int32),
indices (nnz int32), M values (nnz float64), step costs (nnz float64, NaN
for missing).
"""

import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse

from odflow.config import ColumnSchema
from odflow.errors import SchemaError
from odflow.geo import CellTable, load_cells, write_cells
from odflow.ingest import ComponentSpec, FlowSlice, parse_flows, serialize_flows
from odflow.markov import StepOperator
from odflow.utils import time as utime

MAGIC = b"ODF1"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
_OP_HEADER = struct.Struct("<iI")


def write_operators(ops: Sequence[StepOperator], path: str | Path) -> None:
    n = ops[0].n if ops else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(ops), n))
        for op in ops:
            if op.n != n:
                raise SchemaError(f"operator at step {op.t} is {op.n}x{op.n}, expected {n}x{n}")
            f.write(_OP_HEADER.pack(op.t, op.M.nnz))
            f.write(np.asarray(op.M.indptr, dtype="<i4").tobytes())
            f.write(np.asarray(op.M.indices, dtype="<i4").tobytes())
            f.write(np.asarray(op.M.data, dtype="<f8").tobytes())
            f.write(np.asarray(op.d.data, dtype="<f8").tobytes())


def _take(buf: bytes, offset: int, dtype: str, count: int) -> tuple[np.ndarray, int]:
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(buf):
        raise SchemaError("operator cache is truncated")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy(), offset + size


def read_operators(path: str | Path, component: ComponentSpec) -> list[StepOperator]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise SchemaError(f"{path} is not an operator cache")
    magic, version, count, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise SchemaError(f"{path} is not an operator cache (bad magic)")
    if version != VERSION:
        raise SchemaError(f"{path} has unsupported cache version {version}")
    if n != component.n:
        raise SchemaError(f"{path} holds {n}x{n} operators but the component has {component.n} cells")

    offset = _HEADER.size
    ops = []
    for _ in range(count):
        if offset + _OP_HEADER.size > len(buf):
            raise SchemaError("operator cache is truncated")
        t, nnz = _OP_HEADER.unpack_from(buf, offset)
        offset += _OP_HEADER.size
        indptr, offset = _take(buf, offset, "<i4", n + 1)
        indices, offset = _take(buf, offset, "<i4", nnz)
        values, offset = _take(buf, offset, "<f8", nnz)
        costs, offset = _take(buf, offset, "<f8", nnz)
        M = sparse.csc_matrix((values, indices, indptr), shape=(n, n))
        d = sparse.csc_matrix((costs, indices.copy(), indptr.copy()), shape=(n, n))
        ops.append(StepOperator(t=t, component=component, M=M, d=d))
    return ops


def write_component(component: ComponentSpec, path: str | Path) -> None:
    payload = {
        "cells": list(component.cells),
        "t_range": list(component.t_range),
        "analyzable": component.analyzable,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_component(path: str | Path) -> ComponentSpec:
    try:
        with open(path, "r") as f:
            payload = json.load(f)
        return ComponentSpec(
            cells=tuple(payload["cells"]),
            t_range=tuple(payload["t_range"]),
            analyzable=payload.get("analyzable", True),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"invalid component file {path}: {e}") from e


def write_triplets(matrix, component: ComponentSpec, path: str | Path) -> None:
    """Nonzero entries as (row_cell, col_cell, value); rows are destinations."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.row, coo.col))
    cells = np.asarray(component.cells, dtype=object)
    frame = pd.DataFrame(
        {
            "row_cell": cells[coo.row[order]],
            "col_cell": cells[coo.col[order]],
            "value": coo.data[order],
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


OPERATORS_FILE = "operators.odf"
COMPONENT_FILE = "component.json"
FLOWS_FILE = "flows.csv"
CELLS_FILE = "cells.csv"
SUMMARY_FILE = "summary.json"


@dataclass(frozen=True)
class CacheBundle:
    """Everything the analysis commands need from an ingest run."""

    component: ComponentSpec
    ops: list[StepOperator]
    slices: list[FlowSlice]
    cells: CellTable
    summary: dict

    @property
    def start(self) -> Optional[datetime]:
        value = self.summary.get("start")
        return utime.parse_timestamp(value) if value else None


def write_cache(cache_dir: str | Path, bundle: CacheBundle) -> None:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_operators(bundle.ops, cache_dir / OPERATORS_FILE)
    write_component(bundle.component, cache_dir / COMPONENT_FILE)
    with open(cache_dir / FLOWS_FILE, "w", newline="") as f:
        serialize_flows(bundle.slices, f)
    write_cells(bundle.cells, cache_dir / CELLS_FILE)
    with open(cache_dir / SUMMARY_FILE, "w") as f:
        json.dump(bundle.summary, f, indent=2, sort_keys=True)
        f.write("\n")


def read_cache(cache_dir: str | Path) -> CacheBundle:
    cache_dir = Path(cache_dir)
    missing = [
        name
        for name in (OPERATORS_FILE, COMPONENT_FILE, FLOWS_FILE, CELLS_FILE, SUMMARY_FILE)
        if not (cache_dir / name).exists()
    ]
    if missing:
        raise SchemaError(f"cache {cache_dir} is incomplete (missing {missing[0]}); run `odflow ingest` first")
    component = read_component(cache_dir / COMPONENT_FILE)
    ops = read_operators(cache_dir / OPERATORS_FILE, component)
    with open(cache_dir / FLOWS_FILE, "r", newline="") as f:
        slices = parse_flows(f, ColumnSchema())
    # trailing empty steps are not written to the flow table
    while len(slices) < len(ops):
        slices.append(FlowSlice(t=len(slices)))
    with open(cache_dir / SUMMARY_FILE, "r") as f:
        summary = json.load(f)
    return CacheBundle(
        component=component, ops=ops, slices=slices, cells=load_cells(cache_dir / CELLS_FILE), summary=summary
    )
