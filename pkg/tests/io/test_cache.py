import io
import json
import math
import struct

import numpy as np
import pandas as pd
import pytest

from odflow.errors import SchemaError
from odflow.geo import load_cells
from odflow.ingest import ComponentSpec, FlowSlice, parse_flows
from odflow.io.cache import (
    COMPONENT_FILE,
    OPERATORS_FILE,
    CacheBundle,
    read_cache,
    read_component,
    read_operators,
    write_cache,
    write_component,
    write_operators,
    write_triplets,
)
from odflow.markov import build_step_operators
from tests.conftest import TINY_FLOWS
from tests.helpers import dense_operator, make_component, random_chain


def test_operators_round_trip(tmp_path, rng):
    component, ops = random_chain(rng, 7, 4, density=0.3)
    path = tmp_path / "ops.odf"
    write_operators(ops, path)
    loaded = read_operators(path, component)
    assert [op.t for op in loaded] == [0, 1, 2, 3]
    for a, b in zip(ops, loaded):
        np.testing.assert_array_equal(a.M.toarray(), b.M.toarray())
        np.testing.assert_array_equal(a.d.data, b.d.data)


def test_missing_costs_survive(tmp_path):
    component = make_component(2)
    M = np.array([[0.5, 1.0], [0.5, 0.0]])
    D = np.array([[0.1, 2.0], [math.nan, 0.0]])
    path = tmp_path / "ops.odf"
    write_operators([dense_operator(M, D, 0, component)], path)
    (loaded,) = read_operators(path, component)
    assert loaded.missing_costs == 1
    assert math.isnan(loaded.entry(1, 0)[1])


class TestCorruptCache:
    """Tests for rejected operator caches."""

    def write(self, tmp_path, rng):
        component, ops = random_chain(rng, 3, 2)
        path = tmp_path / "ops.odf"
        write_operators(ops, path)
        return component, path

    def test_bad_magic(self, tmp_path, rng):
        component, path = self.write(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(SchemaError, match="bad magic"):
            read_operators(path, component)

    def test_bad_version(self, tmp_path, rng):
        component, path = self.write(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(SchemaError, match="version 9"):
            read_operators(path, component)

    def test_truncated(self, tmp_path, rng):
        component, path = self.write(tmp_path, rng)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(SchemaError, match="truncated"):
            read_operators(path, component)

    def test_wrong_size(self, tmp_path, rng):
        _, path = self.write(tmp_path, rng)
        with pytest.raises(SchemaError, match="3x3"):
            read_operators(path, make_component(4))

    def test_header_only(self, tmp_path):
        path = tmp_path / "ops.odf"
        path.write_bytes(struct.pack("<4sB", b"ODF1", 1))
        with pytest.raises(SchemaError):
            read_operators(path, make_component(1))


def test_component_round_trip(tmp_path):
    component = ComponentSpec(cells=("a", "b"), t_range=(2, 5), analyzable=False)
    path = tmp_path / COMPONENT_FILE
    write_component(component, path)
    assert json.loads(path.read_text())["cells"] == ["a", "b"]
    loaded = read_component(path)
    assert (loaded.cells, loaded.t_range, loaded.analyzable) == (("a", "b"), (2, 5), False)


def test_invalid_component_file(tmp_path):
    path = tmp_path / COMPONENT_FILE
    path.write_text('{"t_range": [0, 1]}')
    with pytest.raises(SchemaError, match="invalid component file"):
        read_component(path)


def test_triplets_sorted_by_column(tmp_path):
    component = ComponentSpec(cells=("a", "b"), t_range=(0, 0))
    path = tmp_path / "triplets.csv"
    write_triplets(np.array([[0.25, 1.0], [0.75, 0.0]]), component, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["row_cell", "col_cell", "value"]
    assert list(zip(frame.row_cell, frame.col_cell, frame.value)) == [
        ("a", "a", 0.25),
        ("b", "a", 0.75),
        ("a", "b", 1.0),
    ]


class TestCacheBundle:
    """Tests for the ingest cache directory."""

    def bundle(self, tiny_files):
        _, cells_path = tiny_files
        slices = parse_flows(io.StringIO(TINY_FLOWS))
        slices.append(FlowSlice(t=2))
        component = ComponentSpec(cells=("a", "b", "c"), t_range=(0, 2))
        return CacheBundle(
            component=component,
            ops=build_step_operators(slices, component),
            slices=slices,
            cells=load_cells(cells_path),
            summary={"cells": 3, "steps": 3, "start": "2025-06-01T00:00:00Z"},
        )

    def test_round_trip(self, tmp_path, tiny_files):
        bundle = self.bundle(tiny_files)
        write_cache(tmp_path / "cache", bundle)
        loaded = read_cache(tmp_path / "cache")
        assert loaded.component.cells == ("a", "b", "c")
        assert len(loaded.ops) == 3
        assert len(loaded.slices) == 3
        assert len(loaded.slices[2]) == 0
        assert loaded.slices[0].total == 30
        assert loaded.summary["steps"] == 3
        assert loaded.start.hour == 0 and loaded.start.day == 1
        assert set(loaded.cells) == {"a", "b", "c"}

    def test_incomplete_cache(self, tmp_path, tiny_files):
        write_cache(tmp_path / "cache", self.bundle(tiny_files))
        (tmp_path / "cache" / OPERATORS_FILE).unlink()
        with pytest.raises(SchemaError, match="odflow ingest"):
            read_cache(tmp_path / "cache")
