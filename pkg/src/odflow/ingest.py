"""Parse OD flow tables into per-step slices and extract analyzable components."""

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, TextIO

import networkx as nx

from odflow.config import ColumnSchema
from odflow.errors import EmptyComponentError, IngestError, RowError, SchemaError, WindowError
from odflow.utils import time as utime
from odflow.utils.logger import logger

STAT_FIELDS = ("dist_mean", "dist_median", "dist_std", "dur_mean", "dur_median", "dur_std")
CANONICAL_COLUMNS = ("time", "origin", "dest", "count") + STAT_FIELDS


@dataclass(frozen=True)
class FlowRecord:
    t: int
    origin: str
    dest: str
    count: float
    dist_mean: Optional[float] = None
    dist_median: Optional[float] = None
    dist_std: Optional[float] = None
    dur_mean: Optional[float] = None
    dur_median: Optional[float] = None
    dur_std: Optional[float] = None

    def __post_init__(self):
        if not self.count > 0:
            raise ValueError(f"count must be positive, got {self.count}")
        for name in STAT_FIELDS:
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def stat(self, name: str) -> Optional[float]:
        return getattr(self, name)


@dataclass(frozen=True)
class WallTime:
    start: datetime
    interval_minutes: int


@dataclass(frozen=True)
class FlowSlice:
    t: int
    records: tuple[FlowRecord, ...] = ()
    wall_time: Optional[WallTime] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total(self) -> float:
        return math.fsum(r.count for r in self.records)

    def edges(self) -> set[tuple[str, str]]:
        return {(r.origin, r.dest) for r in self.records}


@dataclass(frozen=True)
class ComponentSpec:
    cells: tuple[str, ...]
    t_range: tuple[int, int]
    analyzable: bool = True
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if list(self.cells) != sorted(self.cells):
            raise ValueError("component cells must be sorted lexicographically")
        object.__setattr__(self, "index", {c: k for k, c in enumerate(self.cells)})

    @property
    def n(self) -> int:
        return len(self.cells)

    def __contains__(self, cell: object) -> bool:
        return cell in self.index

    def position(self, cell: str) -> int:
        try:
            return self.index[cell]
        except KeyError:
            raise SchemaError(f"cell {cell!r} is not in the component") from None


def _parse_float(raw: str, name: str, line: int, required: bool) -> Optional[float]:
    raw = raw.strip() if raw is not None else ""
    if raw == "" or raw.lower() in ("nan", "na", "null"):
        if required:
            raise RowError(line, f"missing value for {name}")
        return None
    try:
        value = float(raw)
    except ValueError:
        raise RowError(line, f"unparsable {name} {raw!r}") from None
    if not math.isfinite(value):
        raise RowError(line, f"non-finite {name} {raw!r}")
    return value


def _merge(records: list[FlowRecord]) -> FlowRecord:
    """Merge duplicate (t, origin, dest) rows: counts add, statistics are count-weighted."""
    if len(records) == 1:
        return records[0]
    total = math.fsum(r.count for r in records)
    stats = {}
    for name in STAT_FIELDS:
        present = [(r.count, r.stat(name)) for r in records if r.stat(name) is not None]
        if present:
            weight = math.fsum(c for c, _ in present)
            stats[name] = math.fsum(c * v for c, v in present) / weight
        else:
            stats[name] = None
    first = records[0]
    return FlowRecord(t=first.t, origin=first.origin, dest=first.dest, count=total, **stats)


class FlowParser:
    """Streaming parser for NetMob-like OD tables.

    Row errors are collected up to the schema's error budget; skipped rows
    (below `min_count`) are tallied.
    """

    def __init__(self, schema: ColumnSchema | None = None):
        self.schema = schema or ColumnSchema()
        self.errors: list[RowError] = []
        self.skipped = 0
        self.rows = 0

    def _columns(self, header: Sequence[str]) -> dict[str, Optional[str]]:
        required = {
            "time": self.schema.time,
            "origin": self.schema.origin,
            "dest": self.schema.dest,
            "count": self.schema.count,
        }
        missing = [col for col in required.values() if col not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        columns = dict(required)
        for name in STAT_FIELDS:
            col = getattr(self.schema, name)
            columns[name] = col if col in header else None
        return columns

    def _record_error(self, err: RowError) -> None:
        self.errors.append(err)
        logger.debug(f"Row error: {err}")
        if len(self.errors) > self.schema.error_budget:
            raise IngestError(
                f"{len(self.errors)} row errors exceed the budget of {self.schema.error_budget}; "
                f"first: {self.errors[0]}"
            )

    def parse(self, stream: TextIO) -> list[FlowSlice]:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise SchemaError("flow table has no header row")
        columns = self._columns([c.strip() for c in reader.fieldnames])

        raw_rows = []
        for line, row in enumerate(reader, start=2):
            self.rows += 1
            try:
                time_raw = (row.get(columns["time"]) or "").strip()
                origin = (row.get(columns["origin"]) or "").strip()
                dest = (row.get(columns["dest"]) or "").strip()
                if not time_raw or not origin or not dest:
                    raise RowError(line, "empty time, origin or dest")
                count = _parse_float(row.get(columns["count"]), "count", line, required=True)
                if count <= 0:
                    raise RowError(line, f"count must be positive, got {count}")
                stats = {
                    name: _parse_float(row.get(col), name, line, required=False)
                    if col is not None
                    else None
                    for name, col in ((n, columns[n]) for n in STAT_FIELDS)
                }
                for name, value in stats.items():
                    if value is not None and value < 0:
                        raise RowError(line, f"{name} must be non-negative, got {value}")
            except RowError as err:
                self._record_error(err)
                continue
            if count < self.schema.min_count:
                self.skipped += 1
                continue
            raw_rows.append((line, time_raw, origin, dest, count, stats))

        return self._group(raw_rows)

    def _steps(self, raw_rows) -> tuple[list[Optional[int]], Optional[WallTime]]:
        """Resolve the time column to 0-based step indices."""
        if all(r[1].lstrip("-").isdigit() for r in raw_rows):
            wall = None
            if self.schema.start is not None:
                wall = WallTime(utime.parse_timestamp(self.schema.start), self.schema.interval_minutes)
            return [int(r[1]) for r in raw_rows], wall

        stamps = []
        for line, time_raw, *_ in raw_rows:
            try:
                stamps.append(utime.parse_timestamp(time_raw))
            except ValueError:
                self._record_error(RowError(line, f"unparsable timestamp {time_raw!r}"))
                stamps.append(None)
        valid = [s for s in stamps if s is not None]
        if not valid:
            return [None] * len(raw_rows), None
        if self.schema.start is not None:
            start = utime.parse_timestamp(self.schema.start)
        else:
            start = min(valid)
        steps = []
        for (line, *_), stamp in zip(raw_rows, stamps):
            if stamp is None:
                steps.append(None)
                continue
            try:
                steps.append(utime.step_index(stamp, start, self.schema.interval_minutes))
            except ValueError as e:
                self._record_error(RowError(line, str(e)))
                steps.append(None)
        return steps, WallTime(start, self.schema.interval_minutes)

    def _group(self, raw_rows) -> list[FlowSlice]:
        steps, wall = self._steps(raw_rows)
        grouped: dict[int, dict[tuple[str, str], list[FlowRecord]]] = {}
        for (line, _, origin, dest, count, stats), t in zip(raw_rows, steps):
            if t is None:
                continue
            if t < 0:
                self._record_error(RowError(line, f"negative time-step {t}"))
                continue
            record = FlowRecord(t=t, origin=origin, dest=dest, count=count, **stats)
            grouped.setdefault(t, {}).setdefault((origin, dest), []).append(record)

        if not grouped:
            return []
        slices = []
        for t in range(max(grouped) + 1):
            pairs = grouped.get(t, {})
            records = tuple(_merge(pairs[key]) for key in sorted(pairs))
            slices.append(FlowSlice(t=t, records=records, wall_time=_wall_for(wall, t)))
        logger.debug(
            f"Parsed {self.rows} rows into {len(slices)} slices "
            f"({self.skipped} skipped, {len(self.errors)} errors)"
        )
        return slices


def _wall_for(wall: Optional[WallTime], t: int) -> Optional[WallTime]:
    if wall is None:
        return None
    return WallTime(utime.step_start(wall.start, t, wall.interval_minutes), wall.interval_minutes)


def parse_flows(
    stream: TextIO, schema: ColumnSchema | None = None
) -> list[FlowSlice]:
    """Parse a flow table into slices indexed by time-step (list index == t)."""
    return FlowParser(schema).parse(stream)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def serialize_flows(slices: Iterable[FlowSlice], stream: TextIO) -> None:
    """Write slices in the canonical CSV layout (integer step indices)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for s in slices:
        for r in s.records:
            writer.writerow(
                [r.t, r.origin, r.dest, _fmt(r.count)] + [_fmt(r.stat(n)) for n in STAT_FIELDS]
            )


def _check_range(slices: Sequence[FlowSlice], t_range: tuple[int, int]) -> None:
    t_first, t_last = t_range
    if not slices or t_first > t_last or t_first < 0 or t_last >= len(slices):
        raise WindowError(f"step range {t_first}..{t_last} is outside the loaded data")


def union_graph(slices: Sequence[FlowSlice], t_range: tuple[int, int] | None = None) -> nx.DiGraph:
    """Directed graph with an edge origin->dest for every record in range."""
    if t_range is None:
        t_range = (0, len(slices) - 1)
    _check_range(slices, t_range)
    graph = nx.DiGraph(t_range=t_range)
    for s in slices[t_range[0] : t_range[1] + 1]:
        for r in s.records:
            graph.add_edge(r.origin, r.dest)
    return graph


def strongly_connected_components(graph: nx.DiGraph) -> list[ComponentSpec]:
    """SCC partition, largest first. Singletons without a self-loop are non-analyzable."""
    if graph.number_of_nodes() == 0:
        raise EmptyComponentError("graph has no nodes")
    t_range = graph.graph.get("t_range", (0, 0))
    components = []
    for nodes in nx.strongly_connected_components(graph):
        cells = tuple(sorted(nodes))
        analyzable = len(cells) > 1 or graph.has_edge(cells[0], cells[0])
        components.append(ComponentSpec(cells=cells, t_range=t_range, analyzable=analyzable))
    components.sort(key=lambda c: (-c.n, c.cells))
    return components


def select_component(graph: nx.DiGraph, selection: str = "largest") -> ComponentSpec:
    """Pick a component: 'largest', 'cell:<id>' or an explicit comma-separated cell list."""
    components = strongly_connected_components(graph)
    if selection == "largest":
        chosen = next((c for c in components if c.analyzable), None)
        if chosen is None:
            raise EmptyComponentError(
                "no analyzable component (every component is a singleton without a self-loop)"
            )
        return chosen
    if selection.startswith("cell:"):
        cell = selection[len("cell:") :]
        chosen = next((c for c in components if cell in c), None)
        if chosen is None:
            raise SchemaError(f"cell {cell!r} does not occur in the flow graph")
        if not chosen.analyzable:
            raise EmptyComponentError(f"cell {cell!r} lies in a non-analyzable singleton")
        return chosen

    cells = tuple(sorted({c.strip() for c in selection.split(",") if c.strip()}))
    unknown = [c for c in cells if c not in graph]
    if unknown:
        raise SchemaError(f"cell {unknown[0]!r} does not occur in the flow graph")
    sub = graph.subgraph(cells)
    if not cells or not nx.is_strongly_connected(sub):
        raise EmptyComponentError("explicit cell list is not strongly connected")
    if len(cells) == 1 and not sub.has_edge(cells[0], cells[0]):
        raise EmptyComponentError("explicit singleton has no self-loop")
    return ComponentSpec(cells=cells, t_range=graph.graph.get("t_range", (0, 0)))


def restrict(slices: Sequence[FlowSlice], component: ComponentSpec) -> list[FlowSlice]:
    """Drop records whose origin or dest lies outside the component."""
    return [
        FlowSlice(
            t=s.t,
            records=tuple(r for r in s.records if r.origin in component and r.dest in component),
            wall_time=s.wall_time,
        )
        for s in slices
    ]
