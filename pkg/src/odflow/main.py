import argparse
import sys
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version

import argcomplete
import numpy as np
from rich.console import Console
from rich.table import Table
from rich.text import Text

from odflow.baseline import BaselineModel, fit_baseline, impute_step_costs, scatter_points
from odflow.completers import cell_completer, config_file_completer
from odflow.config import GapPolicy, Measure, RtoVariant, RunConfig, load_config, parse_window
from odflow.errors import DegenerateFitError, EmptyComponentError, OdflowError, SchemaError, WindowError
from odflow.geo import CellTable, load_cells, write_cells
from odflow.ingest import (
    FlowParser,
    restrict,
    select_component,
    serialize_flows,
    strongly_connected_components,
    union_graph,
)
from odflow.io import tables
from odflow.io.cache import CacheBundle, read_cache, write_cache, write_triplets
from odflow.io.geojson import write_netflow_geojson
from odflow.markov import approximate_stochastic_root, build_step_operators, elapse
from odflow.netflow import initial_distribution, net_flows, top_percentile
from odflow.paths import (
    SweepDay,
    candidate_pairs,
    city_rto,
    decompose_paths,
    direct_edges,
    evaluate_pairs,
    select_effective,
    time_sweep,
)
from odflow.runtime.runtime import Runtime
from odflow.synth import generate
from odflow.utils import time as utime
from odflow.utils.logger import logger

try:
    __version__ = version("odflow-cli")
except PackageNotFoundError:
    __version__ = "unknown"

USAGE_EXIT = 64

# CLI flag -> RunConfig field
OVERRIDES = {
    "data": "data",
    "cells": "cells",
    "cache": "cache",
    "out": "out",
    "component": "component",
    "window": "window",
    "steps_per_day": "steps_per_day",
    "percentile": "percentile",
    "p_cut": "p_cut",
    "gup_only": "gup_only",
    "variant": "variant",
    "measure": "measure",
    "gap_policy": "gap_policy",
    "pair_budget": "pair_budget",
    "top_k": "top_k",
    "seed": "seed",
    "threads": "threads",
}


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser exiting with the conventional usage status."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def effective_config(args) -> RunConfig:
    """Config file values overridden by any flags given on the command line."""
    config = load_config(args.config)
    updates = {
        field: getattr(args, flag)
        for flag, field in OVERRIDES.items()
        if getattr(args, flag, None) is not None
    }
    if not updates:
        return config
    try:
        return RunConfig(**{**config.dump(), **updates})
    except ValueError as e:
        raise SchemaError(f"invalid option: {e}") from e


def _window(config: RunConfig, n_steps: int) -> tuple[int, int]:
    window = parse_window(config.window) if config.window else (0, n_steps - 1)
    if n_steps == 0 or window[1] >= n_steps:
        raise WindowError(f"window {window[0]}..{window[1]} is outside the loaded steps 0..{n_steps - 1}")
    return window


def _day_window(config: RunConfig, n_steps: int) -> list[tuple[int, int, int]]:
    if not config.steps_per_day:
        raise SchemaError("steps_per_day is required for daily windows")
    first, last = parse_window(config.window) if config.window else (0, config.steps_per_day - 1)
    try:
        window = utime.DayWindow(config.steps_per_day, first, last)
    except ValueError as e:
        raise WindowError(str(e)) from e
    days = window.ranges(n_steps)
    if not days:
        raise WindowError("no complete day covers the requested window")
    return days


def _baseline_model(config: RunConfig, bundle: CacheBundle) -> BaselineModel:
    slices = bundle.slices
    if config.fit_window:
        first, last = parse_window(config.fit_window)
        slices = slices[first : last + 1]
    return BaselineModel.from_slices(slices, bundle.cells, config.measure)


def _print_summary(title: str, rows: list[tuple[str, str]]) -> None:
    table = Table(title=title, show_header=False)
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="white")
    for key, value in rows:
        table.add_row(key, value)
    Console().print(table)


def ingest_cli(args):
    config = effective_config(args)
    if not config.data or not config.cells:
        raise SchemaError("ingest needs both --data and --cells")

    parser = FlowParser(config.schema_)
    with open(config.data, "r", newline="") as f:
        slices = parser.parse(f)
    if not slices:
        raise EmptyComponentError(f"{config.data} holds no usable rows")
    cells = load_cells(config.cells)
    cells.require(sorted({c for s in slices for r in s.records for c in (r.origin, r.dest)}))

    graph = union_graph(slices)
    components = strongly_connected_components(graph)
    component = select_component(graph, config.component)
    restricted = restrict(slices, component)
    ops = build_step_operators(restricted, component, config.gap_policy, config.measure)

    missing = sum(op.missing_costs for op in ops)
    if missing:
        try:
            ops = impute_step_costs(ops, fit_baseline(restricted, cells, config.measure), cells)
            logger.info(f"Imputed {missing} missing step costs from the baseline fit")
        except DegenerateFitError as e:
            logger.warning(f"Step costs left missing: {e}")

    start = slices[0].wall_time.start.isoformat() if slices[0].wall_time else None
    summary = {
        "cells": component.n,
        "steps": len(ops),
        "rows": parser.rows,
        "records": sum(len(s) for s in restricted),
        "dropped_rows": len(parser.errors) + parser.skipped,
        "row_errors": len(parser.errors),
        "skipped_rows": parser.skipped,
        "components": [c.n for c in components],
        "analyzable_components": sum(c.analyzable for c in components),
        "measure": config.measure.value,
        "imputed_costs": missing,
        "interval_minutes": config.schema_.interval_minutes,
        "start": start,
    }
    component_cells = {c: cells[c] for c in component.cells}
    bundle = CacheBundle(
        component=component,
        ops=ops,
        slices=restricted,
        cells=CellTable(component_cells),
        summary=summary,
    )
    with Runtime(config.cache, config.threads) as runtime:
        write_cache(runtime.out_dir, bundle)
        runtime.echo_config(config)

    _print_summary(
        "Ingest",
        [
            ("component cells", str(component.n)),
            ("steps", str(len(ops))),
            ("records", str(summary["records"])),
            ("dropped rows", str(summary["dropped_rows"])),
            ("components", str(len(components))),
            ("cache", str(config.cache)),
        ],
    )


def netflow_cli(args):
    config = effective_config(args)
    bundle = read_cache(config.cache)
    first, last = _window(config, len(bundle.ops))
    q = 75.0 if config.percentile is None else config.percentile

    init = initial_distribution(bundle.slices[first], bundle.component)
    elapsed = elapse(bundle.ops[first : last + 1])
    result = top_percentile(net_flows(elapsed, init), q)

    with Runtime(config.out, config.threads) as runtime:
        tables.write_netflows(result, runtime.path("netflow.csv"))
        write_netflow_geojson(result, bundle.cells, runtime.path("netflow.geojson"))
        runtime.echo_config(config)

    console = Console()
    msg = Text(f"Net flows {first}..{last}: ", style="bold green")
    msg.append(f"{len(result)} pairs at or above the {q:g}th percentile ", style="white")
    msg.append(f"(|s| >= {result.threshold:.6g})", style="bold magenta")
    console.print(msg)


def effdist_cli(args):
    config = effective_config(args)
    bundle = read_cache(config.cache)
    first, last = _window(config, len(bundle.ops))
    ops = bundle.ops[first : last + 1]
    q = 99.0 if config.percentile is None else config.percentile

    model = _baseline_model(config, bundle)
    gup_slices = bundle.slices if config.gup_scope == "full" else bundle.slices[first : last + 1]
    direct = direct_edges(gup_slices)

    if args.origin or args.dest:
        if not (args.origin and args.dest):
            raise SchemaError("--origin and --dest must be given together")
        pairs = [(args.origin, args.dest)]
    else:
        exclude = direct if config.gup_only else None
        pairs = candidate_pairs(ops, config.p_cut, config.pair_budget, exclude=exclude)
    if not pairs:
        raise WindowError(f"no candidate pair can reach p_cut {config.p_cut:g}")

    with Runtime(config.out, config.threads) as runtime:
        results = evaluate_pairs(ops, pairs, model, direct, runtime.map)
        selected = select_effective(results, q, config.p_cut)
        if not selected:
            raise WindowError(f"no pair reaches p_cut {config.p_cut:g}")
        selected.sort(key=lambda r: (-r.d_eff, r.origin, r.dest))
        selected = [replace(r, window=(first, last)) for r in selected]

        tables.write_windowed(selected, runtime.path("effdist.csv"))
        tables.write_fit_report(model.fit, runtime.path("fit_report.json"))
        tables.write_scatter(scatter_points(model.observed, bundle.cells), runtime.path("scatter.csv"))
        if config.top_k > 0:
            top = selected[: config.top_pairs]
            decompositions = runtime.map(
                lambda r: decompose_paths(ops, r.origin, r.dest, top_k=config.top_k).at_steps(first), top
            )
            tables.write_paths(decompositions, runtime.path("paths.json"))
        runtime.echo_config(config)

    table = Table(title=f"Effective distance, steps {first}..{last}")
    for name in ("Origin", "Dest", "x_bar", "P", "D_eff", "GUP"):
        table.add_column(name)
    for r in selected[:20]:
        table.add_row(r.origin, r.dest, f"{r.x_bar:.4g}", f"{r.P:.3g}", f"{r.d_eff:.4g}", str(r.gup))
    Console().print(table)


def _day_label(bundle: CacheBundle, config: RunConfig, day: int) -> str:
    start = bundle.start
    if start is None:
        return utime.day_label(None, day)
    # only whole days of wall time carry a calendar date
    minutes = bundle.summary.get("interval_minutes", 0) * config.steps_per_day
    return utime.day_label(start, day) if minutes == 24 * 60 else utime.day_label(None, day)


def rto_cli(args):
    config = effective_config(args)
    bundle = read_cache(config.cache)
    days = _day_window(config, len(bundle.ops))

    rows = []
    for day, first, last in days:
        ops = bundle.ops[first : last + 1]
        result = city_rto(ops, bundle.slices[first], len(ops), config.variant)
        rows.append(
            {
                "day": _day_label(bundle, config, day),
                "variant": config.variant.value,
                "city_value_km": result.value,
                "excluded_mass": result.excluded_mass,
            }
        )

    with Runtime(config.out, config.threads) as runtime:
        tables.write_rto_series(rows, runtime.path("rto.csv"))
        runtime.echo_config(config)

    table = Table(title=f"City {config.variant.value} return-to-origin")
    table.add_column("Day", style="cyan")
    table.add_column("Value", style="white")
    table.add_column("Excluded mass", style="white")
    for row in rows:
        table.add_row(row["day"], f"{row['city_value_km']:.4g}", f"{row['excluded_mass']:.3g}")
    Console().print(table)


def sweep_cli(args):
    config = effective_config(args)
    bundle = read_cache(config.cache)
    days = _day_window(config, len(bundle.ops))
    q = 99.0 if config.percentile is None else config.percentile

    model = _baseline_model(config, bundle)
    direct = direct_edges(bundle.slices)
    sweep_days = [
        SweepDay(
            label=_day_label(bundle, config, day),
            ops=tuple(bundle.ops[first : last + 1]),
            direct=None
            if config.gup_scope == "full"
            else frozenset(direct_edges(bundle.slices[first : last + 1])),
        )
        for day, first, last in days
    ]
    with Runtime(config.out, config.threads) as runtime:
        rows = time_sweep(sweep_days, model, direct, q, config.p_cut, config.pair_budget, runtime.map)
        tables.write_sweep(rows, runtime.path("sweep.csv"))
        runtime.echo_config(config)

    console = Console()
    msg = Text(f"Sweep over {len(sweep_days)} days: ", style="bold green")
    msg.append(f"{len(rows)} high effective-distance pairs", style="white")
    console.print(msg)


def synth_cli(args):
    config = effective_config(args)
    with Runtime(config.out, config.threads) as runtime:
        dataset = generate(config.synth, config.seed, runtime.map)
        flows_path = runtime.path("flows.csv")
        cells_path = runtime.path("cells.csv")
        with open(flows_path, "w", newline="") as f:
            serialize_flows(dataset.slices, f)
        write_cells(dataset.network.cells, cells_path)
        tables.write_vector(
            dataset.fixed_point.cells, dataset.fixed_point.v, runtime.path("fixed_point.csv"), "v"
        )
        start = dataset.slices[0].wall_time.start.isoformat() if dataset.slices else None
        schema = config.schema_.model_copy(
            update={"interval_minutes": config.synth.step_minutes, "start": start}
        )
        echo = config.model_copy(
            update={
                "data": str(flows_path),
                "cells": str(cells_path),
                "steps_per_day": config.synth.steps_per_day,
                "schema_": schema,
            }
        )
        runtime.echo_config(echo)

    _print_summary(
        "Synthetic dataset",
        [
            ("cells", str(dataset.network.n)),
            ("steps", str(len(dataset.slices))),
            ("agents", str(config.synth.n_agents)),
            ("fixed-point residual", f"{dataset.fixed_point.residual:.3g}"),
            ("output", str(config.out)),
        ],
    )


def root_cli(args):
    config = effective_config(args)
    bundle = read_cache(config.cache)
    if not 0 <= args.step < len(bundle.ops):
        raise WindowError(f"step {args.step} is outside the loaded steps 0..{len(bundle.ops) - 1}")
    op = bundle.ops[args.step]
    result = approximate_stochastic_root(op, args.power, args.max_iter, metric=args.metric)

    with Runtime(config.out, config.threads) as runtime:
        write_triplets(result.H, bundle.component, runtime.path("root_triplets.csv"))
        report = {
            "step": args.step,
            "power": args.power,
            "metric": result.metric,
            "residual": result.residual,
            "iterations": result.iterations,
            "converged": result.converged,
            "restarts": result.restarts,
            "experimental": True,
        }
        if args.cell:
            j = bundle.component.position(args.cell)
            report["cell"] = args.cell
            report["column"] = dict(zip(bundle.component.cells, np.asarray(result.H)[:, j].tolist()))
        tables.write_json(report, runtime.path("root_report.json"))
        runtime.echo_config(config)

    console = Console()
    msg = Text("Experimental: ", style="bold yellow")
    msg.append(f"{args.power}-th root of step {args.step}, residual {result.residual:.3g}", style="white")
    console.print(msg)


def _add_common(parser, data=False):
    parser.add_argument(
        "-f",
        "--config",
        default=None,
        help="Path to the YAML config file; flags override its values",
    ).completer = config_file_completer
    parser.add_argument("--cache", help="Ingest cache directory, default to odflow-cache")
    parser.add_argument("--out", help="Output directory, default to odflow-out")
    parser.add_argument("--threads", type=int, help="Worker threads, default to 1")
    if data:
        parser.add_argument("--data", help="Path to the OD flow CSV")
        parser.add_argument("--cells", help="Path to the cells manifest CSV (cell_id,lat,lon)")


def _add_window(parser, daily=False):
    help_text = "Within-day step offsets START..END" if daily else "Inclusive step range START..END"
    parser.add_argument("--window", help=help_text)
    if daily:
        parser.add_argument("--steps-per-day", dest="steps_per_day", type=int, help="Steps per day")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="odflow", description="OD flow pseudo Markov-chain analytics")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # ingest command
    parser_ingest = subparsers.add_parser("ingest", help="Parse flows and build the operator cache")
    _add_common(parser_ingest, data=True)
    parser_ingest.add_argument(
        "--component", help="largest, cell:<id> or a comma-separated cell list, default to largest"
    )
    parser_ingest.add_argument("--measure", choices=[m.value for m in Measure], help="Step cost measure")
    parser_ingest.add_argument(
        "--gap-policy", dest="gap_policy", choices=[g.value for g in GapPolicy], help="Zero-outflow handling"
    )
    parser_ingest.set_defaults(func=ingest_cli)

    # netflow command
    parser_netflow = subparsers.add_parser("netflow", help="Time-elapsed net flows over a window")
    _add_common(parser_netflow)
    _add_window(parser_netflow)
    parser_netflow.add_argument("--percentile", type=float, help="Keep the top percentile, default to 75")
    parser_netflow.set_defaults(func=netflow_cli)

    # effdist command
    parser_effdist = subparsers.add_parser("effdist", help="Windowed first-passage and effective distances")
    _add_common(parser_effdist)
    _add_window(parser_effdist)
    parser_effdist.add_argument("--percentile", type=float, help="D_eff percentile, default to 99")
    parser_effdist.add_argument("--p-cut", dest="p_cut", type=float, help="Path-hit cutoff, default to 1e-6")
    parser_effdist.add_argument(
        "--gup-only",
        dest="gup_only",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Only pairs without a direct transition, default on",
    )
    parser_effdist.add_argument("--pair-budget", dest="pair_budget", type=int, help="Maximum pairs propagated")
    parser_effdist.add_argument("--top-k", dest="top_k", type=int, help="Paths listed per top pair")
    parser_effdist.add_argument("--measure", choices=[m.value for m in Measure], help="Baseline cost measure")
    parser_effdist.add_argument("--origin", help="Evaluate a single pair from this cell").completer = cell_completer
    parser_effdist.add_argument("--dest", help="Evaluate a single pair to this cell").completer = cell_completer
    parser_effdist.set_defaults(func=effdist_cli)

    # rto command
    parser_rto = subparsers.add_parser("rto", help="Daily city return-to-origin series")
    _add_common(parser_rto)
    _add_window(parser_rto, daily=True)
    parser_rto.add_argument("--variant", choices=[v.value for v in RtoVariant], help="home or roaming")
    parser_rto.set_defaults(func=rto_cli)

    # sweep command
    parser_sweep = subparsers.add_parser("sweep", help="Daily sweep of high effective-distance pairs")
    _add_common(parser_sweep)
    _add_window(parser_sweep, daily=True)
    parser_sweep.add_argument("--percentile", type=float, help="D_eff percentile, default to 99")
    parser_sweep.add_argument("--p-cut", dest="p_cut", type=float, help="Path-hit cutoff, default to 1e-6")
    parser_sweep.add_argument("--pair-budget", dest="pair_budget", type=int, help="Maximum pairs per day")
    parser_sweep.add_argument("--measure", choices=[m.value for m in Measure], help="Baseline cost measure")
    parser_sweep.set_defaults(func=sweep_cli)

    # synth command
    parser_synth = subparsers.add_parser("synth", help="Generate a synthetic OD dataset")
    _add_common(parser_synth)
    parser_synth.add_argument("--seed", type=int, help="Random seed, default to 0")
    parser_synth.set_defaults(func=synth_cli)

    # root command
    parser_root = subparsers.add_parser("root", help="Approximate p-th root of a step operator (experimental)")
    _add_common(parser_root)
    parser_root.add_argument("--step", type=int, default=0, help="Step index, default to 0")
    parser_root.add_argument("--power", type=int, default=2, help="Root order p, default to 2")
    parser_root.add_argument(
        "--metric", choices=["frobenius", "kl"], default="frobenius", help="Objective, default to frobenius"
    )
    parser_root.add_argument("--max-iter", dest="max_iter", type=int, default=10_000, help="Iteration cap")
    parser_root.add_argument("--cell", help="Also report the root column of this cell").completer = cell_completer
    parser_root.set_defaults(func=root_cli)

    # version command
    parser_version = subparsers.add_parser("version", help="Show odflow version")
    parser_version.set_defaults(func=lambda args: Console().print(f"odflow version {__version__}"))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argcomplete.autocomplete(parser)
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except OdflowError as e:
        logger.error(str(e))
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"{e.strerror}: {e.filename}")
        return SchemaError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
