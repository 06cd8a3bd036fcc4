from .config import RunConfig, SynthConfig, load_config
from .ingest import parse_flows, select_component, serialize_flows, union_graph
from .markov import build_step_operators, elapse
from .netflow import initial_distribution, net_flows
from .paths import propagate, rto, windowed_distance
from .synth import generate

__all__ = [
    "RunConfig",
    "SynthConfig",
    "load_config",
    "parse_flows",
    "serialize_flows",
    "union_graph",
    "select_component",
    "build_step_operators",
    "elapse",
    "initial_distribution",
    "net_flows",
    "propagate",
    "windowed_distance",
    "rto",
    "generate",
]
