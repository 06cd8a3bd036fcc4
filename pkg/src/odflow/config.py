from datetime import date
from enum import Enum
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from odflow.errors import SchemaError
from odflow.utils import logger


class GapPolicy(str, Enum):
    SELF_LOOP = "self_loop"
    UNIFORM = "uniform"
    FAIL = "fail"


class Measure(str, Enum):
    DISTANCE = "distance"
    DURATION = "duration"


class RtoVariant(str, Enum):
    HOME = "home"
    ROAMING = "roaming"


class ColumnSchema(BaseModel):
    time: str = "time"
    origin: str = "origin"
    dest: str = "dest"
    count: str = "count"
    dist_mean: Optional[str] = "dist_mean"
    dist_median: Optional[str] = "dist_median"
    dist_std: Optional[str] = "dist_std"
    dur_mean: Optional[str] = "dur_mean"
    dur_median: Optional[str] = "dur_median"
    dur_std: Optional[str] = "dur_std"
    interval_minutes: int = Field(
        default=180,
        description="Length of one time-step when the time column holds timestamps. Default to 180 (3-hourly).",
    )
    start: Optional[str] = Field(
        default=None,
        description="ISO-8601 timestamp of step 0. Defaults to the earliest timestamp in the file.",
    )
    min_count: float = Field(
        default=0.0,
        description="Rows with a count below this value are skipped and tallied.",
    )
    error_budget: int = Field(
        default=100,
        description="Number of bad rows tolerated before ingest fails.",
    )

    @field_validator("interval_minutes")
    def interval_must_be_positive(cls, v):
        if v <= 0:
            raise ValueError("interval_minutes must be positive")
        return v


class PhaseConfig(BaseModel):
    name: str
    start_hour: float = Field(description="Hour of day at which the phase begins.")
    stay: float = Field(description="Base stay probability during the phase.")
    bias: float = Field(
        default=0.0,
        description="Center-periphery bias: positive pulls inward, negative pushes outward.",
    )
    metro_boost: float = Field(default=1.0, description="Multiplier on metro edge weights.")
    center_activity: float = Field(default=1.0, description="Activity level of center cells.")

    @field_validator("stay")
    def stay_in_unit_interval(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("stay must lie in [0, 1]")
        return v


def default_phases() -> list[PhaseConfig]:
    return [
        PhaseConfig(name="night", start_hour=0.0, stay=0.95, bias=0.0, metro_boost=1.0),
        PhaseConfig(
            name="morning", start_hour=6.0, stay=0.6, bias=1.0, metro_boost=3.0, center_activity=2.0
        ),
        PhaseConfig(name="midday", start_hour=10.0, stay=0.8, bias=0.0, metro_boost=1.5),
        PhaseConfig(name="evening", start_hour=15.0, stay=0.6, bias=-0.8, metro_boost=3.0),
        PhaseConfig(name="late", start_hour=20.0, stay=0.9, bias=-0.3, metro_boost=1.0),
    ]


class SynthConfig(BaseModel):
    radius: int = Field(default=5, description="Hex lattice radius in rings. Default to 5 (91 cells).")
    spacing_km: float = Field(
        default=6.4, description="Distance between adjacent cell centers in km. Default to 6.4."
    )
    lat0: float = Field(default=33.749, description="Latitude of the lattice origin cell.")
    lon0: float = Field(default=-84.388, description="Longitude of the lattice origin cell.")
    hubs: list[str] = Field(
        default_factory=lambda: [
            "q+0r+0",
            "q+3r+0",
            "q+0r+3",
            "q-3r+3",
            "q-3r+0",
            "q+0r-3",
            "q+3r-3",
        ],
        description="Hub cell labels.",
    )
    metro: list[tuple[str, str]] = Field(
        default_factory=lambda: [
            ("q+0r+0", "q+3r+0"),
            ("q+0r+0", "q+0r+3"),
            ("q+0r+0", "q-3r+3"),
            ("q+0r+0", "q-3r+0"),
            ("q+0r+0", "q+0r-3"),
            ("q+0r+0", "q+3r-3"),
        ],
        description="Metro edges; both endpoints must be hubs.",
    )
    center: list[str] = Field(
        default_factory=lambda: [
            "q+0r+0",
            "q+1r+0",
            "q+0r+1",
            "q-1r+1",
            "q-1r+0",
            "q+0r-1",
            "q+1r-1",
        ],
        description="Center cells (potential 0).",
    )
    holes: list[str] = Field(default_factory=list, description="Lattice cells to remove.")
    beta: float = Field(default=1.0, description="Strength of the center-periphery gravity term.")
    hub_stay_bonus: float = Field(default=0.03, description="Extra stay probability at hubs.")
    hub_activity: float = Field(default=2.0, description="Activity multiplier of hub cells.")
    max_stay: float = Field(default=0.99, description="Upper bound on any stay probability.")
    intra_cell_km: Optional[float] = Field(
        default=None, description="Self-loop distance. Defaults to one third of spacing_km."
    )
    speed_kmh: float = Field(default=30.0, description="Speed used to emit trip durations.")
    step_minutes: int = Field(default=30, description="Step length in minutes. Default to 30.")
    phases: list[PhaseConfig] = Field(default_factory=default_phases)
    weekly_phases: Optional[dict[int, list[PhaseConfig]]] = Field(
        default=None,
        description="Optional per-weekday phase overrides (0-6). When set the period is one week.",
    )
    n_agents: int = Field(default=120_000, description="Number of population-equivalent persons.")
    n_days: int = Field(default=2, description="Number of simulated days.")
    start_date: date = Field(
        default=date(2025, 6, 1), description="Cosmetic calendar label of the first day."
    )
    jitter: bool = Field(
        default=False, description="Jitter emitted distances uniformly by +-20% of edge length."
    )
    block_size: int = Field(default=8192, description="Agents per seeded simulation block.")

    @field_validator("radius")
    def radius_non_negative(cls, v):
        if v < 0:
            raise ValueError("radius must be non-negative")
        return v

    @field_validator("n_agents")
    def at_least_one_agent(cls, v):
        if v < 1:
            raise ValueError("n_agents must be at least 1")
        return v

    @model_validator(mode="after")
    def phases_cover_the_day(self):
        if not self.phases:
            raise ValueError("at least one phase is required")
        if (24 * 60) % self.step_minutes:
            raise ValueError("step_minutes must divide a day")
        return self

    @property
    def steps_per_day(self) -> int:
        return (24 * 60) // self.step_minutes

    @property
    def intra_km(self) -> float:
        return self.spacing_km / 3 if self.intra_cell_km is None else self.intra_cell_km


class RunConfig(BaseModel):
    data: Optional[str] = Field(default=None, description="Path to the OD flow CSV.")
    cells: Optional[str] = Field(default=None, description="Path to the cells manifest CSV.")
    cache: str = Field(default="odflow-cache", description="Directory of the ingest cache.")
    out: str = Field(default="odflow-out", description="Output directory.")
    component: str = Field(
        default="largest",
        description="Component selection: 'largest', 'cell:<id>' or a comma-separated cell list.",
    )
    window: Optional[str] = Field(
        default=None, description="Step window 'START..END' (inclusive, 0-based)."
    )
    steps_per_day: Optional[int] = Field(
        default=None, description="Steps per day; derived from the interval when absent."
    )
    percentile: Optional[float] = Field(default=None, description="Percentile q in [0, 100].")
    p_cut: float = Field(default=1e-6, description="Total path-hit probability cutoff.")
    gup_only: bool = True
    gup_scope: str = Field(
        default="full", description="GUP evaluation range: 'full' data range or 'window'."
    )
    variant: RtoVariant = RtoVariant.HOME
    measure: Measure = Measure.DISTANCE
    gap_policy: GapPolicy = GapPolicy.SELF_LOOP
    pair_budget: int = Field(default=20_000, description="Maximum number of OD pairs propagated.")
    top_k: int = Field(default=0, description="Paths listed per decomposed pair.")
    top_pairs: int = Field(default=10, description="Pairs decomposed when top_k > 0.")
    fit_window: Optional[str] = Field(
        default=None, description="Step range for the baseline fit; defaults to the loaded range."
    )
    seed: int = 0
    threads: int = 1
    schema_: ColumnSchema = Field(default_factory=ColumnSchema, alias="schema")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    log_level: str = Field(
        default="INFO",
        description="The logging level to use. Default to 'INFO'.",
    )

    model_config = {"populate_by_name": True}

    @field_validator("percentile")
    def percentile_in_range(cls, v):
        if v is not None and not 0.0 <= v <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        return v

    @field_validator("p_cut")
    def p_cut_in_range(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("p_cut must lie in [0, 1]")
        return v

    @field_validator("seed")
    def seed_non_negative(cls, v):
        if v < 0:
            raise ValueError("seed must be non-negative")
        return v

    @field_validator("threads")
    def at_least_one_thread(cls, v):
        if v < 1:
            raise ValueError("threads must be at least 1")
        return v

    @field_validator("gup_scope")
    def known_gup_scope(cls, v):
        if v not in ("full", "window"):
            raise ValueError("gup_scope must be 'full' or 'window'")
        return v

    def dump(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def parse_window(spec: str) -> tuple[int, int]:
    """Parse 'START..END' into an inclusive integer pair."""
    try:
        start, end = spec.split("..")
        window = int(start), int(end)
    except ValueError:
        raise SchemaError(f"window {spec!r} must look like START..END") from None
    if window[0] < 0 or window[1] < window[0]:
        raise SchemaError(f"window {spec!r} is empty or negative")
    return window


def load_config(file_path: str | Path | None) -> RunConfig:
    """Load configuration from a YAML file; a missing path yields the defaults."""
    config_data = {}
    if file_path is not None:
        with open(file_path, "r") as file:
            config_data = yaml.safe_load(file) or {}
    try:
        config = RunConfig(**config_data)
    except ValueError as e:
        raise SchemaError(f"invalid config {file_path}: {e}") from e

    logger.set_log_level(config.log_level)
    return config


def dump_config(config: RunConfig, file_path: str | Path) -> None:
    with open(file_path, "w") as file:
        yaml.safe_dump(config.dump(), file, sort_keys=True)
