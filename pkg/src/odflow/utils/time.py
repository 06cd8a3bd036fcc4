from dataclasses import dataclass
from datetime import datetime, timedelta, timezone


def parse_timestamp(value: str) -> datetime:
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    ts = datetime.fromisoformat(value.strip().replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def step_index(ts: datetime, start: datetime, interval_minutes: int) -> int:
    """Convert a timestamp into a 0-based step index relative to `start`."""
    seconds = (ts - start).total_seconds()
    interval = interval_minutes * 60
    if seconds < 0 or seconds % interval:
        raise ValueError(
            f"timestamp {ts.isoformat()} is not aligned to {interval_minutes}-minute steps "
            f"from {start.isoformat()}"
        )
    return int(seconds // interval)


def step_start(start: datetime, t: int, interval_minutes: int) -> datetime:
    return start + timedelta(minutes=t * interval_minutes)


def day_label(start: datetime | None, day: int) -> str:
    if start is None:
        return f"day{day:04d}"
    return (start + timedelta(days=day)).strftime("%Y-%m-%d")


@dataclass(frozen=True)
class DayWindow:
    """A within-day step window [start_offset, end_offset], repeated every day."""

    steps_per_day: int
    start_offset: int
    end_offset: int

    def __post_init__(self):
        if self.steps_per_day < 1:
            raise ValueError("steps_per_day must be at least 1")
        if not 0 <= self.start_offset <= self.end_offset < self.steps_per_day:
            raise ValueError(
                f"day window {self.start_offset}..{self.end_offset} must lie within "
                f"0..{self.steps_per_day - 1}"
            )

    def ranges(self, n_steps: int) -> list[tuple[int, int, int]]:
        """(day, first_step, last_step) for every day whose window is fully loaded."""
        out = []
        day = 0
        while (day * self.steps_per_day + self.end_offset) < n_steps:
            base = day * self.steps_per_day
            out.append((day, base + self.start_offset, base + self.end_offset))
            day += 1
        return out
