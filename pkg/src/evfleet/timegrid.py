"""Two-tier time grid: strategic periods subdivided into operational intervals.

Absolute intervals are 0-based. Period indices and within-period interval
indices are 0-based as well; the remaining-interval count used by the
dispatcher counts the current interval itself, so at the first interval of a
period it equals the full period length.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TimeGrid:
    periods: int
    intervals_per_period: int
    minutes_per_interval: int = 1

    def __post_init__(self):
        if self.periods < 1 or self.intervals_per_period < 1:
            raise ValueError("periods and intervals_per_period must be >= 1")
        if self.minutes_per_interval < 1:
            raise ValueError("minutes_per_interval must be >= 1")

    @property
    def horizon(self) -> int:
        """Total number of operational intervals in an episode."""
        return self.periods * self.intervals_per_period

    @property
    def horizon_minutes(self) -> int:
        return self.horizon * self.minutes_per_interval

    def period_of(self, interval: int) -> int:
        self._check(interval)
        return interval // self.intervals_per_period

    def interval_within_period(self, interval: int) -> int:
        self._check(interval)
        return interval % self.intervals_per_period

    def remaining_in_period(self, interval: int) -> int:
        """Intervals left in the current period, counting this one."""
        return self.intervals_per_period - self.interval_within_period(interval)

    def is_period_start(self, interval: int) -> bool:
        return self.interval_within_period(interval) == 0

    def is_period_end(self, interval: int) -> bool:
        return self.interval_within_period(interval) == self.intervals_per_period - 1

    def minute_to_interval(self, minute: int) -> int:
        return minute // self.minutes_per_interval

    def _check(self, interval: int) -> None:
        if interval < 0 or interval >= self.horizon:
            raise ValueError(
                f"interval {interval} outside horizon [0, {self.horizon})"
            )
