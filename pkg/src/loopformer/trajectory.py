"""Step schedules: ordered positive step sizes summing to one.

Schedules live on a grid of 1/L so that the discrete sampling used in
training and the exhaustive enumeration used in sweeps agree. Loop i of a
budget-M schedule is conditioned on (t_{i-1}, delta_i).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

SUM_ACCEPT_TOL = 1e-6  # accepted as-is
SUM_RENORM_TOL = 1e-3  # renormalized with a note; rejected beyond


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleGrid:
    """Step sizes restricted to positive integer multiples of 1/L."""

    L: int

    def __post_init__(self):
        if self.L < 1:
            raise ScheduleError(f"grid needs L >= 1, got {self.L}")

    @property
    def resolution(self) -> float:
        return 1.0 / self.L


@dataclass(frozen=True)
class Trajectory:
    """An ordered schedule (delta_1 .. delta_M) with cumulative times."""

    steps: tuple
    times: tuple = field(init=False)

    def __post_init__(self):
        if len(self.steps) == 0:
            raise ScheduleError("empty schedule")
        for s in self.steps:
            if not (s > 0):
                raise ScheduleError(f"nonpositive step {s} in schedule {self.steps}")
        total = math.fsum(self.steps)
        if abs(total - 1.0) > 1e-9:
            raise ScheduleError(f"schedule sums to {total}, expected 1")
        times = [0.0]
        for s in self.steps:
            times.append(times[-1] + s)
        times[-1] = 1.0
        object.__setattr__(self, "times", tuple(times))

    @property
    def budget(self) -> int:
        return len(self.steps)

    def pairs(self):
        """(t_{i-1}, delta_i) for each loop i, in order."""
        return [(self.times[i], self.steps[i]) for i in range(self.budget)]

    def __str__(self):
        return ",".join(format(s, "g") for s in self.steps)


def validate(steps) -> Trajectory:
    """Build a Trajectory from raw step sizes, renormalizing tiny decimal
    entry error (<= 1e-3 off) and rejecting anything worse."""
    steps = [float(s) for s in steps]
    if not steps:
        raise ScheduleError("empty schedule")
    for s in steps:
        if not (s > 0) or not math.isfinite(s):
            raise ScheduleError(f"nonpositive step {s}")
    total = math.fsum(steps)
    if abs(total - 1.0) > SUM_RENORM_TOL:
        raise ScheduleError(f"schedule sums to {total:.6g}, expected 1")
    # inside SUM_ACCEPT_TOL the schedule is considered exact; renormalize in
    # either case so the sum-to-one invariant holds to float precision
    steps = [s / total for s in steps]
    return Trajectory(tuple(steps))


def max_trajectory(L: int) -> Trajectory:
    """L uniform steps of 1/L, the finest schedule the model trains on."""
    if L < 1:
        raise ScheduleError(f"L must be >= 1, got {L}")
    return Trajectory(tuple(1.0 / L for _ in range(L)))


def uniform_trajectory(M: int) -> Trajectory:
    """M uniform steps, the default inference schedule for budget M."""
    if M < 1:
        raise ScheduleError(f"budget must be >= 1, got {M}")
    return Trajectory(tuple(1.0 / M for _ in range(M)))


def _from_units(units, L: int) -> Trajectory:
    return Trajectory(tuple(u / L for u in units))


def sample_shortcut(L: int, rng: np.random.Generator, grid: ScheduleGrid | None = None) -> Trajectory:
    """Draw a shortcut schedule: S uniform on {1..L-1}, then a uniform pick
    among the C(L-1, S-1) compositions of L grid units into S parts."""
    if L < 2:
        raise ScheduleError(f"shortcut sampling needs L >= 2, got {L}")
    grid = grid or ScheduleGrid(L)
    if grid.L != L:
        raise ScheduleError(f"grid resolution 1/{grid.L} does not match L={L}")
    s = int(rng.integers(1, L))
    if s == 1:
        return _from_units([L], L)
    # S-1 distinct cut points out of L-1 interior positions -> uniform composition
    cuts = np.sort(rng.choice(L - 1, size=s - 1, replace=False)) + 1
    bounds = np.concatenate(([0], cuts, [L]))
    return _from_units(np.diff(bounds).tolist(), L)


def enumerate_schedules(M: int, grid: ScheduleGrid) -> list[Trajectory]:
    """All budget-M schedules on the grid, lexicographic; C(L-1, M-1) of them."""
    L = grid.L
    if not 1 <= M <= L:
        raise ScheduleError(f"budget {M} out of range [1, {L}]")
    out = []
    for cuts in itertools.combinations(range(1, L), M - 1):
        bounds = (0,) + cuts + (L,)
        units = [bounds[i + 1] - bounds[i] for i in range(M)]
        out.append(_from_units(units, L))
    return out


def parse_schedule(text: str, L: int | None = None) -> Trajectory:
    """Parse the CLI schedule syntax: 'uniform:M' or comma-separated steps."""
    text = text.strip()
    if text.startswith("uniform:"):
        try:
            m = int(text.split(":", 1)[1])
        except ValueError:
            raise ScheduleError(f"bad uniform schedule {text!r}") from None
        return uniform_trajectory(m)
    if text == "max":
        if L is None:
            raise ScheduleError("'max' schedule needs a known L")
        return max_trajectory(L)
    try:
        steps = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ScheduleError(f"unparseable schedule {text!r}") from None
    return validate(steps)
