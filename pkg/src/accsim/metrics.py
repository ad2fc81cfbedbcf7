"""Time-to-collision, safety-event classification, and episode aggregates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

from .simcore import (
    EVENT_ACTUAL_COLLISION,
    EVENT_NEAR_COLLISION,
    TimedEvent,
)

INF = math.inf

# Column order of the per-episode results CSV; fixed, do not reorder.
EPISODE_CSV_COLUMNS = (
    "seed", "scenario", "penetration", "ramp_flow",
    "near_collisions", "fp", "fn", "ac",
    "mean_speed", "mean_delay", "mean_abs_accel", "mean_sq_jerk",
)

# Column order of the per-step trajectory CSV (space-time diagram data).
TRAJECTORY_CSV_COLUMNS = (
    "time", "id", "lane", "position", "speed", "accel", "gap", "equipped",
)


class MetricsError(ValueError):
    """Raised for degenerate inputs (e.g. no vehicle completed traversal)."""


def compute_ttc(follower, leader) -> float:
    """Time to collision of `follower` against `leader` immediately ahead.

    Finite only while the follower is strictly faster; otherwise +inf.
    Objects need `x`, `v` and `length` attributes.
    """
    dv = follower.v - leader.v
    if dv <= 0.0:
        return INF
    return (leader.x - follower.x - leader.length) / dv


@dataclass
class SafetyTally:
    fp: int = 0
    fn: int = 0
    ac: int = 0
    near_collisions: int = 0

    def add(self, other: "SafetyTally") -> None:
        self.fp += other.fp
        self.fn += other.fn
        self.ac += other.ac
        self.near_collisions += other.near_collisions


def classify_safety_events(
    ttc_samples: Iterable[tuple[int, float]],
    events: Iterable[TimedEvent],
    ttc_star: float,
) -> SafetyTally:
    """Classify one decision window into FP / FN / AC counts.

    ``ttc_samples`` are (follower_id, ttc) pairs observed during the window;
    ``events`` are the near-collision / collision events logged in it.  Per
    follower: a danger flag without a registered near collision is an FP, a
    near collision without any flag is an FN.  Actual collisions count
    unconditionally.
    """
    flagged: set[int] = set()
    for fid, ttc in ttc_samples:
        if ttc < ttc_star:
            flagged.add(fid)
    nc_followers: set[int] = set()
    nc_count = 0
    ac_count = 0
    for ev in events:
        if ev.kind == EVENT_NEAR_COLLISION:
            nc_followers.add(ev.subject)
            nc_count += 1
        elif ev.kind == EVENT_ACTUAL_COLLISION:
            ac_count += 1
    return SafetyTally(
        fp=len(flagged - nc_followers),
        fn=len(nc_followers - flagged),
        ac=ac_count,
        near_collisions=nc_count,
    )


@dataclass
class EpisodeMetrics:
    seed: int
    scenario: str
    penetration: float
    ramp_flow: float
    near_collisions: int
    tally: SafetyTally
    mean_speed: float
    mean_delay: float
    mean_abs_accel: float
    mean_sq_jerk: float
    decision_latency_ms: list = field(default_factory=list)

    def csv_row(self) -> list:
        return [
            self.seed, self.scenario, self.penetration, self.ramp_flow,
            self.near_collisions, self.tally.fp, self.tally.fn, self.tally.ac,
            f"{self.mean_speed:.6f}", f"{self.mean_delay:.6f}",
            f"{self.mean_abs_accel:.6f}", f"{self.mean_sq_jerk:.6f}",
        ]


class TrajectoryRow(NamedTuple):
    time: float
    id: int
    lane: int
    position: float
    speed: float
    accel: float
    gap: float  # bumper gap to leader, inf if none
    equipped: bool


def aggregate_episode(
    events: Sequence[TimedEvent],
    trajectory: Sequence[TrajectoryRow],
    *,
    mainline_length: float,
    warmup: float,
    control_interval: float,
    tally: Optional[SafetyTally] = None,
    seed: int = 0,
    scenario: str = "",
    penetration: float = 0.0,
    ramp_flow: float = 0.0,
) -> EpisodeMetrics:
    """Aggregate a completed episode from its event and trajectory logs.

    Delay counts only vehicles observed past the segment end; speed and
    comfort statistics cover every vehicle-step after the warm-up.  Raises
    MetricsError when no vehicle completed traversal.
    """
    if tally is None:
        tally = SafetyTally()
    speed_sum = 0.0
    accel_sum = 0.0
    samples = 0
    first_time: dict[int, float] = {}
    complete_time: dict[int, float] = {}
    ctrl_accel: dict[int, tuple[float, float]] = {}  # id -> (time, accel)
    jerk_sq_sum = 0.0
    jerk_samples = 0
    for row in trajectory:
        if row.id not in first_time:
            first_time[row.id] = row.time
        if row.position >= mainline_length and row.id not in complete_time:
            complete_time[row.id] = row.time
        if row.time >= warmup and row.position <= mainline_length:
            speed_sum += row.speed
            accel_sum += abs(row.accel)
            samples += 1
        phase = row.time / control_interval
        if math.isclose(phase, round(phase), abs_tol=1e-6):
            prev = ctrl_accel.get(row.id)
            if prev is not None and row.time >= warmup:
                jerk = (row.accel - prev[1]) / (row.time - prev[0])
                jerk_sq_sum += jerk * jerk
                jerk_samples += 1
            ctrl_accel[row.id] = (row.time, row.accel)
    if not complete_time:
        raise MetricsError("no vehicle completed traversal in this episode")
    delays = [complete_time[i] - first_time[i] for i in complete_time]
    nc = sum(1 for e in events if e.kind == EVENT_NEAR_COLLISION)
    ac = sum(1 for e in events if e.kind == EVENT_ACTUAL_COLLISION)
    out_tally = SafetyTally(fp=tally.fp, fn=tally.fn, ac=ac, near_collisions=nc)
    return EpisodeMetrics(
        seed=seed,
        scenario=scenario,
        penetration=penetration,
        ramp_flow=ramp_flow,
        near_collisions=nc,
        tally=out_tally,
        mean_speed=speed_sum / samples if samples else 0.0,
        mean_delay=sum(delays) / len(delays),
        mean_abs_accel=accel_sum / samples if samples else 0.0,
        mean_sq_jerk=jerk_sq_sum / jerk_samples if jerk_samples else 0.0,
    )
