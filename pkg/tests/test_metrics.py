"""Oracle tests for TTC, safety-event classification, and aggregation."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from accsim.metrics import (
    EPISODE_CSV_COLUMNS,
    MetricsError,
    SafetyTally,
    TrajectoryRow,
    aggregate_episode,
    classify_safety_events,
    compute_ttc,
)
from accsim.simcore import (
    EVENT_ACTUAL_COLLISION,
    EVENT_NEAR_COLLISION,
    TimedEvent,
)


def veh(x, v, length=5.0):
    return SimpleNamespace(x=x, v=v, length=length)


# ---- compute_ttc --------------------------------------------------------


def test_ttc_worked_example():
    # leader at 100 m (5 m long) doing 20; follower at 50 m doing 25:
    # bumper gap 45 m, closing 5 m/s -> 9 s
    assert compute_ttc(veh(50, 25), veh(100, 20, 5.0)) == pytest.approx(9.0,
                                                                        rel=1e-9)


def test_ttc_infinite_when_not_closing():
    assert compute_ttc(veh(50, 20), veh(100, 20)) == math.inf
    assert compute_ttc(veh(50, 15), veh(100, 20)) == math.inf


def test_ttc_zero_at_contact():
    assert compute_ttc(veh(45, 25), veh(50, 20, 5.0)) == 0.0


def test_ttc_negative_when_overlapping():
    assert compute_ttc(veh(48, 25), veh(50, 20, 5.0)) < 0.0


def test_ttc_kinematic_contact_oracle():
    """Simulating the pair forward, bumper contact occurs at t = TTC."""
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(10_000):
        gap = rng.uniform(0.1, 120.0)
        v_l = rng.uniform(0.0, 33.0)
        dv = rng.uniform(0.01, 15.0)
        length = rng.uniform(4.0, 5.0)
        follower = veh(0.0, v_l + dv)
        leader = veh(gap + length, v_l, length)
        ttc = compute_ttc(follower, leader)
        # closed-form contact time for constant speeds
        contact = gap / dv
        assert ttc == pytest.approx(contact, rel=1e-9)
        # positions at ttc actually touch
        xf = follower.x + follower.v * ttc
        xl_rear = leader.x - leader.length + leader.v * ttc
        assert xf == pytest.approx(xl_rear, rel=1e-6, abs=1e-6)
        checked += 1
    assert checked == 10_000


# ---- classification -----------------------------------------------------


def ev(kind, subject, t=0.0, obj=None):
    return TimedEvent(t, kind, subject, obj)


def test_classify_fp_fn_ac_counts():
    samples = [(1, 2.0), (2, 3.9), (3, 6.0)]  # 1 and 2 flagged at ttc*=4
    events = [ev(EVENT_NEAR_COLLISION, 2), ev(EVENT_NEAR_COLLISION, 4),
              ev(EVENT_ACTUAL_COLLISION, 9)]
    tally = classify_safety_events(samples, events, ttc_star=4.0)
    assert tally.fp == 1      # follower 1 flagged, no NC
    assert tally.fn == 1      # follower 4 NC without flag
    assert tally.ac == 1
    assert tally.near_collisions == 2


def test_classify_flag_threshold_is_strict():
    tally = classify_safety_events([(1, 4.0)], [], ttc_star=4.0)
    assert tally.fp == 0  # ttc == threshold is not dangerous
    tally = classify_safety_events([(1, 3.999999)], [], ttc_star=4.0)
    assert tally.fp == 1


def test_classify_deduplicates_by_follower():
    samples = [(1, 1.0), (1, 2.0), (1, 0.5)]
    tally = classify_safety_events(samples, [], ttc_star=4.0)
    assert tally.fp == 1


def test_classify_flagged_with_nc_is_neither_fp_nor_fn():
    tally = classify_safety_events([(7, 1.0)], [ev(EVENT_NEAR_COLLISION, 7)],
                                   ttc_star=4.0)
    assert tally.fp == 0 and tally.fn == 0
    assert tally.near_collisions == 1


def test_classify_empty_window():
    tally = classify_safety_events([], [], ttc_star=4.0)
    assert (tally.fp, tally.fn, tally.ac, tally.near_collisions) == (0, 0, 0, 0)


def test_tally_add():
    a = SafetyTally(1, 2, 3, 4)
    a.add(SafetyTally(10, 20, 30, 40))
    assert (a.fp, a.fn, a.ac, a.near_collisions) == (11, 22, 33, 44)


# ---- aggregation --------------------------------------------------------


def straight_run(speed=30.0, length=1500.0, dt=1.0, vid=1):
    rows = []
    t = 0.0
    x = 0.0
    while x < length + speed * dt:
        rows.append(TrajectoryRow(t, vid, 0, x, speed, 0.0, math.inf, False))
        t += dt
        x += speed * dt
    return rows


def test_aggregate_single_vehicle_delay_example():
    # 30 m/s over 1500 m -> 50 s traversal
    rows = straight_run()
    m = aggregate_episode([], rows, mainline_length=1500.0, warmup=0.0,
                          control_interval=1.0)
    assert m.mean_delay == pytest.approx(50.0, rel=1e-9)
    assert m.mean_speed == pytest.approx(30.0, rel=1e-9)
    assert m.mean_abs_accel == 0.0
    assert m.mean_sq_jerk == 0.0


def test_aggregate_counts_events_and_tally_passthrough():
    rows = straight_run()
    events = [ev(EVENT_NEAR_COLLISION, 1, t=10.0),
              ev(EVENT_NEAR_COLLISION, 2, t=11.0),
              ev(EVENT_ACTUAL_COLLISION, 3, t=12.0)]
    m = aggregate_episode(events, rows, mainline_length=1500.0, warmup=0.0,
                          control_interval=1.0, tally=SafetyTally(fp=5, fn=2))
    assert m.near_collisions == 2
    assert m.tally.fp == 5 and m.tally.fn == 2 and m.tally.ac == 1


def test_aggregate_warmup_excluded_from_speed():
    rows = [TrajectoryRow(float(t), 1, 0, 10.0 * t, 40.0 if t < 5 else 20.0,
                          0.0, math.inf, False) for t in range(20)]
    rows.append(TrajectoryRow(20.0, 1, 0, 1500.0, 20.0, 0.0, math.inf, False))
    m = aggregate_episode([], rows, mainline_length=1500.0, warmup=5.0,
                          control_interval=1.0)
    assert m.mean_speed == pytest.approx(20.0)


def test_aggregate_jerk_oracle():
    # accel ramps 0,1,2,... at 1 s ticks -> jerk 1 m/s^3 between ticks
    rows = [TrajectoryRow(float(t), 1, 0, 30.0 * t, 30.0, float(t),
                          math.inf, False) for t in range(60)]
    rows.append(TrajectoryRow(60.0, 1, 0, 1800.0, 30.0, 60.0, math.inf, False))
    m = aggregate_episode([], rows, mainline_length=1500.0, warmup=0.0,
                          control_interval=1.0)
    assert m.mean_sq_jerk == pytest.approx(1.0, rel=1e-9)


def test_aggregate_no_completion_raises():
    rows = [TrajectoryRow(0.0, 1, 0, 100.0, 30.0, 0.0, math.inf, False)]
    with pytest.raises(MetricsError):
        aggregate_episode([], rows, mainline_length=1500.0, warmup=0.0,
                          control_interval=1.0)


def test_csv_row_matches_column_order():
    rows = straight_run()
    m = aggregate_episode([], rows, mainline_length=1500.0, warmup=0.0,
                          control_interval=1.0, seed=7, scenario="onramp",
                          penetration=0.8, ramp_flow=1200.0)
    row = m.csv_row()
    assert len(row) == len(EPISODE_CSV_COLUMNS)
    assert row[0] == 7 and row[1] == "onramp"
    assert row[2] == 0.8 and row[3] == 1200.0
    assert row[EPISODE_CSV_COLUMNS.index("near_collisions")] == 0
    assert float(row[EPISODE_CSV_COLUMNS.index("mean_delay")]) == 50.0
