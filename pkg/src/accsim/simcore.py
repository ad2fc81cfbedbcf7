"""Microscopic world stepping: car following, gap control, lane changes, events.

Non-equipped vehicles follow a stochastic Krauss safe-speed model; equipped
vehicles track a commanded bumper gap with a PD law bounded by the same safe
speed envelope.  Collisions are permitted (zero minimum headway); a bumper
overlap is logged as an actual collision and the involved vehicles are
removed so one crash does not corrupt the rest of the episode.
"""

from __future__ import annotations

import math
import random
from typing import NamedTuple, Optional

from .scenario import (
    RAMP_LANE,
    ROUTE_EXIT,
    ROUTE_MERGE,
    ROUTE_THROUGH,
    RoadGeometry,
    RunConfig,
    SpawnEvent,
)

FREE_FLOW_SPEED = 33.3  # m/s (120 km/h) cap for every vehicle
RAMP_ENTRY_SPEED = 15.0  # m/s at the ramp origin
ACC_REACTION_TIME = 0.1  # s, effective actuation delay of equipped vehicles
ACC_COMFORT_DECEL = 1.5  # m/s^2, braking limit outside danger reactions
ACC_MIN_STANDOFF = 1.0  # m, bumper margin kept by the last-resort crash guard
ACC_STANDOFF_PER_TTC = 0.8  # m of extra stopping margin per danger-threshold second
LANE_CHANGE_PERIOD = 0.5  # s between lane-change evaluations
EXIT_PREP_DISTANCE = 400.0  # m before the junction where exiters begin moving right

# PD gains for the gap-tracking controller; critically damped-ish
# (zeta ~ 0.95) so a setpoint step settles well inside 30 s.
ACC_KP = 0.1
ACC_KD = 0.6
CRUISE_GAIN = 0.5

EVENT_SPAWN = "spawn"
EVENT_DESPAWN = "despawn"
EVENT_LANE_CHANGE = "lane_change"
EVENT_NEAR_COLLISION = "near_collision"
EVENT_ACTUAL_COLLISION = "actual_collision"


class TimedEvent(NamedTuple):
    time: float
    kind: str
    subject: int
    object: Optional[int]


class Vehicle:
    __slots__ = (
        "id", "x", "v", "a", "length", "lane", "sigma", "tau",
        "max_accel", "max_decel", "equipped", "gap_cmd", "danger_ttc",
        "danger_latch", "route", "spawn_time", "ctrl_accel_prev",
    )

    def __init__(self, vid: int, x: float, v: float, length: float, lane: int,
                 sigma: float, tau: float, accel_bound: float,
                 equipped: bool, route: str, spawn_time: float):
        self.id = vid
        self.x = x
        self.v = v
        self.a = 0.0
        self.length = length
        self.lane = lane
        self.sigma = sigma
        self.tau = tau
        self.max_accel = accel_bound
        self.max_decel = accel_bound
        self.equipped = equipped
        self.gap_cmd = 10.0
        self.danger_ttc = 4.0  # TTC below which the ACC brakes hard
        self.danger_latch = False  # danger reaction active until closing resolved
        self.route = route
        self.spawn_time = spawn_time
        self.ctrl_accel_prev = math.nan  # no jerk sample until the next tick

    def __repr__(self):  # debug aid
        return (f"Vehicle(id={self.id}, lane={self.lane}, x={self.x:.1f}, "
                f"v={self.v:.1f}, route={self.route})")


def krauss_safe_speed(v_follower: float, v_leader: float, gap: float,
                      reaction_time: float, max_decel: float) -> float:
    """Krauss safe speed for a follower given leader speed and bumper gap.

    Callers handle the no-leader case by capping at the free-flow speed.
    """
    v_safe = v_leader + (gap - v_leader * reaction_time) / (
        (v_follower + v_leader) / (2.0 * max_decel) + reaction_time
    )
    return v_safe if v_safe > 0.0 else 0.0


def acc_target_gap_control(follower: Vehicle, leader: Optional[Vehicle],
                           gap_cmd: float, dt: float) -> float:
    """Acceleration command tracking a desired bumper gap.

    Normal operation is a PD law on gap error and closing speed whose
    braking is limited to a comfortable deceleration.  A separate danger
    reaction engages when the follower's time-to-collision drops below its
    danger threshold (or unconditionally past the kinematic point of no
    return): it brakes just hard enough to stop the closing speed at the
    standoff margin.  A high threshold therefore reacts early and gently; a
    low one recognizes danger late, when the required deceleration already
    saturates the bound and the gap dips into near-collision territory.
    Without a leader this is a free-flow cruise controller.
    """
    bound = follower.max_accel
    v = follower.v
    if leader is None:
        follower.danger_latch = False
        a = CRUISE_GAIN * (FREE_FLOW_SPEED - v)
        if v + a * dt > FREE_FLOW_SPEED:
            a = (FREE_FLOW_SPEED - v) / dt
    else:
        gap = leader.x - leader.length - follower.x
        closing = v - leader.v
        a = ACC_KP * (gap - gap_cmd) + ACC_KD * (leader.v - v)
        if a < -ACC_COMFORT_DECEL:
            a = -ACC_COMFORT_DECEL
        if closing > 0.0:
            # Early detection (high threshold) also aims farther out.
            aim = ACC_MIN_STANDOFF + ACC_STANDOFF_PER_TTC * follower.danger_ttc
            slack = gap - aim
            decel = follower.max_decel
            # last-resort guard: decel that stops the closing speed at the aim
            need = decel if slack <= 0.0 else closing * closing / (2.0 * slack)
            if need >= decel or gap < closing * follower.danger_ttc:
                # the reaction latches until the closing speed is resolved,
                # so it cannot flicker off while the leader keeps braking
                follower.danger_latch = True
            if follower.danger_latch:
                # detected danger: anticipate that the leader may brake to a
                # stop, and keep enough margin to stop behind it
                stop_room = slack + leader.v * leader.v / (2.0 * decel)
                if stop_room > 0.0:
                    need = max(need, v * v / (2.0 * stop_room))
                else:
                    need = decel
                a = min(a, -min(need, decel))
        else:
            follower.danger_latch = False
        if v + a * dt > FREE_FLOW_SPEED:
            a = (FREE_FLOW_SPEED - v) / dt
    if a > bound:
        a = bound
    elif a < -bound:
        a = -bound
    if v + a * dt < 0.0:
        a = -v / dt
    return a


class World:
    """Mutable per-episode simulation state.

    Lanes are kept as per-lane lists sorted front-first (descending
    position).  A single World is owned by one episode/thread.
    """

    def __init__(self, geometry: RoadGeometry, run: RunConfig,
                 schedule: list[SpawnEvent], seed: int):
        geometry.validate()
        run.validate()
        self.geometry = geometry
        self.run = run
        self.time = 0.0
        self.step_index = 0
        self.events: list[TimedEvent] = []
        self.rng = random.Random(f"{seed}/sim")
        self._seed = seed

        self.lane_ids = list(range(geometry.lane_count))
        if geometry.ramp_kind == "on_ramp":
            self.lane_ids.append(RAMP_LANE)
        self.lanes: dict[int, list[Vehicle]] = {lid: [] for lid in self.lane_ids}

        self._schedule = sorted(schedule, key=lambda e: (e.time, e.lane))
        self._next_spawn = 0
        self._pending: list[tuple[int, SpawnEvent]] = []  # (event index, event)
        self._next_id = 0

        self.spawned = 0
        self.despawned = 0
        self.collisions = 0
        self._active_nc: set[tuple[int, int]] = set()
        # traversal completions since last drain: (vehicle, travel_time)
        self.completed: list[tuple[Vehicle, float]] = []
        # every completion this episode: (finish_time, travel_time)
        self.all_completed: list[tuple[float, float]] = []
        self.default_gap_cmd = 10.0  # applied to equipped vehicles at spawn
        self.default_danger_ttc = 4.0
        # With actuation off (the no-ACC baseline) equipped vehicles drive
        # the human model, so paired runs share traffic realizations.
        self.acc_enabled = True
        self.trajectory_sink = None  # optional callable(world), pre-despawn

        if geometry.ramp_kind != "none":
            self.junction = geometry.ramp_junction_position
        else:
            self.junction = None
        if geometry.ramp_kind == "on_ramp":
            self.ramp_start = self.junction - (geometry.ramp_length
                                               - geometry.accel_lane_length)
            self.ramp_end = self.junction + geometry.accel_lane_length
        else:
            self.ramp_start = self.ramp_end = None

        self._lc_period_steps = max(1, round(LANE_CHANGE_PERIOD
                                             / run.physics_timestep))

    # ---- helpers -------------------------------------------------------

    def vehicles(self):
        for lid in self.lane_ids:
            yield from self.lanes[lid]

    def vehicle_count(self) -> int:
        return sum(len(self.lanes[lid]) for lid in self.lane_ids)

    def _log(self, kind: str, subject: int, obj: Optional[int] = None) -> None:
        self.events.append(TimedEvent(self.time, kind, subject, obj))

    def _vehicle_rng(self, event_index: int) -> random.Random:
        # Keyed by schedule position so paired runs under different
        # controllers draw identical vehicle attributes.
        return random.Random(f"{self._seed}/veh/{event_index}")

    def _make_vehicle(self, event_index: int, event: SpawnEvent,
                      x: float, v: float) -> Vehicle:
        vrng = self._vehicle_rng(event_index)
        length = vrng.uniform(4.0, 5.0)
        # sigma is always drawn so the per-vehicle attribute stream is
        # identical across paired runs regardless of actuation
        sigma = vrng.uniform(0.2, 0.5)
        if event.is_acc_equipped and self.acc_enabled:
            sigma = 0.0
        tau = vrng.uniform(0.8, 1.2)
        veh = Vehicle(self._next_id, x, v, length, event.lane, sigma, tau,
                      self.run.accel_bound, event.is_acc_equipped,
                      event.route, self.time)
        veh.gap_cmd = self.default_gap_cmd
        veh.danger_ttc = self.default_danger_ttc
        self._next_id += 1
        return veh

    # ---- spawning ------------------------------------------------------

    def _try_spawn(self, event_index: int, event: SpawnEvent) -> bool:
        if event.lane == RAMP_LANE:
            x0, cap = self.ramp_start, RAMP_ENTRY_SPEED
        else:
            x0, cap = 0.0, FREE_FLOW_SPEED
        lane = self.lanes[event.lane]
        if lane:
            rear = lane[-1]
            gap = rear.x - rear.length - x0
            if gap < 6.0:
                return False
            v_entry = min(cap, krauss_safe_speed(cap, rear.v, gap, 1.0,
                                                 self.run.accel_bound))
            if v_entry < 3.0:
                return False
        else:
            v_entry = cap
        veh = self._make_vehicle(event_index, event, x0, v_entry)
        lane.append(veh)  # rear of the lane
        self.spawned += 1
        self._log(EVENT_SPAWN, veh.id)
        return True

    def _process_spawns(self) -> None:
        still_pending: list[tuple[int, SpawnEvent]] = []
        blocked_lanes: set[int] = set()
        for idx, ev in self._pending:
            if ev.lane in blocked_lanes or not self._try_spawn(idx, ev):
                blocked_lanes.add(ev.lane)
                still_pending.append((idx, ev))
        self._pending = still_pending
        while (self._next_spawn < len(self._schedule)
               and self._schedule[self._next_spawn].time <= self.time):
            idx = self._next_spawn
            ev = self._schedule[idx]
            self._next_spawn += 1
            if ev.lane in blocked_lanes or not self._try_spawn(idx, ev):
                blocked_lanes.add(ev.lane)
                self._pending.append((idx, ev))

    # ---- lane changes --------------------------------------------------

    def _neighbors(self, lane: list[Vehicle], x: float):
        """(leader, follower) in `lane` around position x (lane sorted desc)."""
        lo, hi = 0, len(lane)
        while lo < hi:
            mid = (lo + hi) // 2
            if lane[mid].x > x:
                lo = mid + 1
            else:
                hi = mid
        leader = lane[lo - 1] if lo > 0 else None
        follower = lane[lo] if lo < len(lane) else None
        return leader, follower, lo

    def _gap_acceptable(self, veh: Vehicle, target: int, urgency: float) -> bool:
        """Accept a change when both new gaps absorb the closing speed.

        Each required gap covers the full stopping distance of the closing
        speed at the shared decel capability, plus a headway margin that
        urgency relaxes (mandatory changes accept tighter fits).
        """
        leader, follower, _ = self._neighbors(self.lanes[target], veh.x)
        relax = 1.0 - 0.7 * min(urgency, 1.0)
        bound = veh.max_decel
        base = self.run.min_gap_for_near_collision  # never cut in inside the band
        if leader is not None:
            lead_gap = leader.x - leader.length - veh.x
            closing = veh.v - leader.v
            need = base + relax * 0.3 * veh.v
            if closing > 0.0:
                # stopping distance plus a second of reserve for leader decel
                need += closing + closing * closing / (2.0 * bound)
            if lead_gap < need:
                return False
        if follower is not None:
            lag_gap = veh.x - veh.length - follower.x
            closing = follower.v - veh.v
            need = base + relax * 0.3 * follower.v
            if closing > 0.0:
                need += closing + closing * closing / (2.0 * bound)
            if lag_gap < need:
                return False
        return True

    def lane_change_decision(self, veh: Vehicle) -> Optional[int]:
        """Target lane for `veh` this tick, or None to stay."""
        geometry = self.geometry
        if veh.lane == RAMP_LANE:
            if veh.route != ROUTE_MERGE or veh.x < self.junction:
                return None
            span = self.ramp_end - self.junction
            urgency = min(1.0, (veh.x - self.junction) / max(span, 1.0) + 0.2)
            if self._gap_acceptable(veh, 0, urgency):
                return 0
            return None
        if veh.route == ROUTE_EXIT and veh.lane > 0 and self.junction is not None:
            dist = self.junction - veh.x
            if dist < EXIT_PREP_DISTANCE:
                urgency = min(1.0, max(0.0, 1.0 - dist / EXIT_PREP_DISTANCE) + 0.2)
                if self._gap_acceptable(veh, veh.lane - 1, urgency):
                    return veh.lane - 1
            return None
        # Discretionary: move if clearly impeded and a neighbor lane is freer.
        leader = self._leader_of(veh)
        if leader is None:
            return None
        gap = leader.x - leader.length - veh.x
        v_here = min(FREE_FLOW_SPEED,
                     krauss_safe_speed(veh.v, leader.v, gap, veh.tau,
                                       veh.max_decel))
        if v_here > veh.v - 1.0:
            return None
        best, best_gain = None, 2.0
        for target in (veh.lane - 1, veh.lane + 1):
            if target < 0 or target >= geometry.lane_count:
                continue
            if veh.route == ROUTE_EXIT and target > veh.lane:
                continue
            t_leader, _, _ = self._neighbors(self.lanes[target], veh.x)
            if t_leader is None:
                v_there = FREE_FLOW_SPEED
            else:
                t_gap = t_leader.x - t_leader.length - veh.x
                v_there = min(FREE_FLOW_SPEED,
                              krauss_safe_speed(veh.v, t_leader.v, t_gap,
                                                veh.tau, veh.max_decel))
            gain = v_there - v_here
            if gain > best_gain and self._gap_acceptable(veh, target, 0.0):
                best, best_gain = target, gain
        return best

    def _leader_of(self, veh: Vehicle) -> Optional[Vehicle]:
        lane = self.lanes[veh.lane]
        i = lane.index(veh)
        return lane[i - 1] if i > 0 else None

    def _apply_lane_changes(self) -> None:
        for lid in self.lane_ids:
            # iterate over a snapshot: executing a change mutates the lists
            for veh in list(self.lanes[lid]):
                if veh.lane != lid:
                    continue  # already moved this tick
                target = self.lane_change_decision(veh)
                if target is None:
                    continue
                self.lanes[lid].remove(veh)
                dest = self.lanes[target]
                _, _, pos = self._neighbors(dest, veh.x)
                dest.insert(pos, veh)
                veh.lane = target
                self._log(EVENT_LANE_CHANGE, veh.id)

    # ---- longitudinal dynamics ----------------------------------------

    def _longitudinal(self, dt: float) -> None:
        rng_random = self.rng.random
        on_ramp_end = self.ramp_end
        for lid in self.lane_ids:
            lane = self.lanes[lid]
            leader: Optional[Vehicle] = None
            for veh in lane:
                v = veh.v
                bound = veh.max_accel
                if veh.equipped and self.acc_enabled:
                    a = acc_target_gap_control(veh, leader, veh.gap_cmd, dt)
                    v_new = v + a * dt
                else:
                    if leader is not None:
                        gap = leader.x - leader.length - veh.x
                        v_safe = krauss_safe_speed(v, leader.v, gap, veh.tau,
                                                   veh.max_decel)
                    else:
                        v_safe = FREE_FLOW_SPEED
                    v_new = v + bound * dt
                    if v_new > FREE_FLOW_SPEED:
                        v_new = FREE_FLOW_SPEED
                    if v_new > v_safe:
                        v_new = v_safe
                    if veh.sigma > 0.0:
                        v_new -= veh.sigma * bound * dt * rng_random()
                if lid == RAMP_LANE and on_ramp_end is not None:
                    # brake for the lane end only once inside true stopping
                    # distance, so mergers can match mainline speed first;
                    # overruns despawn (teleport analog)
                    wall_gap = on_ramp_end - veh.x - 2.0
                    if wall_gap < v * v / (2.0 * veh.max_decel) + 15.0:
                        v_wall = krauss_safe_speed(v, 0.0, wall_gap, 0.5,
                                                   veh.max_decel)
                        if v_new > v_wall:
                            v_new = v_wall
                floor = v - veh.max_decel * dt
                if v_new < floor:
                    v_new = floor
                if v_new < 0.0:
                    v_new = 0.0
                veh.a = (v_new - v) / dt
                leader = veh
        for lid in self.lane_ids:
            for veh in self.lanes[lid]:
                veh.v += veh.a * dt
                veh.x += veh.v * dt
            self.lanes[lid].sort(key=lambda w: -w.x)

    # ---- events and despawns ------------------------------------------

    def _detect_events(self) -> None:
        min_gap = self.run.min_gap_for_near_collision
        current_nc: set[tuple[int, int]] = set()
        crashed: list[Vehicle] = []
        for lid in self.lane_ids:
            lane = self.lanes[lid]
            for i in range(1, len(lane)):
                leader, follower = lane[i - 1], lane[i]
                gap = leader.x - leader.length - follower.x
                if gap < 0.0:
                    self._log(EVENT_ACTUAL_COLLISION, follower.id, leader.id)
                    self.collisions += 1
                    crashed.append(leader)
                    crashed.append(follower)
                elif gap < min_gap and follower.v > leader.v:
                    pair = (follower.id, leader.id)
                    current_nc.add(pair)
                    if pair not in self._active_nc:
                        self._log(EVENT_NEAR_COLLISION, follower.id, leader.id)
        self._active_nc = current_nc
        for veh in crashed:
            lane = self.lanes[veh.lane]
            if veh in lane:
                lane.remove(veh)
                self.despawned += 1
                self._log(EVENT_DESPAWN, veh.id)

    def _despawn(self) -> None:
        end = self.geometry.mainline_length
        junction = self.junction
        for lid in self.lane_ids:
            lane = self.lanes[lid]
            keep = []
            for veh in lane:
                out = veh.x >= end
                exited = (veh.route == ROUTE_EXIT and lid == 0
                          and junction is not None and veh.x >= junction)
                stranded = (lid == RAMP_LANE and self.ramp_end is not None
                            and veh.x >= self.ramp_end)
                if out or exited or stranded:
                    self.despawned += 1
                    self._log(EVENT_DESPAWN, veh.id)
                    if out and veh.route == ROUTE_THROUGH:
                        travel = self.time - veh.spawn_time
                        self.completed.append((veh, travel))
                        self.all_completed.append((self.time, travel))
                else:
                    keep.append(veh)
            if len(keep) != len(lane):
                self.lanes[lid][:] = keep

    # ---- main entry ----------------------------------------------------

    def step(self, dt: Optional[float] = None) -> None:
        """Advance the world by one physics step.

        Time is incremented first so events, trajectory rows, and post-step
        observations all carry the same timestamp.
        """
        if dt is None:
            dt = self.run.physics_timestep
        self.time += dt
        self.step_index += 1
        self._process_spawns()
        if self.step_index % self._lc_period_steps == 1 or self._lc_period_steps == 1:
            self._apply_lane_changes()
        self._longitudinal(dt)
        self._detect_events()
        if self.trajectory_sink is not None:
            self.trajectory_sink(self)
        self._despawn()

    def drain_completed(self) -> list[tuple[Vehicle, float]]:
        done, self.completed = self.completed, []
        return done


def detect_near_collisions(world: World) -> list[tuple[int, int]]:
    """Current (follower_id, leader_id) near-collision pairs.

    A pair qualifies iff the leader is immediately ahead in the same lane,
    the bumper gap is below the configured minimum, and the follower is
    strictly faster.
    """
    out = []
    min_gap = world.run.min_gap_for_near_collision
    for lid in world.lane_ids:
        lane = world.lanes[lid]
        for i in range(1, len(lane)):
            leader, follower = lane[i - 1], lane[i]
            gap = leader.x - leader.length - follower.x
            if gap < min_gap and follower.v > leader.v:
                out.append((follower.id, leader.id))
    return out
