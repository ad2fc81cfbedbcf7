"""Experiment harness: training runs, paired-seed sweeps, latency probes and
space-time trajectory capture, all emitted as deterministic CSV files.

Every sweep evaluates compared systems on identical seed lists (paired
seeds), so per-seed differences are attributable to the controller.  CSV
files open with comment lines embedding the scenario hash and the seed list.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import statistics
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Optional, Sequence

from .agents import (
    ControlPolicy,
    EpisodeResult,
    FixedTtcPolicy,
    NoAccPolicy,
    ScriptedGapPolicy,
    make_adaptive_policy,
    make_fixed_ttc_policy,
    run_episode,
)
from .metrics import EPISODE_CSV_COLUMNS, TRAJECTORY_CSV_COLUMNS, MetricsError
from .scenario import Scenario

WORKERS_ENV = "ACCSIM_WORKERS"

# Sweepable scenario parameters -> how they are applied to a Scenario.
SWEEP_PARAMETERS = (
    "ttc_star_fixed",
    "penetration",
    "merge_flow",
    "exit_flow",
    "update_interval",
)

SYSTEM_NAMES = ("saint", "fixed-ttc", "base")

# Danger-threshold pins cycled through the gap-agent phases of
# alternating training (domain randomization over the threshold).
ALTERNATING_TTC_PINS = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


class HarnessError(RuntimeError):
    """Raised for invalid sweep/training requests."""


def config_hash(scenario: Scenario) -> str:
    """Stable short hash of a scenario's full configuration."""
    digest = hashlib.sha256(repr(scenario).encode()).hexdigest()
    return digest[:12]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise HarnessError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---- policy specifications (picklable across worker processes) ---------


@dataclass(frozen=True)
class PolicySpec:
    """Recipe for building a ControlPolicy inside a worker process."""

    kind: str  # "base" | "scripted" | "fixed-ttc" | "saint"
    ttc_star: float = 4.0
    ttc_checkpoint: Optional[str] = None
    acc_checkpoint: Optional[str] = None

    def build(self, scenario: Scenario) -> ControlPolicy:
        if self.kind == "base":
            return NoAccPolicy()
        if self.kind == "scripted":
            return ScriptedGapPolicy(self.ttc_star)
        if self.kind == "fixed-ttc":
            policy = make_fixed_ttc_policy(scenario, ttc_star=self.ttc_star)
            if self.acc_checkpoint:
                policy.acc_agent.restore(self.acc_checkpoint)
            return policy
        if self.kind == "saint":
            policy = make_adaptive_policy(scenario)
            if self.ttc_checkpoint:
                policy.ttc_agent.restore(self.ttc_checkpoint)
            if self.acc_checkpoint:
                policy.acc_agent.restore(self.acc_checkpoint)
            return policy
        raise HarnessError(f"unknown policy kind {self.kind!r}")


def apply_sweep_value(scenario: Scenario, parameter: str, value: float) -> Scenario:
    """Return the scenario with one swept parameter applied."""
    if parameter == "ttc_star_fixed":
        return scenario  # consumed by the policy, not the scenario
    if parameter == "penetration":
        return scenario.replace(
            demand=replace(scenario.demand, penetration_rate=float(value)))
    if parameter == "merge_flow":
        return scenario.replace(
            demand=replace(scenario.demand, ramp_flow=float(value)))
    if parameter == "exit_flow":
        if scenario.geometry.ramp_kind != "off_ramp":
            raise HarnessError("exit_flow sweeps need an off-ramp scenario")
        return scenario.replace(
            demand=replace(scenario.demand, ramp_flow=float(value)))
    if parameter == "update_interval":
        return scenario.replace(
            run=replace(scenario.run, control_interval=float(value)))
    raise HarnessError(
        f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")


@dataclass(frozen=True)
class SweepSpec:
    """One sweep: a parameter, its values, and the systems to compare."""

    parameter: str
    values: tuple
    episodes: int = 20
    base_seed: int = 100
    systems: tuple = (PolicySpec("base"),)

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.episodes)]


@dataclass
class SweepRow:
    """One evaluated episode within a sweep."""

    system: str
    parameter: str
    value: float
    result: EpisodeResult


def _run_task(task) -> tuple:
    """Worker entry: evaluate one (system, point, seed) episode."""
    key, scenario, spec, seed = task
    policy = spec.build(scenario)
    result = run_episode(scenario, policy, mode="eval", seed=seed)
    return key, result


def _system_label(spec: PolicySpec) -> str:
    if spec.kind == "scripted":
        return f"scripted-ttc{spec.ttc_star:g}"
    if spec.kind == "fixed-ttc":
        return f"fixed-ttc{spec.ttc_star:g}"
    return spec.kind


def run_sweep(scenario: Scenario, sweep: SweepSpec,
              progress: Optional[Callable[[str], None]] = None) -> list[SweepRow]:
    """Evaluate every (system, value, seed) combination with paired seeds."""
    tasks = []
    for spec in sweep.systems:
        label = _system_label(spec)
        for value in sweep.values:
            point_scenario = apply_sweep_value(scenario, sweep.parameter, value)
            point_spec = spec
            if sweep.parameter == "ttc_star_fixed":
                point_spec = replace(spec, ttc_star=float(value))
                label_v = _system_label(point_spec)
            else:
                label_v = label
            for seed in sweep.seeds():
                key = (label_v, float(value), seed)
                tasks.append((key, point_scenario, point_spec, seed))
    outputs = {}
    workers = worker_count()
    if workers > 1:
        ctx = get_context("spawn")
        with ctx.Pool(workers) as pool:
            for key, result in pool.imap_unordered(_run_task, tasks):
                outputs[key] = result
                if progress:
                    progress(f"{key[0]} {key[1]:g} seed {key[2]}")
    else:
        for task in tasks:
            key, result = _run_task(task)
            outputs[key] = result
            if progress:
                progress(f"{key[0]} {key[1]:g} seed {key[2]}")
    rows = []
    for key in sorted(outputs):  # deterministic merge order
        label_v, value, seed = key
        rows.append(SweepRow(label_v, sweep.parameter, value, outputs[key]))
    return rows


# ---- aggregation -------------------------------------------------------


def summarize(rows: Sequence[SweepRow]) -> list[dict]:
    """Mean +/- std per (system, value) over seeds."""
    groups: dict[tuple, list[SweepRow]] = {}
    for row in rows:
        groups.setdefault((row.system, row.value), []).append(row)
    out = []
    for (system, value), grp in sorted(groups.items()):
        ncs = [r.result.metrics.near_collisions for r in grp]
        speeds = [r.result.metrics.mean_speed for r in grp]
        delays = [r.result.metrics.mean_delay for r in grp]
        out.append({
            "system": system,
            "value": value,
            "episodes": len(grp),
            "nc_mean": statistics.fmean(ncs),
            "nc_std": statistics.pstdev(ncs) if len(ncs) > 1 else 0.0,
            "speed_mean": statistics.fmean(speeds),
            "speed_std": statistics.pstdev(speeds) if len(speeds) > 1 else 0.0,
            "delay_mean": statistics.fmean(delays),
        })
    return out


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        rk = [0.0] * len(vals)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            avg = (i + j) / 2.0 + 1.0
            for k in range(i, j + 1):
                rk[order[k]] = avg
            i = j + 1
        return rk
    rx, ry = ranks(list(xs)), ranks(list(ys))
    mx, my = statistics.fmean(rx), statistics.fmean(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    dy = math.sqrt(sum((b - my) ** 2 for b in ry))
    if dx == 0.0 or dy == 0.0:
        return 0.0
    return num / (dx * dy)


def paired_t_pvalue(diffs: Sequence[float]) -> float:
    """One-sided paired t-test p-value for mean(diffs) < 0.

    Uses the t CDF via the regularized incomplete beta function.
    """
    n = len(diffs)
    if n < 2:
        raise HarnessError("paired test needs at least two pairs")
    mean = statistics.fmean(diffs)
    sd = statistics.stdev(diffs)
    if sd == 0.0:
        return 0.0 if mean < 0 else 1.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    # P(T <= t); for t<0 this is 0.5 * I_{df/(df+t^2)}(df/2, 1/2)
    x = df / (df + t * t)
    tail = 0.5 * _reg_inc_beta(df / 2.0, 0.5, x)
    return tail if t < 0 else 1.0 - tail


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) by continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def _beta_cf(a: float, b: float, x: float, max_iter: int = 200,
             eps: float = 1e-12) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-30:
        d = 1e-30
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-30:
            d = 1e-30
        c = 1.0 + aa / c
        if abs(c) < 1e-30:
            c = 1e-30
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-30:
            d = 1e-30
        c = 1.0 + aa / c
        if abs(c) < 1e-30:
            c = 1e-30
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


# ---- CSV emission ------------------------------------------------------


def _write_csv(path, header_comments: list[str], columns: Sequence[str],
               rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def write_sweep_csv(path, scenario: Scenario, sweep: SweepSpec,
                    rows: Sequence[SweepRow]) -> None:
    comments = [
        f"config={config_hash(scenario)}",
        f"seeds={','.join(str(s) for s in sweep.seeds())}",
        f"parameter={sweep.parameter}",
    ]
    columns = ("system", "parameter", "value") + EPISODE_CSV_COLUMNS
    data = [[r.system, r.parameter, r.value] + r.result.metrics.csv_row()
            for r in rows]
    _write_csv(path, comments, columns, data)


def write_summary_csv(path, scenario: Scenario, sweep: SweepSpec,
                      rows: Sequence[SweepRow]) -> None:
    comments = [
        f"config={config_hash(scenario)}",
        f"seeds={','.join(str(s) for s in sweep.seeds())}",
        f"parameter={sweep.parameter}",
        "aggregates are mean and population std over seeds",
    ]
    columns = ("system", "value", "episodes", "nc_mean", "nc_std",
               "speed_mean", "speed_std", "delay_mean")
    data = [[s["system"], s["value"], s["episodes"],
             f"{s['nc_mean']:.6f}", f"{s['nc_std']:.6f}",
             f"{s['speed_mean']:.6f}", f"{s['speed_std']:.6f}",
             f"{s['delay_mean']:.6f}"] for s in summarize(rows)]
    _write_csv(path, comments, columns, data)


# ---- training ----------------------------------------------------------


@dataclass
class TrainResult:
    policy: ControlPolicy
    episodes: list[EpisodeResult] = field(default_factory=list)
    ttc_rewards: list[float] = field(default_factory=list)
    acc_rewards: list[float] = field(default_factory=list)


def train(scenario: Scenario, *, system: str = "saint", episodes: int = 300,
          seed: int = 0, out_dir=None, checkpoint_every: int = 50,
          resume: bool = False, fixed_ttc_star: float = 4.0,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train the selected system and optionally persist checkpoints/rewards.

    Episode seeds are ``seed*10_000 + episode`` so distinct training seeds
    see disjoint traffic realizations.  With ``resume`` and an ``out_dir``
    containing checkpoints, training restarts from the saved weights and
    epsilon state.
    """
    if system == "saint":
        policy = make_adaptive_policy(scenario, seed=seed)
    elif system == "fixed-ttc":
        policy = make_fixed_ttc_policy(scenario, seed=seed,
                                       ttc_star=fixed_ttc_star)
    else:
        raise HarnessError(f"system {system!r} is not trainable")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_paths = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_paths["acc"] = out / "acc_agent.ckpt"
        if system == "saint":
            ckpt_paths["ttc"] = out / "ttc_agent.ckpt"
    rewards_path = out / "rewards.csv" if out is not None else None
    start_ep = 0
    if resume and out is not None and ckpt_paths["acc"].exists():
        policy.acc_agent.restore(ckpt_paths["acc"])
        if system == "saint" and ckpt_paths["ttc"].exists():
            policy.ttc_agent.restore(ckpt_paths["ttc"])
        if rewards_path.exists():
            with open(rewards_path) as fh:
                lines = [ln for ln in fh
                         if ln.strip() and not ln.startswith("#")]
            start_ep = max(0, len(lines) - 1)  # minus the header row

    schedule = scenario.agents.training_schedule
    alternating = schedule == "alternating" and system == "saint"
    result = TrainResult(policy)
    reward_rows = []
    for offset in range(episodes):
        ep = start_ep + offset
        ep_seed = seed * 10_000 + ep
        try:
            if alternating and ep % 2 == 0:
                # Gap-agent episodes run with the threshold pinned, cycling
                # the pin over the plausible range so the gap agent
                # generalizes across danger thresholds instead of
                # co-adapting to a single one; threshold-agent episodes run
                # against the frozen gap agent.  Each agent then learns in
                # a quasi-stationary environment.
                pin = ALTERNATING_TTC_PINS[(ep // 2) % len(ALTERNATING_TTC_PINS)]
                pinned = FixedTtcPolicy(policy.acc_agent, pin)
                res = run_episode(scenario, pinned, mode="train", seed=ep_seed)
            elif alternating:
                res = run_episode(scenario, policy, mode="train", seed=ep_seed,
                                  train_ttc=True, train_acc=False)
            else:
                res = run_episode(scenario, policy, mode="train", seed=ep_seed)
        except MetricsError:
            # a fully gridlocked exploratory episode yields no completions;
            # skip its metrics but keep the learned experience
            continue
        result.episodes.append(res)
        result.ttc_rewards.append(res.ttc_reward)
        result.acc_rewards.append(res.acc_reward)
        reward_rows.append([ep, ep_seed, f"{res.ttc_reward:.6f}",
                            f"{res.acc_reward:.6f}",
                            res.metrics.near_collisions,
                            f"{res.metrics.mean_speed:.6f}",
                            f"{res.final_ttc_star:g}"])
        if progress and (ep % 10 == 0 or offset == episodes - 1):
            progress(f"episode {ep}: ttc_reward={res.ttc_reward:.1f} "
                     f"acc_reward={res.acc_reward:.1f}")
        if out is not None and ((offset + 1) % checkpoint_every == 0
                                or offset == episodes - 1):
            policy.acc_agent.save(ckpt_paths["acc"])
            if system == "saint":
                policy.ttc_agent.save(ckpt_paths["ttc"])
    if out is not None:
        if start_ep > 0:
            # resumed run: append rows, keep the existing header
            with open(rewards_path, "a", newline="") as fh:
                csv.writer(fh).writerows(reward_rows)
        else:
            comments = [
                f"config={config_hash(scenario)}",
                f"training_seed={seed}",
                f"system={system}",
            ]
            _write_csv(rewards_path, comments,
                       ("episode", "seed", "ttc_reward", "acc_reward",
                        "near_collisions", "mean_speed", "final_ttc_star"),
                       reward_rows)
    return result


# ---- latency and space-time capture ------------------------------------


def measure_latency(scenario: Scenario, policy: ControlPolicy, *,
                    min_decisions: int = 1000, base_seed: int = 100) -> list[float]:
    """Per-decision latencies (ms) over however many episodes are needed."""
    latencies: list[float] = []
    seed = base_seed
    while len(latencies) < min_decisions:
        res = run_episode(scenario, policy, mode="eval", seed=seed,
                          measure_latency=True)
        latencies.extend(res.metrics.decision_latency_ms)
        seed += 1
        if seed - base_seed > 200:
            raise HarnessError("latency run failed to accumulate decisions")
    return latencies


def capture_spacetime(scenario: Scenario, policy: ControlPolicy, *,
                      seed: int = 0, out_path=None) -> list:
    """Per-step trajectory rows for space-time diagrams; optionally CSV."""
    from .metrics import TrajectoryRow

    rows: list[TrajectoryRow] = []

    def sink(world):
        for lid in world.lane_ids:
            leader = None
            for veh in world.lanes[lid]:
                gap = (leader.x - leader.length - veh.x
                       if leader is not None else math.inf)
                rows.append(TrajectoryRow(world.time, veh.id, lid, veh.x,
                                          veh.v, veh.a, gap, veh.equipped))
                leader = veh

    run_episode(scenario, policy, mode="eval", seed=seed, trajectory_sink=sink)
    if out_path is not None:
        comments = [f"config={config_hash(scenario)}", f"seeds={seed}"]
        data = [[f"{r.time:.1f}", r.id, r.lane, f"{r.position:.3f}",
                 f"{r.speed:.3f}", f"{r.accel:.3f}",
                 "inf" if math.isinf(r.gap) else f"{r.gap:.3f}",
                 int(r.equipped)] for r in rows]
        _write_csv(out_path, comments, TRAJECTORY_CSV_COLUMNS, data)
    return rows
