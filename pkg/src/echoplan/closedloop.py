"""Receding-horizon rollouts of a planner inside the synthetic world."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from echoplan.cfc import infer
from echoplan.components import EchoPlanner
from echoplan.raster import GridSpec, rasterize_frame, rect_corners, rects_overlap
from echoplan.world import (
    DEFAULT_FRAMES,
    DT,
    EGO_LENGTH,
    EGO_WIDTH,
    N_T,
    EgoState,
    Scenario,
    World,
    build_world,
    command_for_route,
    to_ego_frame,
    to_world_frame,
    wrap_angle,
)

log = logging.getLogger(__name__)

COLLISION_PENALTY = 0.6
MAX_TURN = math.radians(30.0)
MAX_STEP_FACTOR = 2.0  # displacement cap per step, in multiples of nominal speed * DT


def default_suite(n: int = 20, base_seed: int = 10_000) -> list[tuple[int, Scenario]]:
    scen = list(Scenario)
    return [(base_seed + i, scen[i % len(scen)]) for i in range(n)]


@dataclass(frozen=True)
class RolloutConfig:
    max_steps: int = 60
    replan_every: int = 1
    goal_radius: float = 1.0
    suite: tuple = field(default_factory=lambda: tuple(default_suite()))

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 1 <= self.replan_every <= N_T:
            raise ValueError(f"replan_every must be in [1, {N_T}]")


@dataclass
class RunResult:
    seed: int
    scenario: str
    success: bool
    completion: float
    collisions: int
    steps: int
    failure: str | None = None
    trace: list = field(default_factory=list, repr=False)

    @property
    def score(self) -> float:
        return self.completion * COLLISION_PENALTY ** self.collisions


@dataclass
class ClosedLoopReport:
    success_rate: float
    route_completion: float
    collisions: int
    score: float
    runs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "route_completion": self.route_completion,
            "collisions": self.collisions,
            "score": self.score,
            "runs": [
                {k: getattr(r, k) for k in ("seed", "scenario", "success", "completion", "collisions", "steps", "failure")}
                | {"score": r.score}
                for r in self.runs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# planners -------------------------------------------------------------------


class OraclePlanner:
    """Ground-truth route tracker: the next N_t route points at nominal speed."""

    def __call__(self, world: World, ego: EgoState, s: float, raster, command) -> np.ndarray:
        ahead = s + world.ego_speed * DT * np.arange(1, N_T + 1)
        x, y, _ = world.route.pose(ahead)
        return to_ego_frame(np.stack([x, y], axis=1), ego)


class StandStillPlanner:
    def __call__(self, world, ego, s, raster, command) -> np.ndarray:
        return np.zeros((N_T, 2))


class ModelPlanner:
    """Runs the forward-only inference path of a trained model."""

    def __init__(self, model: EchoPlanner):
        self.model = model.eval()

    def __call__(self, world, ego, s, raster, command) -> np.ndarray:
        dtype = next(self.model.parameters()).dtype
        out = infer(torch.as_tensor(raster, dtype=dtype), int(command), self.model)
        return out.double().numpy()


# simulation -----------------------------------------------------------------


def route_command(world: World, s: float):
    ahead = s + world.ego_speed * DT * np.arange(N_T + 1)
    _, _, h = world.route.pose(ahead)
    return command_for_route(h)


def advance(ego: EgoState, target, nominal_speed: float) -> EgoState:
    """Turn toward an ego-frame target (rate-capped) and move by its distance (speed-capped)."""
    tx, ty = float(target[0]), float(target[1])
    dist = math.hypot(tx, ty)
    if dist < 1e-9:
        return EgoState(ego.x, ego.y, ego.heading, 0.0)
    turn = max(-MAX_TURN, min(MAX_TURN, math.atan2(ty, tx)))
    dist = min(dist, MAX_STEP_FACTOR * nominal_speed * DT)
    h = ego.heading + turn
    return EgoState(ego.x + dist * math.cos(h), ego.y + dist * math.sin(h), float(wrap_angle(h)), dist / DT)


def in_collision(world: World, ego: EgoState, t: float) -> bool:
    if not world.agents:
        return False
    box = rect_corners(ego.x, ego.y, ego.heading, EGO_LENGTH, EGO_WIDTH)
    for a in world.agents_at(t):
        if rects_overlap(box, rect_corners(a.x, a.y, a.heading, a.length, a.width)):
            return True
    return False


def rollout_world(planner, world: World, config: RolloutConfig, grid: GridSpec) -> RunResult:
    s_goal = world.ego_speed * DT * (DEFAULT_FRAMES - 1)
    gx, gy, _ = world.route.pose(s_goal)
    goal = (float(gx[0]), float(gy[0]))
    ego = world.ego_at(0.0)
    s, t = 0.0, 0.0
    completion, collisions, failure = 0.0, 0, None
    plan_world, plan_idx = None, 0
    trace = []
    success = False
    steps = 0
    for step in range(config.max_steps):
        if plan_world is None or plan_idx >= config.replan_every:
            raster = rasterize_frame(ego, world.agents_at(t), world.road_geometry(s), grid)
            wps = np.asarray(planner(world, ego, s, raster, route_command(world, s)), dtype=np.float64)
            if wps.shape != (N_T, 2) or not np.all(np.isfinite(wps)):
                failure = "non-finite planner output"
                log.warning("run seed=%d step=%d: %s", world.seed, step, failure)
                break
            plan_world, plan_idx = to_world_frame(wps, ego), 0
            trace.append({"step": step, "x": ego.x, "y": ego.y, "heading": ego.heading, "plan": wps.tolist()})
        target = to_ego_frame(plan_world[plan_idx], ego)
        plan_idx += 1
        ego = advance(ego, target, world.ego_speed)
        t += DT
        steps = step + 1
        s = world.route.project(ego.x, ego.y, s_hint=s)
        completion = max(completion, min(1.0, max(0.0, s / s_goal)))
        if in_collision(world, ego, t):
            collisions += 1
            break
        if math.hypot(ego.x - goal[0], ego.y - goal[1]) <= config.goal_radius:
            success = True
            completion = 1.0
            break
    trace.append({"step": steps, "x": ego.x, "y": ego.y, "heading": ego.heading, "plan": None})
    return RunResult(world.seed, world.scenario.value, success, completion, collisions, steps, failure, trace)


def rollout(planner, episode_generator=build_world, config: RolloutConfig | None = None, grid: GridSpec | None = None) -> ClosedLoopReport:
    """Run `planner` on every (seed, scenario) of the suite and aggregate.

    `planner` is either a trained EchoPlanner or a callable
    ``(world, ego, s, raster, command) -> (N_t, 2)`` ego-frame waypoints.
    """
    config = config or RolloutConfig()
    grid = grid or GridSpec()
    if isinstance(planner, EchoPlanner):
        planner = ModelPlanner(planner)
    runs = []
    for seed, scenario in config.suite:
        world = episode_generator(seed, Scenario(scenario))
        runs.append(rollout_world(planner, world, config, grid))
    n = len(runs)
    return ClosedLoopReport(
        success_rate=100.0 * sum(r.success for r in runs) / n,
        route_completion=float(np.mean([r.completion for r in runs])),
        collisions=sum(r.collisions for r in runs),
        score=float(np.mean([r.score for r in runs])),
        runs=runs,
    )


def write_trace(report: ClosedLoopReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wp_cols = [f"wp{k}_{c}" for k in range(1, N_T + 1) for c in ("x", "y")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "scenario", "step", "ego_x", "ego_y", "ego_heading", *wp_cols])
        for r in report.runs:
            for row in r.trace:
                plan = np.asarray(row["plan"]).ravel().tolist() if row["plan"] is not None else [""] * len(wp_cols)
                w.writerow([r.seed, r.scenario, row["step"], row["x"], row["y"], row["heading"], *plan])
