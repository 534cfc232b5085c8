"""Procedural driving world: routes, agents, scenarios and episodes.

All positions are meters in a right-handed world frame (x forward at the
episode start, y to the left).  Ego and agent state values are rounded to
float32 at generation time so that the on-disk format round-trips exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from echoplan.raster import (
    GridSpec,
    RoadGeometry,
    rasterize_frame,
    rect_corners,
    rects_overlap,
)

DT = 0.5
N_T = 6
EGO_LENGTH = 4.0
EGO_WIDTH = 2.0
EGO_SPEED = 2.5
ROAD_HALF_WIDTH = 5.0
DEFAULT_FRAMES = 16
MAX_AGENTS = 4
COMMAND_THRESHOLD = math.radians(15.0)

_POLY_STEP = 0.05


class NavigationCommand(enum.IntEnum):
    """High-level route instruction; the integer value is the planner branch index."""

    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2


class Scenario(enum.Enum):
    STRAIGHT = "straight"
    LEFT_TURN = "left_turn"
    RIGHT_TURN = "right_turn"
    INTERSECTION_MIXED = "intersection_mixed"


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def _f32(v: float) -> float:
    return float(np.float32(v))


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"ego speed must be >= 0, got {self.speed}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("agent length and width must be > 0")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.heading, self.speed, self.length, self.width],
            dtype=np.float64,
        )


@dataclass(eq=False)
class Frame:
    raster: np.ndarray  # (H, W, 5) float32, ego frame
    ego: EgoState
    agents: tuple[AgentState, ...]
    command: NavigationCommand
    gt_future: np.ndarray  # (N_T, 2) float32, ego frame

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.raster.dtype == other.raster.dtype
            and np.array_equal(self.raster, other.raster)
            and self.ego == other.ego
            and self.agents == other.agents
            and self.command == other.command
            and np.array_equal(self.gt_future, other.gt_future)
        )


@dataclass(eq=False)
class Episode:
    scenario_id: str
    seed: int
    scenario: Scenario
    grid: GridSpec
    frames: list[Frame] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.seed == other.seed
            and self.scenario == other.scenario
            and self.grid == other.grid
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )


# ---------------------------------------------------------------------------
# route geometry


@dataclass(frozen=True)
class Segment:
    kind: str  # "line" or "arc"
    length: float
    curvature: float = 0.0  # signed, 1/m; positive turns left


class Route:
    """Piecewise line/arc path parameterized by arc length from its start pose."""

    def __init__(self, start: tuple[float, float, float], segments: list[Segment]):
        self.start = start
        self.segments = list(segments)
        self._s0 = [0.0]
        self._poses = [start]
        for seg in self.segments:
            self._poses.append(self._advance(self._poses[-1], seg, seg.length))
            self._s0.append(self._s0[-1] + seg.length)
        self.length = self._s0[-1]

    @staticmethod
    def _advance(pose, seg: Segment, ds):
        x, y, h = pose
        ds = np.asarray(ds, dtype=np.float64)
        if seg.curvature == 0.0:
            return x + ds * np.cos(h), y + ds * np.sin(h), h + 0.0 * ds
        k = seg.curvature
        h1 = h + k * ds
        return x + (np.sin(h1) - np.sin(h)) / k, y - (np.cos(h1) - np.cos(h)) / k, h1

    def pose(self, s):
        """World pose (x, y, heading) at arc length s; extrapolates linearly at both ends."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        xs, ys, hs = np.empty_like(s), np.empty_like(s), np.empty_like(s)
        idx = np.searchsorted(self._s0, s, side="right") - 1
        for i in np.unique(idx):
            m = idx == i
            if i < 0:
                seg, pose, ds = Segment("line", 0.0), self._poses[0], s[m]
            elif i >= len(self.segments):
                seg, pose = Segment("line", 0.0), self._poses[-1]
                ds = s[m] - self.length
            else:
                seg, pose, ds = self.segments[i], self._poses[i], s[m] - self._s0[i]
            xs[m], ys[m], hs[m] = self._advance(pose, seg, ds)
        return xs, ys, hs

    def polyline(self, s_from: float, s_to: float, step: float = _POLY_STEP):
        n = max(2, int(math.ceil((s_to - s_from) / step)) + 1)
        s = np.linspace(s_from, s_to, n)
        x, y, h = self.pose(s)
        return np.stack([x, y], axis=1), h

    def project(self, x: float, y: float, s_hint: float = 0.0, window: float = 6.0) -> float:
        """Arc length of the route point nearest to (x, y), searched around s_hint."""
        lo, hi = max(-5.0, s_hint - window), min(self.length, s_hint + window)
        for step in (0.05, 0.0005):
            pts, _ = self.polyline(lo, hi, step=step)
            d = np.hypot(pts[:, 0] - x, pts[:, 1] - y)
            best = lo + int(np.argmin(d)) * (hi - lo) / (len(pts) - 1)
            lo, hi = best - 0.05, best + 0.05
        return best


def mirror_route(route: Route) -> Route:
    x, y, h = route.start
    return Route((x, -y, -h), [replace(seg, curvature=-seg.curvature) for seg in route.segments])


# ---------------------------------------------------------------------------
# world


@dataclass(frozen=True)
class AgentTrack:
    """Constant-velocity agent; position at time t is start + velocity * t."""

    x0: float
    y0: float
    heading: float
    speed: float
    length: float
    width: float

    def state_at(self, t: float) -> AgentState:
        return AgentState(
            x=_f32(self.x0 + self.speed * math.cos(self.heading) * t),
            y=_f32(self.y0 + self.speed * math.sin(self.heading) * t),
            heading=_f32(self.heading),
            speed=_f32(self.speed),
            length=_f32(self.length),
            width=_f32(self.width),
        )


@dataclass
class World:
    """Static road layout, ego route, ego speed and agent tracks for one episode."""

    scenario: Scenario
    seed: int
    route: Route
    roads: list[Route]
    road_extent: list[tuple[float, float]]
    agents: list[AgentTrack]
    ego_speed: float = EGO_SPEED
    maneuver: NavigationCommand = NavigationCommand.STRAIGHT
    _road_cache: list = field(default_factory=list, repr=False)

    def road_polylines(self):
        if not self._road_cache:
            for road, (lo, hi) in zip(self.roads, self.road_extent):
                self._road_cache.append(road.polyline(lo, hi))
        return self._road_cache

    def road_geometry(self, s_from: float) -> RoadGeometry:
        """Road layout plus the remaining route corridor starting at arc length s_from."""
        route_pts, _ = self.route.polyline(s_from, self.route.length)
        return RoadGeometry(
            centerlines=self.road_polylines(),
            half_width=ROAD_HALF_WIDTH,
            route=route_pts,
        )

    def ego_at(self, s: float) -> EgoState:
        x, y, h = self.route.pose(s)
        return EgoState(_f32(x[0]), _f32(y[0]), _f32(wrap_angle(h[0])), _f32(self.ego_speed))

    def agents_at(self, t: float) -> tuple[AgentState, ...]:
        return tuple(a.state_at(t) for a in self.agents)


def mirror_world(world: World) -> World:
    swap = {NavigationCommand.LEFT: NavigationCommand.RIGHT, NavigationCommand.RIGHT: NavigationCommand.LEFT}
    scen = {
        Scenario.LEFT_TURN: Scenario.RIGHT_TURN,
        Scenario.RIGHT_TURN: Scenario.LEFT_TURN,
    }.get(world.scenario, world.scenario)
    return World(
        scenario=scen,
        seed=world.seed,
        route=mirror_route(world.route),
        roads=[mirror_route(r) for r in world.roads],
        road_extent=list(world.road_extent),
        agents=[replace(a, y0=-a.y0, heading=-a.heading) for a in world.agents],
        ego_speed=world.ego_speed,
        maneuver=swap.get(world.maneuver, world.maneuver),
    )


def _episode_duration(n_frames: int) -> float:
    return (n_frames - 1 + N_T) * DT


def _collides_with_route(track: AgentTrack, route: Route, speed: float, duration: float, margin: float) -> bool:
    ts = np.arange(0.0, duration + 1e-9, 0.1)
    ex, ey, eh = route.pose(speed * ts)
    ego = rect_corners(ex, ey, eh, EGO_LENGTH + 2 * margin, EGO_WIDTH + 2 * margin)
    ax = track.x0 + track.speed * math.cos(track.heading) * ts
    ay = track.y0 + track.speed * math.sin(track.heading) * ts
    ag = rect_corners(ax, ay, np.full_like(ts, track.heading), track.length, track.width)
    return bool(np.any(rects_overlap(ego, ag)))


def _sample_agents(rng: np.random.Generator, anchors, route: Route, speed: float, duration: float):
    """Constant-velocity agents in side lanes; rejection keeps the ego route collision-free."""
    n = int(rng.integers(0, MAX_AGENTS + 1))
    agents = []
    for _ in range(n):
        for _attempt in range(20):
            ax, ay, ah = anchors[int(rng.integers(len(anchors)))]
            lateral = float(rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 4.2))
            along = float(rng.uniform(-8.0, 22.0))
            direction = float(rng.choice([0.0, math.pi]))
            spd = float(rng.uniform(0.0, 4.0))
            length = float(rng.uniform(3.5, 5.0))
            width = float(rng.uniform(1.6, 2.0))
            x0 = ax + along * math.cos(ah) - lateral * math.sin(ah)
            y0 = ay + along * math.sin(ah) + lateral * math.cos(ah)
            track = AgentTrack(x0, y0, float(wrap_angle(ah + direction)), spd, length, width)
            if not _collides_with_route(track, route, speed, duration, margin=0.5):
                agents.append(track)
                break
    return agents


def build_world(seed: int, scenario: Scenario, n_frames: int = DEFAULT_FRAMES) -> World:
    """Sample the deterministic world behind (seed, scenario)."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    scenario = Scenario(scenario)
    if scenario is Scenario.RIGHT_TURN:
        return mirror_world(build_world(seed, Scenario.LEFT_TURN, n_frames))

    rng = np.random.default_rng([seed, list(Scenario).index(scenario)])
    duration = _episode_duration(n_frames)
    speed = EGO_SPEED
    start = (0.0, 0.0, 0.0)
    maneuver = NavigationCommand.STRAIGHT

    if scenario is Scenario.STRAIGHT:
        route = Route(start, [Segment("line", 60.0)])
        roads = [Route((-25.0, 0.0, 0.0), [Segment("line", 110.0)])]
        extent = [(0.0, 110.0)]
        anchors = [(0.0, 0.0, 0.0)]
    elif scenario is Scenario.LEFT_TURN:
        approach = float(rng.uniform(2.0, 9.0))
        radius = float(rng.uniform(6.0, 10.0))
        segs = [Segment("line", approach), Segment("arc", radius * math.pi / 2, 1.0 / radius), Segment("line", 45.0)]
        route = Route(start, segs)
        roads = [Route((-25.0, 0.0, 0.0), [Segment("line", 25.0 + approach)] + segs[1:])]
        extent = [(0.0, roads[0].length)]
        exit_x, exit_y, exit_h = route.pose(approach + radius * math.pi / 2)
        anchors = [(0.0, 0.0, 0.0), (float(exit_x[0]), float(exit_y[0]), float(exit_h[0]))]
    else:
        center = float(rng.uniform(6.0, 12.0))
        radius = float(rng.uniform(5.0, 7.0))
        maneuver = NavigationCommand(int(rng.integers(3)))
        if maneuver is NavigationCommand.STRAIGHT:
            segs = [Segment("line", 60.0)]
        else:
            sign = 1.0 if maneuver is NavigationCommand.LEFT else -1.0
            segs = [
                Segment("line", center - radius),
                Segment("arc", radius * math.pi / 2, sign / radius),
                Segment("line", 45.0),
            ]
        route = Route(start, segs)
        roads = [
            Route((-25.0, 0.0, 0.0), [Segment("line", 110.0)]),
            Route((center, -45.0, math.pi / 2), [Segment("line", 90.0)]),
        ]
        extent = [(0.0, 110.0), (0.0, 90.0)]
        anchors = [(0.0, 0.0, 0.0), (center, 0.0, math.pi / 2)]

    agents = _sample_agents(rng, anchors, route, speed, duration)
    return World(scenario, seed, route, roads, extent, agents, speed, maneuver)


# ---------------------------------------------------------------------------
# episodes


def command_for_route(future_headings) -> NavigationCommand:
    """Label a look-ahead window by its net heading change (+-15 degree threshold)."""
    headings = list(future_headings)
    if not headings:
        raise ValueError("empty route segment")
    delta = wrap_angle(headings[-1] - headings[0])
    if delta > COMMAND_THRESHOLD:
        return NavigationCommand.LEFT
    if delta < -COMMAND_THRESHOLD:
        return NavigationCommand.RIGHT
    return NavigationCommand.STRAIGHT


def to_ego_frame(points, ego: EgoState) -> np.ndarray:
    """Transform world points (..., 2) into the ego frame of `ego`."""
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx = p[..., 0] - ego.x
    dy = p[..., 1] - ego.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def to_world_frame(points, ego: EgoState) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return np.stack([ego.x + c * p[..., 0] - s * p[..., 1], ego.y + s * p[..., 0] + c * p[..., 1]], axis=-1)


def ego_track(world: World, n_frames: int) -> list[EgoState]:
    """Ego states at frames 0 .. n_frames - 1 + N_T (the tail backs the last gt_future)."""
    return [world.ego_at(world.ego_speed * DT * i) for i in range(n_frames + N_T)]


def frame_command(egos: list[EgoState], t: int) -> NavigationCommand:
    return command_for_route([e.heading for e in egos[t : t + N_T + 1]])


def future_raster(world: World, t: int, grid: GridSpec, n_frames: int = DEFAULT_FRAMES) -> np.ndarray:
    """Scene of frame t+1 rasterized in the ego frame of frame t (supervision target)."""
    egos = ego_track(world, n_frames)
    s_next = world.ego_speed * DT * (t + 1)
    return rasterize_frame(egos[t], world.agents_at(DT * (t + 1)), world.road_geometry(s_next), grid)


def episode_from_world(world: World, grid: GridSpec, n_frames: int = DEFAULT_FRAMES) -> Episode:
    egos = ego_track(world, n_frames)
    frames = []
    for t in range(n_frames):
        ego = egos[t]
        agents = world.agents_at(DT * t)
        raster = rasterize_frame(ego, agents, world.road_geometry(world.ego_speed * DT * t), grid)
        fut = np.array([[e.x, e.y] for e in egos[t + 1 : t + 1 + N_T]])
        gt = to_ego_frame(fut, ego).astype(np.float32)
        frames.append(Frame(raster, ego, agents, frame_command(egos, t), gt))
    return Episode(
        scenario_id=f"{world.scenario.value}-{world.seed:06d}",
        seed=world.seed,
        scenario=world.scenario,
        grid=grid,
        frames=frames,
    )


def generate_episode(seed: int, scenario: Scenario, grid: GridSpec | None = None, n_frames: int = DEFAULT_FRAMES) -> Episode:
    """Deterministic episode for (seed, scenario, grid)."""
    if n_frames < N_T + 2:
        raise ValueError(f"n_frames must be >= {N_T + 2}")
    grid = grid or GridSpec()
    return episode_from_world(build_world(seed, scenario, n_frames), grid, n_frames)


def mirror_episode(ep: Episode) -> Episode:
    """Reflect an episode about the world x-axis (ego-frame rasters flip left/right)."""
    swap = {NavigationCommand.LEFT: NavigationCommand.RIGHT, NavigationCommand.RIGHT: NavigationCommand.LEFT}
    scen = {Scenario.LEFT_TURN: Scenario.RIGHT_TURN, Scenario.RIGHT_TURN: Scenario.LEFT_TURN}.get(ep.scenario, ep.scenario)
    frames = []
    for f in ep.frames:
        r = f.raster[:, ::-1, :].copy()
        r[..., 2] = -r[..., 2]
        gt = f.gt_future.copy()
        gt[:, 1] = -gt[:, 1]
        ego = replace(f.ego, y=-f.ego.y, heading=_f32(wrap_angle(-f.ego.heading)))
        agents = tuple(replace(a, y=-a.y, heading=-a.heading) for a in f.agents)
        frames.append(Frame(r, ego, agents, swap.get(f.command, f.command), gt))
    return Episode(f"{scen.value}-{ep.seed:06d}", ep.seed, scen, ep.grid, frames)
