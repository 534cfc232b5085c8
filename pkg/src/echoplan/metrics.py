"""Open-loop planning metrics under the final/max and average aggregation protocols.

Collision semantics are cell based: the ego footprint placed at a predicted
waypoint collides when any grid cell whose center lies inside the footprint
also lies inside an agent box of the true scene at that step.  The grid is
centered on the ego of the evaluated frame.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from echoplan.cfc import bev_mse
from echoplan.raster import GridSpec, footprint_mask, points_in_rect
from echoplan.world import EGO_LENGTH, EGO_WIDTH, N_T, Episode, to_ego_frame, wrap_angle

HORIZONS = {"1s": 2, "2s": 4, "3s": 6}


class Protocol(enum.Enum):
    FINAL_MAX = "final_max"  # step-h displacement; any collision up to h
    AVERAGE = "average"  # mean over steps 1..h


def collision_grid(grid: GridSpec) -> GridSpec:
    """Grid used for collision checks: raster resolution, twice the extent."""
    return grid.scaled(2)


def l2_at_horizon(pred, gt, h_steps: int, protocol: Protocol) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if not 1 <= h_steps <= len(gt):
        raise ValueError(f"h_steps must be in [1, {len(gt)}], got {h_steps}")
    d = np.linalg.norm(pred[:h_steps] - gt[:h_steps], axis=-1)
    if Protocol(protocol) is Protocol.FINAL_MAX:
        return float(d[-1])
    return float(d.mean())


def trajectory_headings(pred) -> np.ndarray:
    """Heading at each waypoint from consecutive differences; step 1 keeps the current heading."""
    pred = np.asarray(pred, dtype=np.float64)
    out = np.zeros(len(pred))
    for k in range(1, len(pred)):
        d = pred[k] - pred[k - 1]
        out[k] = math.atan2(d[1], d[0]) if np.hypot(*d) > 1e-6 else out[k - 1]
    return out


def agent_occupancy(agents, ego, grid: GridSpec) -> np.ndarray:
    """Agent boxes (world frame) rasterized on a grid centered on `ego`."""
    cx, cy = grid.cell_centers()
    occ = np.zeros(cx.shape, dtype=bool)
    for a in agents:
        (ax, ay), = to_ego_frame([[a.x, a.y]], ego)
        occ |= points_in_rect(cx, cy, ax, ay, wrap_angle(a.heading - ego.heading), a.length, a.width)
    return occ


def footprint_collides(x: float, y: float, heading: float, occupancy: np.ndarray, grid: GridSpec) -> bool:
    return bool(np.any(footprint_mask(grid, x, y, heading, EGO_LENGTH, EGO_WIDTH) & occupancy))


def collision_steps(pred, episode: Episode, frame_idx: int, h_steps: int = N_T, grid: GridSpec | None = None) -> np.ndarray:
    """Boolean per-step collision flags for steps 1..h_steps."""
    grid = collision_grid(grid or episode.grid)
    if frame_idx + h_steps >= len(episode.frames):
        raise ValueError(
            f"insufficient future frames: frame {frame_idx} + {h_steps} steps, episode has {len(episode.frames)}"
        )
    pred = np.asarray(pred, dtype=np.float64)
    heads = trajectory_headings(pred)
    ego = episode.frames[frame_idx].ego
    flags = np.zeros(h_steps, dtype=bool)
    for k in range(1, h_steps + 1):
        agents = episode.frames[frame_idx + k].agents
        if not agents:
            continue
        occ = agent_occupancy(agents, ego, grid)
        flags[k - 1] = footprint_collides(pred[k - 1, 0], pred[k - 1, 1], heads[k - 1], occ, grid)
    return flags


def rate_from_flags(flags: np.ndarray, h_steps: int, protocol: Protocol) -> float:
    """Collision percentage from an (n_samples, >= h_steps) flag matrix."""
    flags = np.asarray(flags, dtype=bool)[:, :h_steps]
    if len(flags) == 0:
        return 0.0
    if Protocol(protocol) is Protocol.FINAL_MAX:
        return 100.0 * float(flags.any(axis=1).mean())
    return 100.0 * float(flags.mean(axis=0).mean())


def collision_rate(samples, h_steps: int, protocol: Protocol, grid: GridSpec | None = None) -> float:
    """Percent of colliding plans; `samples` holds (pred, episode, frame_idx) triples."""
    flags = [collision_steps(pred, ep, t, h_steps, grid) for pred, ep, t in samples]
    return rate_from_flags(np.array(flags).reshape(len(flags), h_steps), h_steps, protocol)


def temporal_consistency(pred_bev, gt_bev) -> float:
    return float(bev_mse(torch.as_tensor(pred_bev), torch.as_tensor(gt_bev)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class OpenLoopReport:
    l2: dict = field(default_factory=dict)  # protocol -> horizon -> meters
    collision_rate: dict = field(default_factory=dict)  # protocol -> horizon -> percent
    temporal_consistency: float | None = None
    n_samples: int = 0
    notes: dict = field(default_factory=dict)

    def avg_l2(self, protocol: Protocol) -> float:
        return self.l2[Protocol(protocol).value]["avg"]

    def avg_cr(self, protocol: Protocol) -> float:
        return self.collision_rate[Protocol(protocol).value]["avg"]

    def to_dict(self) -> dict:
        return {
            "l2": self.l2,
            "collision_rate": self.collision_rate,
            "temporal_consistency": self.temporal_consistency,
            "n_samples": self.n_samples,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        cols = list(HORIZONS) + ["avg"]
        head = f"{'protocol':<10} | " + " ".join(f"{'L2 ' + c:>9}" for c in cols) + " | " + " ".join(
            f"{'CR ' + c:>9}" for c in cols
        )
        lines = [head, "-" * len(head)]
        for p in Protocol:
            l2 = " ".join(f"{self.l2[p.value][c]:>9.3f}" for c in cols)
            cr = " ".join(f"{self.collision_rate[p.value][c]:>9.2f}" for c in cols)
            lines.append(f"{p.value:<10} | {l2} | {cr}")
        if self.temporal_consistency is not None:
            lines.append(f"temporal consistency (current BEV MSE): {self.temporal_consistency:.4f}")
        lines.append(f"samples: {self.n_samples}; L2 in meters, CR in percent")
        return "\n".join(lines)


def build_report(preds, gts, flags, tc: float | None = None) -> OpenLoopReport:
    """Aggregate per-sample predictions, ground truths and collision flags."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    rep = OpenLoopReport(temporal_consistency=tc, n_samples=len(preds))
    rep.notes = {
        "final_max": "L2 at the horizon step; CR counts a plan if any step up to the horizon collides",
        "average": "L2 and CR averaged over steps 1..horizon (CR per-step fractions)",
        "horizon_steps": HORIZONS,
    }
    for p in Protocol:
        l2, cr = {}, {}
        for name, h in HORIZONS.items():
            l2[name] = float(np.mean([l2_at_horizon(a, b, h, p) for a, b in zip(preds, gts)])) if len(preds) else 0.0
            cr[name] = rate_from_flags(flags, h, p)
        l2["avg"] = float(np.mean([l2[n] for n in HORIZONS]))
        cr["avg"] = float(np.mean([cr[n] for n in HORIZONS]))
        rep.l2[p.value], rep.collision_rate[p.value] = l2, cr
    return rep
