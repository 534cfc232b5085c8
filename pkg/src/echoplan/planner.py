"""Multi-modal waypoint decoding, command branch selection and the L1 trajectory loss."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from echoplan.components import EchoPlanner
from echoplan.world import NavigationCommand

# Frozen command -> branch index map; serialized with checkpoints.
BRANCH_ORDER = {c.name: int(c) for c in NavigationCommand}


def plan(tokens: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    """Decode scene tokens into (..., N_c, N_t, 2) ego-frame waypoints."""
    return model.planner(tokens)


def select_branch(multi: torch.Tensor, command) -> torch.Tensor:
    """Pick the command-consistent branch; `command` may be a scalar or a batch."""
    idx = torch.as_tensor(command, dtype=torch.long)
    if idx.dim() == 0:
        return multi[..., int(idx), :, :]
    return multi[torch.arange(multi.shape[0]), idx]


def traj_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all waypoint coordinates."""
    if pred.shape != gt.shape:
        raise ValueError(f"traj_loss shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def dump_trajectories(rows, path) -> None:
    """Write (episode_id, frame_idx, multi) triples as long-format CSV.

    `multi` is an (N_c, N_t, 2) array; one row per branch and step.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "frame_idx", "branch", "step", "x", "y"])
        for episode_id, frame_idx, multi in rows:
            multi = np.asarray(multi, dtype=np.float64)
            for b in range(multi.shape[0]):
                for k in range(multi.shape[1]):
                    w.writerow([episode_id, frame_idx, b, k + 1, f"{multi[b, k, 0]:.6f}", f"{multi[b, k, 1]:.6f}"])


def load_trajectories(path) -> dict:
    """Inverse of dump_trajectories: {(episode_id, frame_idx): (N_c, N_t, 2) array}."""
    cells: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["episode_id"], int(row["frame_idx"]))
            cells.setdefault(key, {})[(int(row["branch"]), int(row["step"]))] = (float(row["x"]), float(row["y"]))
    out = {}
    for key, pts in cells.items():
        nb = 1 + max(b for b, _ in pts)
        ns = max(k for _, k in pts)
        arr = np.zeros((nb, ns, 2))
        for (b, k), xy in pts.items():
            arr[b, k - 1] = xy
        out[key] = arr
    return out
