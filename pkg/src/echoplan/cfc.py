"""Current -> Future -> Current training graph and the forward-only inference path."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from echoplan.components import (
    EchoPlanner,
    encode_bev,
    mln,
    scene_tokens,
    self_attention_refine,
    token_fuse,
)
from echoplan.planner import plan, select_branch, traj_loss
from echoplan.world import NavigationCommand

_REVERSED = {
    NavigationCommand.LEFT: NavigationCommand.RIGHT,
    NavigationCommand.STRAIGHT: NavigationCommand.STRAIGHT,
    NavigationCommand.RIGHT: NavigationCommand.LEFT,
}


@dataclass(frozen=True)
class LossWeights:
    lambda_futbev: float = 0.5
    lambda_curbev: float = 0.1

    def __post_init__(self):
        for name in ("lambda_futbev", "lambda_curbev"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def cycle_enabled(self) -> bool:
        return self.lambda_futbev > 0 or self.lambda_curbev > 0


@dataclass
class CfcOutputs:
    pred_traj: torch.Tensor
    future_tokens: torch.Tensor
    future_bev: torch.Tensor
    reversed_traj: torch.Tensor
    current_tokens: torch.Tensor
    current_bev: torch.Tensor


@dataclass
class LossBundle:
    traj: torch.Tensor
    futbev: torch.Tensor
    curbev: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("traj", "futbev", "curbev", "total")}


def reverse_command(c):
    """Swap LEFT and RIGHT; STRAIGHT is unchanged.  Works on enums and index tensors."""
    if isinstance(c, torch.Tensor):
        return 2 - c
    return _REVERSED[NavigationCommand(c)]


def forward_loop(s_t: torch.Tensor, pred_traj: torch.Tensor, model: EchoPlanner):
    """Predict future scene tokens and the hallucinated future BEV from a plan."""
    future_tokens = self_attention_refine(mln(s_t, pred_traj, model), model)
    return future_tokens, token_fuse(future_tokens, model)


def echo_loop(future_bev: torch.Tensor, reversed_cmd, model: EchoPlanner):
    """Reconstruct the current scene from the predicted future BEV with shared weights."""
    s_next = scene_tokens(future_bev, reversed_cmd, model)
    reversed_traj = select_branch(plan(s_next, model), reversed_cmd)
    current_tokens = self_attention_refine(mln(s_next, reversed_traj, model), model)
    return reversed_traj, current_tokens, token_fuse(current_tokens, model)


def bev_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"BEV shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return (pred - target.detach()).pow(2).mean()


futbev_loss = bev_mse
curbev_loss = bev_mse


def total_loss(traj, futbev, curbev, weights: LossWeights) -> LossBundle:
    total = traj + weights.lambda_futbev * futbev + weights.lambda_curbev * curbev
    return LossBundle(traj, futbev, curbev, total)


def _as_command_tensor(command) -> torch.Tensor:
    if isinstance(command, torch.Tensor):
        return command.long()
    if isinstance(command, (list, tuple)):
        return torch.tensor([int(c) for c in command], dtype=torch.long)
    return torch.tensor(int(command), dtype=torch.long)


def cfc_forward(model: EchoPlanner, raster, command, gt_traj, next_raster, weights: LossWeights, targets=None):
    """Full training graph for one (batched) sample.

    `next_raster` is the t+1 scene rasterized in the current ego frame.  BEV
    targets come from the shared encoder with gradients stopped, unless a
    precomputed `(future_target, current_target)` pair is given.
    """
    cmd = _as_command_tensor(command)
    bev_t = encode_bev(raster, model)
    s_t = scene_tokens(bev_t, cmd, model)
    pred = select_branch(plan(s_t, model), cmd)
    l_traj = traj_loss(pred, gt_traj)

    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.cycle_enabled):
        if targets is None:
            target_next, target_now = encode_bev(next_raster, model).detach(), bev_t.detach()
        else:
            target_next, target_now = (t.detach() for t in targets)
        future_tokens, future_bev = forward_loop(s_t, pred, model)
        rev_traj, cur_tokens, cur_bev = echo_loop(future_bev, reverse_command(cmd), model)
        l_fut = futbev_loss(future_bev, target_next)
        l_cur = curbev_loss(cur_bev, target_now)

    outputs = CfcOutputs(pred, future_tokens, future_bev, rev_traj, cur_tokens, cur_bev)
    return outputs, total_loss(l_traj, l_fut, l_cur, weights)


def infer(raster, command, model: EchoPlanner) -> torch.Tensor:
    """Forward prediction only: no motion norm, no fuser, no echo pass."""
    cmd = _as_command_tensor(command)
    with torch.no_grad():
        bev = encode_bev(raster, model)
        return select_branch(plan(scene_tokens(bev, cmd, model), model), cmd)
