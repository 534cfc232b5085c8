import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import fd
from conftest import SMALL
from echoplan.cfc import (
    LossWeights,
    bev_mse,
    cfc_forward,
    curbev_loss,
    echo_loop,
    forward_loop,
    futbev_loss,
    infer,
    reverse_command,
    total_loss,
)
from echoplan.components import build_model, encode_bev, scene_tokens
from echoplan.planner import plan, select_branch
from echoplan.raster import K_SEM
from echoplan.world import NavigationCommand

L, S, R = NavigationCommand.LEFT, NavigationCommand.STRAIGHT, NavigationCommand.RIGHT


def _rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _sample(seed, batch=None):
    lead = () if batch is None else (batch,)
    return (
        _rand(lead + (SMALL.H, SMALL.W, K_SEM), seed),
        _rand(lead + (SMALL.n_steps, 2), seed + 1),
        _rand(lead + (SMALL.H, SMALL.W, K_SEM), seed + 2),
    )


# command reversal ----------------------------------------------------------------


def test_reverse_command_examples():
    assert reverse_command(L) is R
    assert reverse_command(R) is L
    assert reverse_command(S) is S


@pytest.mark.parametrize("c", list(NavigationCommand))
def test_reverse_is_involution(c):
    assert reverse_command(reverse_command(c)) is c


def test_reverse_is_bijection_and_tensor_form_agrees():
    assert {reverse_command(c) for c in NavigationCommand} == set(NavigationCommand)
    t = torch.tensor([0, 1, 2])
    assert reverse_command(t).tolist() == [int(reverse_command(NavigationCommand(c))) for c in range(3)]


# forward loop --------------------------------------------------------------------


def test_forward_loop_shapes(small_model):
    tokens, bev = forward_loop(_rand((SMALL.n_tokens, SMALL.K), 0), _rand((6, 2), 1), small_model)
    assert tokens.shape == (SMALL.n_tokens, SMALL.K)
    assert bev.shape == (SMALL.H, SMALL.W, SMALL.K)


@pytest.mark.parametrize("seed", range(5))
def test_future_bev_depends_on_plan(seed):
    model = build_model(SMALL, seed=seed, dtype=torch.float64)
    s_t = _rand((SMALL.n_tokens, SMALL.K), seed)
    _, a = forward_loop(s_t, _rand((6, 2), 10 + seed), model)
    _, b = forward_loop(s_t, _rand((6, 2), 20 + seed), model)
    assert (a - b).abs().max() > 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_future_bev_loss_gradient_reaches_waypoints(seed):
    model = build_model(SMALL, seed=seed, dtype=torch.float64)
    s_t = _rand((SMALL.n_tokens, SMALL.K), seed)
    traj = _rand((6, 2), seed + 1)
    target = _rand((SMALL.H, SMALL.W, SMALL.K), seed + 2)
    err, g = fd.check(lambda: futbev_loss(forward_loop(s_t, traj, model)[1], target), traj, np.random.default_rng(seed), n=12)
    assert err < 1e-4
    assert np.abs(g).max() > 0


# BEV losses ----------------------------------------------------------------------


def test_futbev_examples():
    t = _rand((32, 32, 64), 0)
    assert float(futbev_loss(t, t)) == 0.0
    assert abs(float(futbev_loss(t + 2.0, t)) - 4.0) <= 1e-12


def test_curbev_single_entry_example():
    t = torch.zeros(32, 32, 64, dtype=torch.float64)
    p = t.clone()
    p[3, 4, 5] = 1.0
    assert abs(float(curbev_loss(p, t)) - 1 / 65536) <= 1e-12
    assert abs(1 / 65536 - 1.52588e-5) < 1e-10
    assert float(curbev_loss(p, t)) == float(futbev_loss(p, t))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bev_loss_is_cellwise(seed):
    p, t = _rand((8, 8, 4), seed), _rand((8, 8, 4), seed + 1)
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(64))
    pp = p.reshape(64, 4)[perm].reshape(8, 8, 4)
    tp = t.reshape(64, 4)[perm].reshape(8, 8, 4)
    assert abs(float(bev_mse(pp, tp)) - float(bev_mse(p, t))) <= 1e-12


def test_bev_loss_shape_mismatch():
    with pytest.raises(ValueError, match="BEV shape mismatch"):
        bev_mse(torch.zeros(4, 4, 2), torch.zeros(4, 4, 3))


def test_bev_loss_target_carries_no_gradient():
    p = torch.ones(2, 2, 2, requires_grad=True)
    t = torch.zeros(2, 2, 2, requires_grad=True)
    bev_mse(p, t).backward()
    assert t.grad is None and p.grad is not None


# composite objective -------------------------------------------------------------


def test_total_loss_examples():
    b = total_loss(1.0, 2.0, 3.0, LossWeights(0.5, 0.1))
    assert abs(b.total - 2.3) <= 1e-12
    assert total_loss(1.25, 2.0, 3.0, LossWeights(0.0, 0.0)).total == 1.25


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_futbev, w.lambda_curbev) == (0.5, 0.1)


@settings(max_examples=100)
@given(
    parts=st.tuples(*[st.floats(0, 1e3, allow_nan=False)] * 3),
    lf=st.floats(0, 10, allow_nan=False),
    lc=st.floats(0, 10, allow_nan=False),
)
def test_total_loss_identity_and_linearity(parts, lf, lc):
    traj, fut, cur = parts
    b = total_loss(traj, fut, cur, LossWeights(lf, lc))
    assert b.total == traj + lf * fut + lc * cur
    assert (b.traj, b.futbev, b.curbev) == parts
    doubled = total_loss(traj, fut, cur, LossWeights(2 * lf, lc)).total
    assert doubled - b.total == pytest.approx(lf * fut, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(bad, 0.1)


# echo loop -----------------------------------------------------------------------


def _used(outputs, model):
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(sum(o.sum() for o in outputs), params, allow_unused=True)
    return {n for n, g in zip(names, grads) if g is not None}


def test_echo_pass_introduces_no_parameters(small_model):
    raster, _, _ = _sample(0)
    bev = encode_bev(raster, small_model)
    pred = select_branch(plan(scene_tokens(bev, 1, small_model), small_model), 1)
    fut_tokens, fut_bev = forward_loop(scene_tokens(bev, 1, small_model), pred, small_model)
    forward_names = _used((pred, fut_tokens, fut_bev), small_model)
    echo_names = _used(echo_loop(fut_bev.detach(), reverse_command(S), small_model), small_model)
    assert echo_names - forward_names == set()
    assert echo_names == forward_names - {n for n in forward_names if n.startswith("encoder.")}
    assert {n for n, _ in small_model.named_parameters()} == forward_names


def test_echo_blocks_resolve_to_forward_modules(small_model):
    bev = _rand((SMALL.H, SMALL.W, SMALL.K), 0)
    with small_model.trace() as t:
        echo_loop(bev, R, small_model)
    assert t == ["command_encoder", "token_learner", "scene_attention", "planner", "mln", "future_attention",
                 "token_fuser"]


def test_echo_loop_shapes(small_model):
    rev, tokens, bev = echo_loop(_rand((SMALL.H, SMALL.W, SMALL.K), 0), L, small_model)
    assert rev.shape == (6, 2)
    assert tokens.shape == (SMALL.n_tokens, SMALL.K)
    assert bev.shape == (SMALL.H, SMALL.W, SMALL.K)


@pytest.mark.parametrize("seed", range(5))
def test_current_bev_loss_reaches_command_and_learner(seed):
    model = build_model(SMALL, seed=seed, dtype=torch.float64)
    fut = _rand((SMALL.H, SMALL.W, SMALL.K), seed)
    target = _rand((SMALL.H, SMALL.W, SMALL.K), seed + 1)
    cmd = reverse_command(NavigationCommand(seed % 3))
    fn = lambda: curbev_loss(echo_loop(fut, cmd, model)[2], target)  # noqa: E731
    rng = np.random.default_rng(seed)
    emb = model.command_encoder.embedding.weight
    row = int(cmd) * SMALL.K + np.arange(SMALL.K)
    a = fd.analytic_grad(fn, emb, row.tolist())
    with torch.no_grad():
        n = fd.numeric_grad(fn, emb, row.tolist())
    assert fd.rel_err(a, n) < 1e-4 and np.abs(a).max() > 0
    for p in model.token_learner.parameters():
        err, g = fd.check(fn, p, rng)
        assert err < 1e-4


# training graph --------------------------------------------------------------------


def test_cfc_outputs_and_bundle_identity(small_model):
    raster, gt, nxt = _sample(3)
    w = LossWeights(0.5, 0.1)
    out, loss = cfc_forward(small_model, raster, 2, gt, nxt, w)
    f = loss.as_floats()
    assert abs(f["total"] - (f["traj"] + 0.5 * f["futbev"] + 0.1 * f["curbev"])) <= 1e-12
    for v in vars(out).values():
        assert torch.isfinite(v).all()


def test_baseline_gradients_skip_cycle_blocks(small_model):
    raster, gt, nxt = _sample(4, batch=3)
    _, loss = cfc_forward(small_model, raster, torch.tensor([0, 1, 2]), gt, nxt, LossWeights(0.0, 0.0))
    loss.total.backward()
    for name, p in small_model.named_parameters():
        if name.startswith(("mln.", "token_fuser.", "future_attention.")):
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert loss.futbev.item() > 0 and not loss.futbev.requires_grad


def test_cycle_gradients_reach_every_block(small_model):
    raster, gt, nxt = _sample(5, batch=3)
    _, loss = cfc_forward(small_model, raster, torch.tensor([0, 1, 2]), gt, nxt, LossWeights(0.5, 0.1))
    loss.total.backward()
    blocks = {n.split(".")[0] for n, p in small_model.named_parameters() if p.grad is not None and p.grad.abs().sum() > 0}
    assert blocks == {n.split(".")[0] for n, _ in small_model.named_parameters()}


def test_targets_are_gradient_isolated(small_model):
    raster, gt, nxt = _sample(6)
    nxt.requires_grad_(True)
    _, loss = cfc_forward(small_model, raster, 1, gt, nxt, LossWeights(0.5, 0.1))
    loss.total.backward()
    assert nxt.grad is None


def test_fixed_targets_match_computed_targets(small_model):
    raster, gt, nxt = _sample(7)
    w = LossWeights(0.5, 0.1)
    _, a = cfc_forward(small_model, raster, 0, gt, nxt, w)
    with torch.no_grad():
        targets = (encode_bev(nxt, small_model), encode_bev(raster, small_model))
    _, b = cfc_forward(small_model, raster, 0, gt, nxt, w, targets=targets)
    assert a.as_floats() == b.as_floats()


# inference -----------------------------------------------------------------------


def test_infer_trace_excludes_cycle_blocks(small_model):
    raster, _, _ = _sample(8)
    with small_model.trace() as t:
        infer(raster, S, small_model)
    assert t == ["encoder", "command_encoder", "token_learner", "scene_attention", "planner"]
    assert not {"mln", "token_fuser", "future_attention"} & set(t)


def test_infer_matches_training_prediction(small_model):
    raster, gt, nxt = _sample(9)
    out, _ = cfc_forward(small_model, raster, 2, gt, nxt, LossWeights())
    assert torch.equal(infer(raster, 2, small_model), out.pred_traj.detach())


def test_infer_batched(small_model):
    raster, _, _ = _sample(10, batch=2)
    out = infer(raster, torch.tensor([0, 2]), small_model)
    assert out.shape == (2, 6, 2)
    assert torch.equal(out[1], infer(raster[1], 2, small_model))
