"""Differentiable blocks shared by the forward and echo loops.

Dense BEV features use the layout (..., H_b, W_b, K); scene tokens are
(..., N_s, K); trajectories are (..., N_t, 2).  Every block accepts an
optional leading batch dimension.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from echoplan.raster import K_SEM


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    W: int = 32
    K: int = 64
    n_tokens: int = 16
    n_steps: int = 6
    n_commands: int = 3
    heads: int = 4
    attn_layers: int = 2
    encoder_hidden: int = 16
    learner_hidden: int = 32
    mln_hidden: int = 64
    head_hidden: int = 64

    def __post_init__(self):
        if self.K % self.heads:
            raise ValueError(f"K={self.K} not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shape(x: torch.Tensor, tail: tuple, what: str) -> None:
    if tuple(x.shape[-len(tail):]) != tuple(tail) or x.dim() not in (len(tail), len(tail) + 1):
        raise ValueError(f"{what}: expected (..., {', '.join(map(str, tail))}), got {tuple(x.shape)}")


class BevEncoder(nn.Module):
    """Stand-in BEV feature extractor: two 3x3 convolutions with tanh."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(K_SEM, cfg.encoder_hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.encoder_hidden, cfg.K, 3, padding=1)

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        _check_shape(raster, (self.cfg.H, self.cfg.W, K_SEM), "encode_bev raster")
        squeeze = raster.dim() == 3
        x = raster.unsqueeze(0) if squeeze else raster
        x = x.permute(0, 3, 1, 2)
        x = torch.tanh(self.conv1(x))
        x = torch.tanh(self.conv2(x))
        x = x.permute(0, 2, 3, 1)
        return x[0] if squeeze else x


class CommandEncoder(nn.Module):
    """Adds a learned per-command K-vector to every BEV cell."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.n_commands, cfg.K)
        nn.init.normal_(self.embedding.weight, std=0.5)

    def forward(self, command: torch.Tensor, bev: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(torch.as_tensor(command, dtype=torch.long))
        return bev + emb[..., None, None, :]


class TokenLearner(nn.Module):
    """Softmax spatial attention pooling of a dense map into N_s tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.score = nn.Sequential(
            nn.Linear(cfg.K, cfg.learner_hidden),
            nn.GELU(),
            nn.Linear(cfg.learner_hidden, cfg.n_tokens),
        )

    def weights(self, bev: torch.Tensor) -> torch.Tensor:
        """Spatial weight maps, shape (..., N_s, H_b*W_b); each row sums to one."""
        flat = bev.flatten(-3, -2)
        logits = self.score(flat)  # (..., HW, N_s)
        return torch.softmax(logits.transpose(-1, -2), dim=-1)

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        alpha = self.weights(bev)
        return alpha @ bev.flatten(-3, -2)


class TokenFuser(nn.Module):
    """Expands tokens to a dense map via learned per-cell queries over the tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_query = nn.Parameter(torch.randn(cfg.H * cfg.W, cfg.K) * 0.5)
        self.key = nn.Linear(cfg.K, cfg.K)
        self.out = nn.Linear(cfg.K, cfg.K)

    def weights(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-cell mixing weights over tokens, shape (..., H_b*W_b, N_s)."""
        keys = self.key(tokens)
        logits = self.pos_query @ keys.transpose(-1, -2) / math.sqrt(self.cfg.K)
        return torch.softmax(logits, dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        mixed = self.weights(tokens) @ tokens
        dense = self.out(mixed)
        return dense.unflatten(-2, (self.cfg.H, self.cfg.W))


class MotionLayerNorm(nn.Module):
    """Layer norm whose scale and shift are generated from the planned waypoints."""

    eps = 1e-5

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.hidden = nn.Linear(2 * cfg.n_steps, cfg.mln_hidden)
        self.gamma = nn.Linear(cfg.mln_hidden, cfg.K)
        self.delta = nn.Linear(cfg.mln_hidden, cfg.K)
        nn.init.normal_(self.gamma.weight, std=0.02)
        nn.init.ones_(self.gamma.bias)
        nn.init.normal_(self.delta.weight, std=0.02)
        nn.init.zeros_(self.delta.bias)

    @classmethod
    def normalize(cls, tokens: torch.Tensor) -> torch.Tensor:
        mean = tokens.mean(-1, keepdim=True)
        var = tokens.var(-1, unbiased=False, keepdim=True)
        return (tokens - mean) / torch.sqrt(var + cls.eps)

    def affine(self, trajectory: torch.Tensor):
        h = F.gelu(self.hidden(trajectory.flatten(-2)))
        return self.gamma(h), self.delta(h)

    def forward(self, tokens: torch.Tensor, trajectory: torch.Tensor) -> torch.Tensor:
        gamma, delta = self.affine(trajectory)
        return gamma[..., None, :] * self.normalize(tokens) + delta[..., None, :]


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.unflatten(-1, (self.heads, -1)).transpose(-2, -3)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        self.last_weights = w.detach()
        out = (w @ v).transpose(-2, -3).flatten(-2)
        return self.o(out)


class SelfAttentionStack(nn.Module):
    """Post-norm residual self-attention layers over tokens (no positional encoding)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = nn.ModuleList(MultiHeadAttention(cfg.K, cfg.heads) for _ in range(cfg.attn_layers))
        self.norm = nn.ModuleList(nn.LayerNorm(cfg.K) for _ in range(cfg.attn_layers))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for attn, norm in zip(self.attn, self.norm):
            x = norm(x + attn(x, x))
        return x


class PlanningDecoder(nn.Module):
    """Waypoint queries (N_t x N_c) cross-attend to scene tokens and regress (x, y)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.n_steps, cfg.n_commands, cfg.K) * 0.5)
        self.cross = MultiHeadAttention(cfg.K, cfg.heads)
        self.norm = nn.LayerNorm(cfg.K)
        self.head = nn.Sequential(nn.Linear(cfg.K, cfg.head_hidden), nn.Tanh(), nn.Linear(cfg.head_hidden, 2))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        q = self.queries.transpose(0, 1).reshape(cfg.n_commands * cfg.n_steps, cfg.K)
        if tokens.dim() == 3:
            q = q.expand(tokens.shape[0], -1, -1)
        emb = self.norm(q + self.cross(q, tokens))
        xy = self.head(emb)
        return xy.unflatten(-2, (cfg.n_commands, cfg.n_steps))


BLOCK_NAMES = (
    "encoder",
    "command_encoder",
    "token_learner",
    "scene_attention",
    "planner",
    "mln",
    "future_attention",
    "token_fuser",
)


class EchoPlanner(nn.Module):
    """Single parameter set serving both the forward and the echo pass."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = BevEncoder(self.cfg)
        self.command_encoder = CommandEncoder(self.cfg)
        self.token_learner = TokenLearner(self.cfg)
        self.scene_attention = SelfAttentionStack(self.cfg)
        self.planner = PlanningDecoder(self.cfg)
        self.mln = MotionLayerNorm(self.cfg)
        self.future_attention = SelfAttentionStack(self.cfg)
        self.token_fuser = TokenFuser(self.cfg)
        self._trace: list[str] | None = None
        for name in BLOCK_NAMES:
            getattr(self, name).register_forward_pre_hook(self._make_hook(name))

    def _make_hook(self, name):
        def hook(module, args):
            if self._trace is not None:
                self._trace.append(name)
        return hook

    @contextmanager
    def trace(self):
        """Record the top-level blocks executed inside the context, in order."""
        self._trace = []
        try:
            yield self._trace
        finally:
            self._trace = None


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> EchoPlanner:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EchoPlanner(cfg)
    return model.to(dtype)


# functional surface -------------------------------------------------------


def encode_bev(raster: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    return model.encoder(raster)


def encode_command(command, bev: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    return model.command_encoder(command, bev)


def token_learn(bev: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    return model.token_learner(bev)


def token_fuse(tokens: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    return model.token_fuser(tokens)


def mln(tokens: torch.Tensor, trajectory: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    _check_shape(trajectory, (model.cfg.n_steps, 2), "mln trajectory")
    return model.mln(tokens, trajectory)


def self_attention_refine(tokens: torch.Tensor, model: EchoPlanner) -> torch.Tensor:
    return model.future_attention(tokens)


def scene_tokens(bev: torch.Tensor, command, model: EchoPlanner) -> torch.Tensor:
    """Command-aware sparse scene representation of a dense map."""
    return model.scene_attention(token_learn(encode_command(command, bev, model), model))
