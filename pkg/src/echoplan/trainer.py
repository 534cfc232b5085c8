"""Training, evaluation and ablation of baseline and cycle-regularized planners."""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np
import torch

from echoplan import checkpoint as ckpt_io
from echoplan.cfc import LossWeights, cfc_forward, echo_loop, forward_loop, infer, reverse_command
from echoplan.components import EchoPlanner, ModelConfig, build_model, encode_bev, scene_tokens
from echoplan.metrics import Protocol, build_report, collision_steps, OpenLoopReport
from echoplan.planner import BRANCH_ORDER, plan, select_branch
from echoplan.raster import GridSpec
from echoplan.world import DT, N_T, Episode, build_world, ego_track, future_raster

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class TrainingError(RuntimeError):
    pass


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lambda_futbev": {"type": "number", "minimum": 0},
        "lambda_curbev": {"type": "number", "minimum": 0},
        "n_tokens": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 4},
        "encoder_hidden": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {"type": ["string", "null"]},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "H": {"type": "integer", "minimum": 1},
                "W": {"type": "integer", "minimum": 1},
                "cell_size": {"type": "number", "exclusiveMinimum": 0},
                "K_sem": {"type": "integer", "enum": [5]},
            },
        },
        "max_steps": {"type": ["integer", "null"], "minimum": 1},
    },
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 5e-5
    weight_decay: float = 1e-2
    batch_size: int = 4
    lambda_futbev: float = 0.5
    lambda_curbev: float = 0.1
    n_tokens: int = 16
    K: int = 64
    encoder_hidden: int = 16
    seed: int = 0
    dataset: str | None = None
    grid: dict = field(default_factory=lambda: {"H": 32, "W": 32, "cell_size": 0.5, "K_sem": 5})
    max_steps: int | None = None

    def __post_init__(self):
        validate_config(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        validate_config(data)
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}", None) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_futbev, self.lambda_curbev)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(**self.grid)

    def model_config(self) -> ModelConfig:
        g = self.grid_spec
        return ModelConfig(H=g.H, W=g.W, K=self.K, n_tokens=self.n_tokens, encoder_hidden=self.encoder_hidden)

    def hash(self) -> str:
        return ckpt_io.config_hash(self.to_dict())


def validate_config(data: dict) -> None:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or (
            exc.message.split("'")[1] if "'" in exc.message else None
        )
        raise ConfigError(f"invalid config field {where!r}: {exc.message}", where) from exc


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingSet:
    rasters: torch.Tensor  # (N, H, W, 5)
    next_rasters: torch.Tensor  # (N, H, W, 5): frame t+1 scene in frame t's ego frame
    gt: torch.Tensor  # (N, N_t, 2)
    commands: torch.Tensor  # (N,)

    def __len__(self) -> int:
        return len(self.commands)


def _world_for(ep: Episode):
    world = build_world(ep.seed, ep.scenario, len(ep.frames))
    egos = ego_track(world, len(ep.frames))
    same = all(
        egos[t] == f.ego and world.agents_at(t * DT) == f.agents for t, f in enumerate(ep.frames)
    )
    if not same:
        raise ValueError(f"episode {ep.scenario_id} does not match its generator (seed {ep.seed})")
    return world


def build_training_set(episodes) -> TrainingSet:
    """Every frame that has a successor becomes one supervised sample."""
    rasters, nxt, gts, cmds = [], [], [], []
    for ep in episodes:
        world = _world_for(ep)
        for t in range(len(ep.frames) - 1):
            f = ep.frames[t]
            rasters.append(f.raster)
            nxt.append(future_raster(world, t, ep.grid, len(ep.frames)))
            gts.append(f.gt_future)
            cmds.append(int(f.command))
    if not rasters:
        raise ValueError("dataset has no supervised frames")
    return TrainingSet(
        torch.from_numpy(np.stack(rasters)),
        torch.from_numpy(np.stack(nxt)),
        torch.from_numpy(np.stack(gts)),
        torch.tensor(cmds, dtype=torch.long),
    )


def eval_indices(ep: Episode) -> range:
    """Frames with a full N_t-step future inside the episode."""
    return range(len(ep.frames) - N_T)


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    model: EchoPlanner
    config: TrainConfig
    history: list = field(default_factory=list)
    rng_state: dict | None = None
    optimizer_state: dict | None = None
    step: int = 0
    cursor: int = 0
    order: list = field(default_factory=list)

    def save(self, directory) -> Path:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        opt_meta = {}
        if self.optimizer_state:
            names = [n for n, _ in self.model.named_parameters()]
            for idx, st in self.optimizer_state["state"].items():
                for key, val in st.items():
                    tensors[f"optim.{key}.{names[idx]}"] = val
            opt_meta = {"param_groups": self.optimizer_state["param_groups"]}
        manifest = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "model_config": self.model.cfg.to_dict(),
            "branch_order": BRANCH_ORDER,
            "history": self.history,
            "rng_state": self.rng_state,
            "optimizer": opt_meta,
            "step": self.step,
            "cursor": self.cursor,
            "order": self.order,
        }
        return ckpt_io.save(directory, tensors, manifest)

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        tensors, manifest = ckpt_io.load(directory)
        if manifest.get("branch_order", BRANCH_ORDER) != BRANCH_ORDER:
            raise ckpt_io.CheckpointError(f"branch order mismatch: {manifest['branch_order']}")
        config = TrainConfig.from_dict(manifest["config"])
        model = EchoPlanner(ModelConfig(**manifest["model_config"]))
        model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        opt_state = None
        if manifest.get("optimizer"):
            names = [n for n, _ in model.named_parameters()]
            state = {}
            for idx, name in enumerate(names):
                entry = {key: tensors[f"optim.{key}.{name}"] for key in ("step", "exp_avg", "exp_avg_sq")
                         if f"optim.{key}.{name}" in tensors}
                if entry:
                    state[idx] = entry
            opt_state = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
        return cls(
            model=model,
            config=config,
            history=manifest.get("history", []),
            rng_state=manifest.get("rng_state"),
            optimizer_state=opt_state,
            step=int(manifest.get("step", 0)),
            cursor=int(manifest.get("cursor", 0)),
            order=list(manifest.get("order", [])),
        )


def make_optimizer(model: EchoPlanner, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


class Trainer:
    """Owns the model, optimizer and data-order generator of one training run."""

    def __init__(self, config: TrainConfig, data: TrainingSet, resume: Checkpoint | None = None):
        if len(data) == 0:
            raise ValueError("empty training set")
        self.config = config
        self.data = data
        if resume is None:
            self.model = build_model(config.model_config(), seed=config.seed)
            self.rng = np.random.default_rng(config.seed)
            self.history: list = []
            self.step_count = 0
            self.cursor = 0
            self.order: list = []
            self.optimizer = make_optimizer(self.model, config)
        else:
            self.model = resume.model
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = resume.rng_state
            self.history = list(resume.history)
            self.step_count = resume.step
            self.cursor = resume.cursor
            self.order = list(resume.order)
            self.optimizer = make_optimizer(self.model, config)
            if resume.optimizer_state:
                self.optimizer.load_state_dict(resume.optimizer_state)
        self.weights = config.weights

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        n = self.config.epochs * self.steps_per_epoch
        return min(n, self.config.max_steps) if self.config.max_steps else n

    def _next_batch(self) -> np.ndarray:
        if self.cursor >= len(self.order):
            self.order = self.rng.permutation(len(self.data)).tolist()
            self.cursor = 0
        idx = np.array(self.order[self.cursor : self.cursor + self.config.batch_size])
        self.cursor += len(idx)
        return idx

    def step(self) -> dict:
        idx = torch.from_numpy(self._next_batch())
        d = self.data
        self.model.train()
        _, losses = cfc_forward(self.model, d.rasters[idx], d.commands[idx], d.gt[idx], d.next_rasters[idx], self.weights)
        row = {"step": self.step_count + 1, **losses.as_floats()}
        if not all(math.isfinite(v) for v in losses.as_floats().values()):
            raise TrainingError(f"non-finite loss at step {row['step']}: {losses.as_floats()}")
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        self.optimizer.step()
        self.step_count += 1
        self.history.append(row)
        return row

    def run(self, n_steps: int | None = None) -> Checkpoint:
        n = self.total_steps - self.step_count if n_steps is None else n_steps
        for _ in range(max(0, n)):
            row = self.step()
            if row["step"] % 200 == 0:
                log.info("step %d total %.4f traj %.4f", row["step"], row["total"], row["traj"])
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        opt = self.optimizer.state_dict()
        return Checkpoint(
            model=self.model,
            config=self.config,
            history=list(self.history),
            rng_state=self.rng.bit_generator.state,
            optimizer_state={"state": opt["state"], "param_groups": opt["param_groups"]},
            step=self.step_count,
            cursor=self.cursor,
            order=list(self.order),
        )


def train(config: TrainConfig, dataset) -> Checkpoint:
    """Train from scratch; `dataset` is a TrainingSet or a list of episodes."""
    data = dataset if isinstance(dataset, TrainingSet) else build_training_set(dataset)
    with _single_thread():
        return Trainer(config, data).run()


class _single_thread:
    """Pin torch to one thread so runs are bit-reproducible."""

    def __enter__(self):
        self.prev = torch.get_num_threads()
        torch.set_num_threads(1)

    def __exit__(self, *exc):
        torch.set_num_threads(self.prev)


def write_loss_log(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "traj", "futbev", "curbev", "total"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSet:
    episodes: list
    index: list  # (episode position, frame index)
    rasters: torch.Tensor
    commands: torch.Tensor
    gt: np.ndarray


def build_eval_set(episodes) -> EvalSet:
    index, rasters, cmds, gts = [], [], [], []
    for i, ep in enumerate(episodes):
        for t in eval_indices(ep):
            f = ep.frames[t]
            index.append((i, t))
            rasters.append(f.raster)
            cmds.append(int(f.command))
            gts.append(f.gt_future)
    return EvalSet(
        list(episodes),
        index,
        torch.from_numpy(np.stack(rasters)),
        torch.tensor(cmds, dtype=torch.long),
        np.stack(gts).astype(np.float64),
    )


def cycle_reconstruction(model: EchoPlanner, rasters: torch.Tensor, commands: torch.Tensor):
    """Current BEV and its reconstruction through the full current-future-current cycle."""
    with torch.no_grad():
        bev = encode_bev(rasters, model)
        s_t = scene_tokens(bev, commands, model)
        pred = select_branch(plan(s_t, model), commands)
        _, future_bev = forward_loop(s_t, pred, model)
        _, _, current_bev = echo_loop(future_bev, reverse_command(commands), model)
    return bev, current_bev


def predict(model: EchoPlanner, ev: EvalSet, batch: int = 64) -> np.ndarray:
    model.eval()
    out = [infer(ev.rasters[i : i + batch], ev.commands[i : i + batch], model) for i in range(0, len(ev.commands), batch)]
    return torch.cat(out).double().numpy()


def evaluate_open_loop(model: EchoPlanner, episodes, batch: int = 64) -> OpenLoopReport:
    """Both-protocol L2 / collision report plus held-out temporal consistency."""
    ev = episodes if isinstance(episodes, EvalSet) else build_eval_set(episodes)
    with _single_thread():
        preds = predict(model, ev, batch)
        flags = np.array([collision_steps(p, ev.episodes[i], t) for p, (i, t) in zip(preds, ev.index)])
        tc_sum = 0.0
        for i in range(0, len(ev.commands), batch):
            bev, rec = cycle_reconstruction(model, ev.rasters[i : i + batch], ev.commands[i : i + batch])
            tc_sum += float((rec - bev).pow(2).mean()) * len(bev)
    return build_report(preds, ev.gt, flags, tc_sum / len(ev.commands))


# ---------------------------------------------------------------------------
# ablation


def arm_key(config: TrainConfig) -> tuple:
    return ("on" if config.weights.cycle_enabled else "off", config.n_tokens, config.lambda_curbev, config.lambda_futbev)


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)  # one dict per arm, seed-averaged

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        head = (f"{'CFC':<4} {'N_s':>4} {'l_cur':>6} {'l_fut':>6} {'seeds':>5} | "
                f"{'L2max':>7} {'CRmax':>7} {'L2avg':>7} {'CRavg':>7} {'TC':>8}")
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r['cfc']:<4} {r['n_tokens']:>4} {r['lambda_curbev']:>6.2f} {r['lambda_futbev']:>6.2f} "
                f"{len(r['seeds']):>5} | {r['l2_final_max']:>7.3f} {r['cr_final_max']:>7.2f} "
                f"{r['l2_average']:>7.3f} {r['cr_average']:>7.2f} {r['temporal_consistency']:>8.4f}"
            )
        return "\n".join(lines)


def summarize(report: OpenLoopReport) -> dict:
    return {
        "l2_final_max": report.avg_l2(Protocol.FINAL_MAX),
        "cr_final_max": report.avg_cr(Protocol.FINAL_MAX),
        "l2_average": report.avg_l2(Protocol.AVERAGE),
        "cr_average": report.avg_cr(Protocol.AVERAGE),
        "temporal_consistency": report.temporal_consistency,
    }


_ARMS: tuple | None = None  # (configs, data, eval set) shared with forked workers


def _run_arm(i: int):
    configs, data, ev = _ARMS
    ck = train(configs[i], data)
    return ck.model.state_dict(), ck.history, summarize(evaluate_open_loop(ck.model, ev))


def run_arms(configs, data: TrainingSet, ev: EvalSet, workers: int = 1) -> list[tuple[Checkpoint, dict]]:
    """Train and evaluate independent arms, optionally in forked worker processes.

    Every run is single-threaded and seeded, so results do not depend on `workers`.
    """
    global _ARMS
    configs = list(configs)
    _ARMS = (configs, data, ev)
    try:
        if workers > 1 and len(configs) > 1:
            ctx = mp.get_context("fork")
            with ctx.Pool(min(workers, len(configs))) as pool:
                raw = pool.map(_run_arm, range(len(configs)))
        else:
            raw = [_run_arm(i) for i in range(len(configs))]
    finally:
        _ARMS = None
    out = []
    for config, (state, history, summary) in zip(configs, raw):
        model = EchoPlanner(config.model_config())
        model.load_state_dict(state)
        out.append((Checkpoint(model, config, history, step=len(history)), summary))
    return out


def ablate(grid, dataset, eval_split, on_arm=None, workers: int = 1) -> AblationTable:
    """Train every config, evaluate it, and average arms that differ only by seed."""
    data = dataset if isinstance(dataset, TrainingSet) else build_training_set(dataset)
    ev = eval_split if isinstance(eval_split, EvalSet) else build_eval_set(eval_split)
    groups: dict = {}
    for config, (ck, summary) in zip(grid, run_arms(grid, data, ev, workers)):
        if on_arm is not None:
            on_arm(config, ck, summary)
        groups.setdefault(arm_key(config), []).append((config.seed, summary))
    table = AblationTable()
    for key, runs in groups.items():
        row = {"cfc": key[0], "n_tokens": key[1], "lambda_curbev": key[2], "lambda_futbev": key[3]}
        row["seeds"] = [s for s, _ in runs]
        for metric in runs[0][1]:
            row[metric] = float(np.mean([r[metric] for _, r in runs]))
        row["per_seed"] = [dict(seed=s, **r) for s, r in runs]
        table.rows.append(row)
    return table
