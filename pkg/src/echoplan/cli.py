"""Command-line entry point: gen-data, train, eval-open, eval-closed, ablate, plot.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numeric failure.
ECHOPLAN_SEED overrides the seed of every subcommand that takes one.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from echoplan import benchmark
from echoplan import checkpoint as ckpt_io
from echoplan.closedloop import OraclePlanner, RolloutConfig, default_suite, rollout, write_trace
from echoplan.components import encode_bev, scene_tokens
from echoplan.planner import dump_trajectories, plan
from echoplan.plotting import plot_any
from echoplan.storage import DatasetError, dataset_hash, load_dataset, save_dataset
from echoplan.trainer import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    TrainingError,
    ablate,
    arm_key,
    build_eval_set,
    build_training_set,
    evaluate_open_loop,
    train,
    write_loss_log,
)
from echoplan.world import Scenario, generate_episode

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("echoplan")


def _seed(value: int) -> int:
    env = os.environ.get("ECHOPLAN_SEED")
    return int(env) if env not in (None, "") else value


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, outputs, config_hash: str | None = None,
                   data_hash: str | None = None, started: float | None = None) -> Path:
    """Record what a subcommand produced; output files are content-addressed."""
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "dataset_hash": data_hash,
        "outputs": {str(p.relative_to(out)): _file_hash(p) for p in sorted(outputs) if p.is_file()},
        "wall_time_s": None if started is None else round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _outputs(out: Path) -> list[Path]:
    return [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]


# subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    out = Path(args.out)
    if args.benchmark:
        train_eps, test_eps = benchmark.split()
        save_dataset(train_eps, out / "train")
        save_dataset(test_eps, out / "test")
        write_manifest(out, "gen-data", _outputs(out), data_hash=dataset_hash(out), started=started)
        print(f"wrote the fixed benchmark: {len(train_eps)} train / {len(test_eps)} test episodes to {out}")
        return EXIT_OK
    mix = [Scenario(s) for s in args.scenarios.split(",")] if args.scenarios else list(Scenario)
    rng = np.random.default_rng(_seed(args.seed))
    seeds = rng.choice(2**31 - 1, size=args.episodes, replace=False)
    episodes = [generate_episode(int(s), mix[i % len(mix)], n_frames=args.frames) for i, s in enumerate(seeds)]
    n_test = int(round(args.test_fraction * len(episodes)))
    save_dataset(episodes[: len(episodes) - n_test], out / "train")
    if n_test:
        save_dataset(episodes[len(episodes) - n_test :], out / "test")
    write_manifest(out, "gen-data", _outputs(out), data_hash=dataset_hash(out), started=started)
    print(f"wrote {len(episodes) - n_test} train / {n_test} test episodes to {out} ({dataset_hash(out)[:12]})")
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.dataset:
        data["dataset"] = args.dataset
    if args.seed is not None:
        data["seed"] = args.seed
    if os.environ.get("ECHOPLAN_SEED"):
        data["seed"] = _seed(0)
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    started = time.time()
    config = _load_config(args)
    if not config.dataset:
        raise ConfigError("invalid config field 'dataset': no dataset given", "dataset")
    out = Path(args.out)
    ck = train(config, load_dataset(config.dataset))
    ck.save(out / "checkpoint")
    write_loss_log(ck.history, out / "loss.csv")
    write_manifest(out, "train", _outputs(out), config.hash(), dataset_hash(config.dataset), started)
    last = ck.history[-1]
    print(f"trained {ck.step} steps; final total {last['total']:.4f} (traj {last['traj']:.4f})")
    return EXIT_OK


def cmd_eval_open(args) -> int:
    started = time.time()
    ck = Checkpoint.load(args.checkpoint)
    episodes = load_dataset(args.split)
    ev = build_eval_set(episodes)
    report = evaluate_open_loop(ck.model, ev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    with torch.no_grad():
        multi = plan(scene_tokens(encode_bev(ev.rasters, ck.model), ev.commands, ck.model), ck.model)
    dump_trajectories(
        [(episodes[i].scenario_id, t, m) for (i, t), m in zip(ev.index, multi.double().numpy())],
        out / "trajectories.csv",
    )
    write_manifest(out, "eval-open", _outputs(out), ck.config.hash(), dataset_hash(args.split), started)
    print(report.to_text())
    return EXIT_OK


def cmd_eval_closed(args) -> int:
    started = time.time()
    suite = tuple(default_suite(args.suite_size, _seed(args.suite_seed)))
    config = RolloutConfig(max_steps=args.max_steps, replan_every=args.replan_every, suite=suite)
    if args.oracle:
        planner, chash = OraclePlanner(), None
    else:
        if not args.checkpoint:
            raise ConfigError("eval-closed needs --checkpoint or --oracle", "checkpoint")
        ck = Checkpoint.load(args.checkpoint)
        planner, chash = ck.model, ck.config.hash()
    report = rollout(planner, config=config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    write_trace(report, out / "trace.csv")
    write_manifest(out, "eval-closed", _outputs(out), chash, None, started)
    print(f"success {report.success_rate:.1f}%  completion {report.route_completion:.3f}  "
          f"collisions {report.collisions}  score {report.score:.3f}")
    return EXIT_OK


def load_grid(path, seeds=None) -> tuple[list[TrainConfig], list[list[str]]]:
    """Expand an ablation grid file into configs plus the table labels of each arm."""
    grid_doc = json.loads(Path(path).read_text())
    if "arms" not in grid_doc:
        raise ConfigError("invalid grid field 'arms': missing", "arms")
    base = grid_doc.get("base", {})
    seeds = seeds or grid_doc.get("seeds", [base.get("seed", 0)])
    configs, labels = [], []
    for arm in grid_doc["arms"]:
        arm = dict(arm)
        tables = arm.pop("tables", [])
        for seed in seeds:
            configs.append(TrainConfig.from_dict({**base, **arm, "seed": seed}))
            labels.append(tables)
    return configs, labels


def cmd_ablate(args) -> int:
    started = time.time()
    seeds = [int(v) for v in args.seeds.split(",")] if args.seeds else None
    configs, labels = load_grid(args.grid, seeds)
    dataset = Path(args.dataset)
    data = build_training_set(load_dataset(dataset / "train"))
    ev = build_eval_set(load_dataset(dataset / "test"))
    table = ablate(configs, data, ev, workers=args.workers,
                   on_arm=lambda c, ck, s: log.info("arm %s seed %d: %s", c.hash(), c.seed, s))
    tags = {}
    for c, lab in zip(configs, labels):
        tags.setdefault(arm_key(c), set()).update(lab)
    for row in table.rows:
        key = (row["cfc"], row["n_tokens"], row["lambda_curbev"], row["lambda_futbev"])
        row["tables"] = sorted(tags.get(key, []))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(table.to_json())
    (out / "ablation.txt").write_text(table.to_text() + "\n")
    write_manifest(out, "ablate", _outputs(out), ckpt_io.config_hash(json.loads(Path(args.grid).read_text())),
                   dataset_hash(dataset), started)
    print(table.to_text())
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    written = []
    for p in args.inputs:
        written += plot_any(p, out)
    for p in written:
        print(p)
    return EXIT_OK


# parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="echoplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=int, default=64)
    g.add_argument("--scenarios", default="", help="comma-separated scenario mix (default: all)")
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.add_argument("--benchmark", action="store_true", help="write the fixed 256-episode benchmark split")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a planner")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--dataset", help="split directory with training episodes")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-open", help="open-loop L2 / collision report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_open)

    c = sub.add_parser("eval-closed", help="closed-loop rollout report")
    c.add_argument("--checkpoint")
    c.add_argument("--oracle", action="store_true", help="use the ground-truth route tracker")
    c.add_argument("--suite-size", type=int, default=20)
    c.add_argument("--suite-seed", type=int, default=10_000)
    c.add_argument("--max-steps", type=int, default=60)
    c.add_argument("--replan-every", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_eval_closed)

    a = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    a.add_argument("grid", help="grid JSON (base config, arms, seeds)")
    a.add_argument("--dataset", required=True, help="dataset root with train/ and test/")
    a.add_argument("--seeds", help="override the grid's seed list")
    a.add_argument("--workers", type=int, default=1, help="train arms in this many worker processes")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="emit SVG charts and CSV plot data")
    pl.add_argument("inputs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ckpt_io.CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
