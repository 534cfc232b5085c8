"""The fixed 256-episode benchmark used for the ablation analogs."""

from __future__ import annotations

from echoplan.trainer import EvalSet, TrainConfig, TrainingSet, build_eval_set, build_training_set
from echoplan.world import Episode, Scenario, generate_episode

N_EPISODES = 256
N_TRAIN = 192  # episodes 0..191 train, 192..255 held out

# Desk-scale training settings shared by every benchmark arm.
SETTINGS = {
    "epochs": 4,
    "learning_rate": 1e-3,
    "batch_size": 16,
    "K": 32,
    "encoder_hidden": 8,
}


def episodes() -> list[Episode]:
    scen = list(Scenario)
    return [generate_episode(s, scen[s % len(scen)]) for s in range(N_EPISODES)]


def split(eps: list[Episode] | None = None) -> tuple[list[Episode], list[Episode]]:
    eps = episodes() if eps is None else eps
    return eps[:N_TRAIN], eps[N_TRAIN:]


def load() -> tuple[TrainingSet, EvalSet]:
    train_eps, test_eps = split()
    return build_training_set(train_eps), build_eval_set(test_eps)


def config(**overrides) -> TrainConfig:
    return TrainConfig.from_dict({**SETTINGS, **overrides})
