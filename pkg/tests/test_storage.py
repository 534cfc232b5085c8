import json

import numpy as np
import pytest
import torch

from echoplan import checkpoint as ckpt_io
from echoplan.storage import DatasetError, dataset_hash, load_dataset, save_dataset
from echoplan.world import Scenario, generate_episode


@pytest.fixture(scope="module")
def episodes():
    return [generate_episode(s, sc) for s, sc in zip(range(4), Scenario)]


def test_round_trip_is_exact(tmp_path, episodes):
    save_dataset(episodes, tmp_path / "train")
    loaded = load_dataset(tmp_path / "train")
    by_id = {e.scenario_id: e for e in episodes}
    assert len(loaded) == len(episodes)
    for ep in loaded:
        assert ep == by_id[ep.scenario_id]


def test_hash_is_stable_and_content_sensitive(tmp_path, episodes):
    save_dataset(episodes, tmp_path / "a")
    save_dataset(episodes, tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
    save_dataset(episodes[:1], tmp_path / "c")
    assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "c")


def test_missing_directory(tmp_path):
    with pytest.raises(DatasetError, match="missing dataset directory"):
        load_dataset(tmp_path / "nope")


def test_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no episodes found"):
        load_dataset(tmp_path / "empty")


def _one(tmp_path, episodes):
    save_dataset(episodes[:1], tmp_path / "d")
    return next((tmp_path / "d").iterdir())


def test_bad_magic(tmp_path, episodes):
    d = _one(tmp_path, episodes)
    blob = bytearray((d / "frames.bin").read_bytes())
    blob[:4] = b"XXXX"
    (d / "frames.bin").write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="malformed header") as exc:
        load_dataset(tmp_path / "d")
    assert exc.value.field == "magic"


def test_truncated_header(tmp_path, episodes):
    d = _one(tmp_path, episodes)
    (d / "frames.bin").write_bytes(b"EPW1")
    with pytest.raises(DatasetError, match="malformed header"):
        load_dataset(tmp_path / "d")


def test_dimension_mismatch_names_field(tmp_path, episodes):
    d = _one(tmp_path, episodes)
    meta = json.loads((d / "meta.json").read_text())
    meta["grid"]["H"] = 16
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="dimension mismatch for H") as exc:
        load_dataset(tmp_path / "d")
    assert exc.value.field == "H"


def test_truncated_payload(tmp_path, episodes):
    d = _one(tmp_path, episodes)
    blob = (d / "frames.bin").read_bytes()
    (d / "frames.bin").write_bytes(blob[:-10])
    with pytest.raises(DatasetError, match="raster size mismatch"):
        load_dataset(tmp_path / "d")


def test_missing_meta(tmp_path, episodes):
    d = _one(tmp_path, episodes)
    (d / "meta.json").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(tmp_path / "d")


def test_checkpoint_tensor_round_trip(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"a.weight": torch.randn(3, 4, generator=g), "b": torch.randn(5, generator=g), "scalar": torch.tensor(2.5)}
    ckpt_io.save(tmp_path / "ck", tensors, {"k": 1})
    back, manifest = ckpt_io.load(tmp_path / "ck")
    assert manifest == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k].numpy(), tensors[k].numpy().astype(np.float32))


def test_checkpoint_corruption(tmp_path):
    ckpt_io.save(tmp_path / "ck", {"w": torch.ones(100)}, {})
    p = tmp_path / "ck" / "tensors.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ckpt_io.CheckpointError, match="truncated"):
        ckpt_io.load(tmp_path / "ck")
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(ckpt_io.CheckpointError, match="magic"):
        ckpt_io.load(tmp_path / "ck")
    with pytest.raises(ckpt_io.CheckpointError, match="missing"):
        ckpt_io.load(tmp_path / "absent")


def test_config_hash_ignores_key_order():
    assert ckpt_io.config_hash({"a": 1, "b": 2}) == ckpt_io.config_hash({"b": 2, "a": 1})
    assert ckpt_io.config_hash({"a": 1}) != ckpt_io.config_hash({"a": 2})
