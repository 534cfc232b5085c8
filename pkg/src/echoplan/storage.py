"""On-disk episode datasets.

Layout: ``<split_dir>/<episode_id>/meta.json`` plus ``frames.bin``.  The
binary file starts with the magic ``EPW1`` and six little-endian uint32
dims (H, W, K_sem, N_t, max_agents, n_frames), followed by one packed record
per frame: raster, ego state, agent block, gt_future (all little-endian
float32) and the command as uint8.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from echoplan.raster import GridSpec
from echoplan.world import (
    MAX_AGENTS,
    N_T,
    AgentState,
    EgoState,
    Episode,
    Frame,
    NavigationCommand,
    Scenario,
)

MAGIC = b"EPW1"
_HEADER = np.dtype([("magic", "S4"), ("dims", "<u4", (6,))])


class DatasetError(ValueError):
    """Dataset could not be read; `field` names the offending item."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _record_dtype(grid: GridSpec, n_t: int, max_agents: int) -> np.dtype:
    return np.dtype(
        [
            ("raster", "<f4", (grid.H, grid.W, grid.K_sem)),
            ("ego", "<f4", (4,)),
            ("n_agents", "<f4"),
            ("agents", "<f4", (max_agents, 6)),
            ("gt_future", "<f4", (n_t, 2)),
            ("command", "u1"),
        ]
    )


def save_episode(ep: Episode, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    grid = ep.grid
    rec = np.zeros(len(ep.frames), dtype=_record_dtype(grid, N_T, MAX_AGENTS))
    for i, f in enumerate(ep.frames):
        if len(f.agents) > MAX_AGENTS:
            raise DatasetError(f"frame {i} has {len(f.agents)} agents > {MAX_AGENTS}", "agents")
        rec[i]["raster"] = f.raster
        rec[i]["ego"] = f.ego.as_array()
        rec[i]["n_agents"] = len(f.agents)
        for k, a in enumerate(f.agents):
            rec[i]["agents"][k] = a.as_array()
        rec[i]["gt_future"] = f.gt_future
        rec[i]["command"] = int(f.command)
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = MAGIC
    header["dims"] = [grid.H, grid.W, grid.K_sem, N_T, MAX_AGENTS, len(ep.frames)]
    with open(directory / "frames.bin", "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())
    meta = {
        "scenario_id": ep.scenario_id,
        "scenario": ep.scenario.value,
        "seed": ep.seed,
        "grid": {"H": grid.H, "W": grid.W, "cell_size": grid.cell_size, "K_sem": grid.K_sem},
        "n_frames": len(ep.frames),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def save_dataset(episodes, path) -> None:
    """Write episodes under `path`, one subdirectory per episode."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for ep in episodes:
        save_episode(ep, path / ep.scenario_id)


def load_episode(directory: Path) -> Episode:
    meta_path, bin_path = directory / "meta.json", directory / "frames.bin"
    for p in (meta_path, bin_path):
        if not p.is_file():
            raise DatasetError(f"missing file {p}", p.name)
    try:
        meta = json.loads(meta_path.read_text())
        grid = GridSpec(**meta["grid"])
        n_frames = int(meta["n_frames"])
        scenario = Scenario(meta["scenario"])
        seed, scenario_id = int(meta["seed"]), str(meta["scenario_id"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed meta.json in {directory}: {exc}", "meta.json") from exc

    blob = bin_path.read_bytes()
    if len(blob) < _HEADER.itemsize:
        raise DatasetError(f"malformed header in {bin_path}: file too short", "header")
    header = np.frombuffer(blob, dtype=_HEADER, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise DatasetError(f"malformed header in {bin_path}: bad magic {bytes(header['magic'])!r}", "magic")
    H, W, K, n_t, max_agents, nf = (int(v) for v in header["dims"])
    for name, got, want in (
        ("H", H, grid.H), ("W", W, grid.W), ("K_sem", K, grid.K_sem),
        ("N_t", n_t, N_T), ("n_frames", nf, n_frames),
    ):
        if got != want:
            raise DatasetError(f"dimension mismatch for {name}: header {got}, expected {want}", name)
    dtype = _record_dtype(grid, n_t, max_agents)
    payload = blob[_HEADER.itemsize :]
    if len(payload) != nf * dtype.itemsize:
        raise DatasetError(
            f"raster size mismatch in {bin_path}: {len(payload)} bytes, expected {nf * dtype.itemsize}",
            "raster",
        )
    rec = np.frombuffer(payload, dtype=dtype, count=nf)
    frames = []
    for r in rec:
        ego = EgoState(*(float(v) for v in r["ego"]))
        agents = tuple(AgentState(*(float(v) for v in a)) for a in r["agents"][: int(r["n_agents"])])
        frames.append(
            Frame(
                raster=np.array(r["raster"], dtype=np.float32),
                ego=ego,
                agents=agents,
                command=NavigationCommand(int(r["command"])),
                gt_future=np.array(r["gt_future"], dtype=np.float32),
            )
        )
    return Episode(scenario_id, seed, scenario, grid, frames)


def load_dataset(path) -> list[Episode]:
    """Load every episode directory under `path`, sorted by episode id."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"missing dataset directory {path}", "path")
    dirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no episodes found in {path}", "episodes")
    return [load_episode(d) for d in dirs]


def dataset_hash(path) -> str:
    """Content hash over every episode file under `path`, in sorted path order.

    Run manifests and other side files are excluded.
    """
    path = Path(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name in ("meta.json", "frames.bin"):
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
