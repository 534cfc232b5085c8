"""SVG charts and CSV plot-data from logs, traces and reports (read-only over inputs)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tag(path) -> str:
    """Output stem; includes the parent directory so same-named inputs do not collide."""
    path = Path(path)
    return f"{path.parent.name}_{path.stem}" if path.parent.name else path.stem


def _write_csv(rows: list[dict], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def plot_loss_log(path, out_dir: Path) -> list[Path]:
    rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for key in ("traj", "futbev", "curbev", "total"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    svg = out_dir / f"{_tag(path)}_loss.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, _write_csv(rows, out_dir / f"{_tag(path)}_loss.csv")]


def plot_trace(path, out_dir: Path) -> list[Path]:
    """Ego paths of a closed-loop trace, one line per run."""
    rows = _read_csv(path)
    runs: dict = {}
    for r in rows:
        runs.setdefault((r["seed"], r["scenario"]), []).append((float(r["ego_x"]), float(r["ego_y"])))
    fig, ax = plt.subplots(figsize=(6, 6))
    data = []
    for (seed, scen), pts in runs.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], linewidth=1, label=f"{scen} {seed}")
        data.extend({"seed": seed, "scenario": scen, "x": x, "y": y} for x, y in pts)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if len(runs) <= 8:
        ax.legend(fontsize=6)
    svg = out_dir / f"{_tag(path)}_paths.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, _write_csv(data, out_dir / f"{_tag(path)}_paths.csv")]


def plot_trajectories(path, out_dir: Path, limit: int = 12) -> list[Path]:
    """Overlay of dumped multi-branch trajectories for the first few frames."""
    rows = _read_csv(path)
    keys = []
    for r in rows:
        k = (r["episode_id"], r["frame_idx"])
        if k not in keys:
            keys.append(k)
    keys = keys[:limit]
    fig, ax = plt.subplots(figsize=(6, 6))
    data = [r for r in rows if (r["episode_id"], r["frame_idx"]) in keys]
    for k in keys:
        for b in ("0", "1", "2"):
            pts = [(float(r["x"]), float(r["y"])) for r in data if (r["episode_id"], r["frame_idx"]) == k and r["branch"] == b]
            if pts:
                ax.plot([0] + [p[0] for p in pts], [0] + [p[1] for p in pts], color=f"C{b}", linewidth=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m] (ego frame)")
    ax.set_ylabel("y [m]")
    svg = out_dir / f"{_tag(path)}_overlay.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, _write_csv(data, out_dir / f"{_tag(path)}_overlay.csv")]


def plot_report(path, out_dir: Path) -> list[Path]:
    """Metric bars for an open-loop report, ablation table or closed-loop report."""
    rep = json.loads(Path(path).read_text())
    bars = []
    if "rows" in rep:
        for r in rep["rows"]:
            label = f"{r['cfc']} Ns={r['n_tokens']} ({r['lambda_curbev']},{r['lambda_futbev']})"
            bars += [
                {"label": label, "metric": m, "value": r[m]}
                for m in ("l2_final_max", "l2_average", "cr_final_max", "cr_average")
            ]
    elif "l2" in rep:
        for proto in rep["l2"]:
            for h, v in rep["l2"][proto].items():
                bars.append({"label": f"{proto} {h}", "metric": "l2", "value": v})
            for h, v in rep["collision_rate"][proto].items():
                bars.append({"label": f"{proto} {h}", "metric": "collision_rate", "value": v})
    else:
        bars = [{"label": k, "metric": k, "value": rep[k]} for k in ("success_rate", "route_completion", "score")]
    metrics = list(dict.fromkeys(b["metric"] for b in bars))
    fig, axes = plt.subplots(len(metrics), 1, figsize=(7, 2.2 * len(metrics)), squeeze=False)
    for ax, m in zip(axes[:, 0], metrics):
        sel = [b for b in bars if b["metric"] == m]
        ax.bar(range(len(sel)), [b["value"] for b in sel])
        ax.set_xticks(range(len(sel)))
        ax.set_xticklabels([b["label"] for b in sel], rotation=30, ha="right", fontsize=6)
        ax.set_title(m, fontsize=8)
    fig.tight_layout()
    svg = out_dir / f"{_tag(path)}_bars.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, _write_csv(bars, out_dir / f"{_tag(path)}_bars.csv")]


def plot_any(path, out_dir) -> list[Path]:
    """Dispatch on the input's content and write SVG + CSV plot data to out_dir."""
    path, out_dir = Path(path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        return plot_report(path, out_dir)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if "total" in header:
        return plot_loss_log(path, out_dir)
    if "ego_x" in header:
        return plot_trace(path, out_dir)
    if "branch" in header:
        return plot_trajectories(path, out_dir)
    raise ValueError(f"unrecognized plot input {path}: columns {header}")
