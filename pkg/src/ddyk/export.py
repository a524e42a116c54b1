"""Plot-ready summaries of a training run directory.

A run directory holds ``rewards.csv`` (episode, cumulative_reward, seed) and a
``seed_<s>/`` folder per seed with ``rollout_<ep>.csv`` logs and the
evaluation rollout ``rollout_eval.csv``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class ExportError(ValueError):
    """The run directory is missing files or holds malformed data."""


def read_rewards(run_dir) -> dict[int, dict[int, float]]:
    """``{seed: {episode: reward}}`` from ``rewards.csv``."""
    path = Path(run_dir) / "rewards.csv"
    if not path.is_file():
        raise ExportError(f"{path} not found")
    out: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["episode", "cumulative_reward", "seed"]:
            raise ExportError(f"{path}: unexpected header {reader.fieldnames}")
        try:
            for row in reader:
                out.setdefault(int(row["seed"]), {})[int(row["episode"])] = float(row["cumulative_reward"])
        except (TypeError, ValueError) as exc:
            raise ExportError(f"{path}: malformed row ({exc})") from exc
    return out


def reward_quantiles(rewards: dict[int, dict[int, float]]) -> list[tuple[int, float, float, float]]:
    """Per-episode ``(episode, median, q25, q75)`` across seeds (linear interpolation)."""
    episodes = sorted({ep for series in rewards.values() for ep in series})
    rows = []
    for ep in episodes:
        vals = np.array([series[ep] for series in rewards.values() if ep in series])
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        rows.append((ep, float(med), float(q25), float(q75)))
    return rows


def _read_column(path: Path, names: tuple[str, ...]) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in names if n not in (reader.fieldnames or [])]
        if missing:
            raise ExportError(f"{path}: missing column(s) {missing}")
        rows = list(reader)
    try:
        return {n: np.array([float(r[n]) for r in rows]) for n in names}
    except ValueError as exc:
        raise ExportError(f"{path}: malformed value ({exc})") from exc


def occupancy(run_dir, seeds, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> list[tuple[int, float, float]]:
    """Mean time (s) per episode spent with the measured level in each bin.

    Samples outside ``[lo, hi]`` count toward the end bins, so each
    episode's row sum equals the episode duration.
    """
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    per_episode: dict[int, list[np.ndarray]] = {}
    for seed in seeds:
        folder = Path(run_dir) / f"seed_{seed}"
        for path in folder.glob("rollout_*.csv"):
            tag = path.stem.split("_", 1)[1]
            if not tag.isdigit():
                continue
            cols = _read_column(path, ("t", "m"))
            dt = float(np.diff(cols["t"][:2])[0]) if cols["t"].size > 1 else 0.0
            idx = np.clip(np.searchsorted(edges, cols["m"], side="right") - 1, 0, bins - 1)
            per_episode.setdefault(int(tag), []).append(np.bincount(idx, minlength=bins) * dt)
    rows = []
    for ep in sorted(per_episode):
        mean = np.mean(per_episode[ep], axis=0)
        rows.extend((ep, float(c), float(v)) for c, v in zip(centers, mean))
    return rows


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def export_run(run_dir, out_dir=None, bins: int = 20) -> list[Path]:
    """Write ``rewards_median_iqr.csv``, ``occupancy.csv`` and ``rollout_sample.csv``.

    Raises:
        ExportError: the run directory is missing or malformed.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ExportError(f"{run_dir} is not a directory")
    out_dir = run_dir if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rewards = read_rewards(run_dir)
    seeds = sorted(rewards) or sorted(int(p.name[5:]) for p in run_dir.glob("seed_*") if p.name[5:].isdigit())
    if not seeds:
        raise ExportError(f"{run_dir} holds no seed directories")
    written = [
        _write(out_dir / "rewards_median_iqr.csv", ["episode", "median", "q25", "q75"], reward_quantiles(rewards)),
        _write(out_dir / "occupancy.csv", ["episode", "output_bin", "mean_time"], occupancy(run_dir, seeds, bins)),
    ]
    sample = run_dir / f"seed_{seeds[0]}" / "rollout_eval.csv"
    if not sample.is_file():
        raise ExportError(f"{sample} not found")
    (out_dir / "rollout_sample.csv").write_text(sample.read_text())
    written.append(out_dir / "rollout_sample.csv")
    return written
