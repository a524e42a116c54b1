"""Command-line entry point: ``ddyk collect | train | verify | export``.

Exit codes: 0 success, 2 validation failure (bad config, missing or
non-exciting data, malformed run directory), 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .behavior import HankelModel, PersistentExcitationError, Trajectory, excitation_rank
from .config import ConfigError, RunConfig, load_config, write_snapshot
from .env import TankEnv, collect_excitation
from .export import ExportError, export_run
from .rl import train
from .verify import run_all

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_VERIFY = 3

TRAJECTORY_FILE = "excitation.csv"

log = logging.getLogger("ddyk")


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddyk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
        p.add_argument("--no-noise", action="store_true", help="disable measurement noise")

    p = sub.add_parser("collect", help="collect an excitation record and check persistent excitation")
    common(p)

    p = sub.add_parser("train", help="train policies, one per seed")
    common(p)
    p.add_argument("--seed", type=_seed_list, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--episodes", type=int, help="training episodes per seed")
    p.add_argument("--baseline", action="store_true", help="use the unconstrained feedforward actor")
    p.add_argument("--data", type=Path, help=f"excitation record (default: <out>/{TRAJECTORY_FILE})")
    p.add_argument("--workers", type=int, default=1, help="parallel seed workers")

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--config", type=Path, help="accepted for symmetry; the suites use fixed settings")

    p = sub.add_parser("export", help="write plot-ready CSVs for a run directory")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory to summarize")
    p.add_argument("--bins", type=int, default=20, help="level bins for occupancy.csv")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "no_noise", False):
        changes["noise"] = False
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = args.seed
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 0:
            raise ConfigError("--episodes must be nonnegative")
        changes["episodes"] = args.episodes
    if getattr(args, "baseline", False):
        changes["baseline"] = True
    return replace(cfg, **changes)


def cmd_collect(cfg: RunConfig, out: Path) -> dict:
    """Collect the excitation record; writes the CSV and ``pe_report.json``."""
    h = cfg.hankel
    env = TankEnv(cfg.env_config(), rng=h.seed)
    traj = collect_excitation(env, h.N, h.amplitude, rng=h.seed + 1, L=h.L, order_bound=h.order_bound, hold=h.hold, mode=h.mode)
    model = HankelModel(traj, h.L, ridge=h.ridge, order_bound=h.order_bound)
    order = h.L + model.order_bound + 1
    rank, s = excitation_rank(traj.u, order)
    report = {
        "samples": len(traj),
        "required_order": order,
        "rank": rank,
        "singular_value_margin": float(s[-1] / s[0]),
        "hankel_rank": model.rank,
    }
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / TRAJECTORY_FILE)
    (out / "pe_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _train_one(job):
    cfg, model, seed, seed_dir = job
    return train(
        cfg.env_config(),
        model,
        cfg.td3,
        cfg.actor,
        seed=seed,
        episodes=cfg.episodes,
        baseline=cfg.baseline,
        out_dir=seed_dir,
        checkpoint_every=cfg.checkpoint_every,
        record_every=cfg.record_every,
    )


def cmd_train(cfg: RunConfig, out: Path, data: Path | None = None, workers: int = 1) -> list:
    data = out / TRAJECTORY_FILE if data is None else data
    if not data.is_file():
        raise ConfigError(f"excitation record {data} not found; run 'ddyk collect' first")
    try:
        traj = Trajectory.from_csv(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = HankelModel(traj, cfg.hankel.L, ridge=cfg.hankel.ridge, order_bound=cfg.hankel.order_bound)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.snapshot")
    jobs = [(cfg, model, s, out / f"seed_{s}") for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    with open(out / "rewards.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "cumulative_reward", "seed"])
        for res in results:
            w.writerows((ep, r, res.seed) for ep, r in enumerate(res.rewards))
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "eval_reward", "aborted_episodes", "max_certificate_violation"])
        for res in results:
            cert = max((v for _, v in res.certificate), default=float("nan"))
            w.writerow([res.seed, res.eval_reward, sum(res.aborted), cert])
    return results


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "collect":
            report = cmd_collect(_resolve(args), args.out)
            print(
                f"collected {report['samples']} samples: rank {report['rank']} of {report['required_order']} required, "
                f"singular value margin {report['singular_value_margin']:.3e}"
            )
        elif args.command == "train":
            results = cmd_train(_resolve(args), args.out, args.data, args.workers)
            for res in results:
                print(f"seed {res.seed}: final episode reward {res.rewards[-1] if res.rewards else float('nan'):.4f}, "
                      f"evaluation reward {res.eval_reward:.4f}, aborted episodes {sum(res.aborted)}")
        elif args.command == "verify":
            if args.config is not None:
                load_config(args.config)
            results = run_all()
            for r in results:
                print(r.line())
            if not all(r.passed for r in results):
                return EXIT_VERIFY
        elif args.command == "export":
            for path in export_run(args.out, bins=args.bins):
                print(f"wrote {path}")
    except (ConfigError, PersistentExcitationError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
