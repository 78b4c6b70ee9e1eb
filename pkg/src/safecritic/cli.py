"""Command line entry point: ``safecritic run | diagnose | export``.

A run directory holds ``config.json`` and ``mdp.json`` plus one
``seed_<k>/`` folder per seed with the metric files, policy and critic
checkpoints and ``state.json`` (the inputs ``diagnose`` needs).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import io
from .critic import EnsembleCritic, SafetyCritic
from .harness import ALGORITHMS, ExperimentConfig, export_metrics, run_experiment, theorem_diagnostics


def _parse_seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _parse_schedule(text):
    kind, _, c0 = text.partition(":")
    if kind != "inv_sqrt" or not c0:
        raise argparse.ArgumentTypeError("schedule must look like inv_sqrt:<c0>")
    return float(c0)


def _build_config(args):
    cfg = io.load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.algo is not None:
        changes["algorithm"] = args.algo
    if args.chi is not None:
        changes.update(chi=args.chi, chi_schedule="fixed")
    if args.chi_schedule is not None:
        changes.update(chi_schedule="inv_sqrt", chi_c0=args.chi_schedule)
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def _critic_checkpoint(critic):
    # ensembles are stored as their pessimistic aggregate, which is what the gate reads
    if isinstance(critic, EnsembleCritic):
        agg = SafetyCritic(alpha=0.0, lr=critic.lr, gamma=critic.gamma, precondition=critic.precondition)
        agg.q_ = critic.table()
        agg.n_updates_ = critic.members_[0].n_updates_
        return agg
    return critic


def cmd_run(args):
    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_config(cfg, out / "config.json")
    io.save_mdp(cfg.build_mdp(), out / "mdp.json")
    results = run_experiment(cfg)
    for seed, series in results.items():
        d = out / f"seed_{seed}"
        export_metrics(series, d)
        n_updates = cfg.epochs * cfg.steps_per_epoch
        io.save_policy(series.final_policy, d / "policy.json", step=n_updates)
        io.save_policy(series.last_policy_old, d / "policy_old.json", step=n_updates - cfg.steps_per_epoch)
        if series.final_critic is not None:
            io.save_critic(_critic_checkpoint(series.final_critic), d / "critic.json")
        (d / "state.json").write_text(io.dumps({
            "kind": "run_state", "seed": seed, "v_hat": series.last_v_hat, "chi": series.last_chi,
            "reg_c": series.reg_c, "transitions": series.total_transitions,
        }))
        last = series.records[-1]
        print(f"seed {seed}: cum_failures={series.reg_c:g} avg_reward={last.avg_reward:.4f} "
              f"lambda={last.lam:.4f} -> {d}")
    return 0


def _seed_dirs(run, seed=None):
    dirs = sorted(Path(run).glob("seed_*"), key=lambda p: int(p.name.split("_")[1]))
    if seed is not None:
        dirs = [d for d in dirs if d.name == f"seed_{seed}"]
    if not dirs:
        raise SystemExit(f"no seed directories found under {run}")
    return dirs


def cmd_diagnose(args):
    run = Path(args.run)
    cfg = io.load_config(run / "config.json")
    mdp = io.load_mdp(run / "mdp.json")
    report = {}
    for d in _seed_dirs(run, args.seed):
        if not (d / "critic.json").exists():
            raise SystemExit(f"{d} has no critic checkpoint; diagnostics need a safety critic")
        policy, _ = io.load_policy(d / "policy.json")
        policy_old, _ = io.load_policy(d / "policy_old.json")
        critic = io.load_critic(d / "critic.json")
        state = json.loads((d / "state.json").read_text())
        diag = theorem_diagnostics(mdp, policy_old, policy, critic.table(), cfg, state["v_hat"], chi=state["chi"])
        report[d.name] = asdict(diag)
    print(json.dumps(report, indent=1))
    return 0


def cmd_export(args):
    for d in _seed_dirs(args.run, args.seed):
        sys.stdout.write((d / f"metrics.{args.format}").read_text())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="safecritic", description="Safe exploration with conservative safety critics.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration over its seeds")
    run.add_argument("--config", help="JSON file with ExperimentConfig fields")
    run.add_argument("--algo", choices=ALGORITHMS)
    chi = run.add_mutually_exclusive_group()
    chi.add_argument("--chi", type=float)
    chi.add_argument("--chi-schedule", type=_parse_schedule, metavar="inv_sqrt:C0")
    run.add_argument("--alpha", type=float)
    run.add_argument("--seeds", type=_parse_seeds, help="comma-separated, e.g. 0,1,2,3")
    run.add_argument("--epochs", type=int)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    diag = sub.add_parser("diagnose", help="recompute bound diagnostics from checkpoints")
    diag.add_argument("--run", required=True)
    diag.add_argument("--seed", type=int)
    diag.set_defaults(func=cmd_diagnose)

    exp = sub.add_parser("export", help="print a run's metrics")
    exp.add_argument("--run", required=True)
    exp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    exp.add_argument("--seed", type=int)
    exp.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
