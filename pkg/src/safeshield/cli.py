"""Command-line entry point.

`safeshield <subcommand>` drives training, dataset generation, evaluation
and the sweeps; every command is fully seeded and writes its artifacts
under --out. Exit codes: 0 success, 1 usage error, 2 runtime failure. The
SAFESHIELD_SEED environment variable overrides --seed when set.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .envs import deterministic_mode, make_env
from .errors import SafeShieldError
from .experiments import (classify_collisions, evaluate, parse_config,
                          run_config, sweep_horizon, sweep_threshold,
                          write_curve_csv, write_metrics_csv)
from .nets import GaussianPolicy, load_weights, save_weights
from .riskdata import (export_csv, generate_risk_dataset, read_dataset,
                       write_dataset)
from .shield import RISK_MODES, ShieldConfig, run_shielded_episode
from .training import (BackupRewardConfig, PpoConfig, RiskTrainConfig,
                       train_backup, train_risk_net, train_task)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _add_common(sub, env_required=True):
    sub.add_argument("--seed", type=int, default=0,
                     help="base RNG seed (SAFESHIELD_SEED overrides)")
    sub.add_argument("--out", type=Path, default=Path("out"),
                     help="artifact output directory")
    sub.add_argument("--config", type=Path, default=None,
                     help="experiment config file (pipeline defaults)")
    if env_required:
        sub.add_argument("--env", choices=("space", "ball", "human"),
                         required=True)
        sub.add_argument("--deterministic", action="store_true",
                         help="share the event stream with background "
                              "simulations")


def _add_shield_flags(sub):
    sub.add_argument("--risk-mode", choices=RISK_MODES, default="sim")
    sub.add_argument("--horizon", type=int, default=20,
                     help="backup rollout horizon N")
    sub.add_argument("--threshold", type=float, default=0.0,
                     help="risk threshold c_Th")
    sub.add_argument("--backup", default="brake",
                     help="'brake' or path to backup policy weights")


def build_parser() -> _Parser:
    parser = _Parser(prog="safeshield",
                     description="safe-RL shield experiment toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-backup", help="train the evasion policy")
    _add_common(p)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--rollout-steps", type=int, default=2048)

    p = subs.add_parser("gen-risk-data", help="generate labeled risk tuples")
    _add_common(p)
    p.add_argument("--backup", default="brake",
                   help="'brake' or path to backup policy weights")
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--count", type=int, default=4000)
    p.add_argument("--csv", action="store_true",
                   help="also export a CSV copy")
    p.add_argument("--rollout-policy", type=Path, default=None,
                   help="policy weights whose rollouts supply record "
                        "start states and half the candidate actions")
    p.add_argument("--warmup-steps", type=int, default=40,
                   help="max policy steps before a record when "
                        "--rollout-policy is given")

    p = subs.add_parser("train-risk", help="fit a risk network")
    _add_common(p, env_required=False)
    p.add_argument("--data", type=Path, required=True,
                   help="risk dataset file")
    p.add_argument("--head", choices=("state_action", "state"),
                   default="state")
    p.add_argument("--name", default="risk",
                   help="output weight file stem")
    p.add_argument("--epochs", type=int, default=20)

    p = subs.add_parser("train-task", help="train the reaching policy")
    _add_common(p)
    _add_shield_flags(p)
    p.add_argument("--risk-net", type=Path, default=None,
                   help="weights for network risk modes")
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--rollout-steps", type=int, default=2048)
    p.add_argument("--no-shield", action="store_true",
                   help="train without action adjustment")
    p.add_argument("--adjust-penalty", type=float, default=0.0,
                   help="reward subtracted on each shield-adjusted step")
    p.add_argument("--collision-penalty", type=float, default=0.0,
                   help="reward subtracted on a terminal collision step")

    p = subs.add_parser("evaluate", help="evaluate a policy condition")
    _add_common(p)
    _add_shield_flags(p)
    p.add_argument("--risk-net", type=Path, default=None)
    p.add_argument("--policy", default=None,
                   help="task policy weights; omit for the random policy")
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--max-seconds", type=float, default=2000.0)

    p = subs.add_parser("sweep-horizon",
                        help="SIM-mode evaluation per horizon N")
    _add_common(p)
    p.add_argument("--backup", default="brake")
    p.add_argument("--ns", default="0,1,5,20",
                   help="comma-separated horizons")
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--max-seconds", type=float, default=2000.0)

    p = subs.add_parser("sweep-threshold",
                        help="adjustment-rate / survival tradeoff curve")
    _add_common(p)
    _add_shield_flags(p)
    p.add_argument("--risk-net", type=Path, default=None)
    p.add_argument("--thresholds", default="0.0,0.25,0.5,0.75,1.0",
                   help="comma-separated c_Th values")
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--max-seconds", type=float, default=2000.0)

    p = subs.add_parser("rollout", help="roll one shielded episode")
    _add_common(p)
    _add_shield_flags(p)
    p.add_argument("--risk-net", type=Path, default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--steps", type=int, default=200)

    p = subs.add_parser("classify-failures",
                        help="attribute shielded collisions to failure "
                             "classes")
    _add_common(p)
    _add_shield_flags(p)
    p.add_argument("--risk-net", type=Path, default=None)
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--steps", type=int, default=500)
    return parser


def _load_backup(spec):
    if spec == "brake":
        return "brake"
    obj = load_weights(spec)
    if not isinstance(obj, GaussianPolicy):
        raise SafeShieldError(
            f"{spec}: not a policy file (no log-std stored)")
    return obj


def _risk_nets(args):
    if args.risk_mode in ("sim", "none"):
        return None
    if args.risk_net is None:
        raise SafeShieldError(
            f"risk mode {args.risk_mode!r} needs --risk-net")
    return {args.risk_mode: load_weights(args.risk_net)}


def _shield_config(args) -> ShieldConfig:
    return ShieldConfig(horizon=args.horizon, risk_mode=args.risk_mode,
                        threshold=args.threshold,
                        backup_kind="brake" if args.backup == "brake"
                        else "policy")


def _make_env(args):
    env = make_env(args.env)
    deterministic_mode(env, getattr(args, "deterministic", False))
    return env


def _seed(args) -> int:
    env_seed = os.environ.get("SAFESHIELD_SEED")
    return int(env_seed) if env_seed else args.seed


def _parse_floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _run(args) -> int:
    seed = _seed(args)
    if args.config is not None and args.command != "run":
        # a config file supplied to a subcommand validates it up front so
        # path and key errors surface before any training time is spent
        parse_config(args.config)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "train-backup":
        env = _make_env(args)
        cfg = PpoConfig(iterations=args.iterations,
                        rollout_steps=args.rollout_steps,
                        epochs=8, entropy_coef=1e-3)
        policy, _, curve = train_backup(
            env, cfg, BackupRewardConfig(), seed,
            progress=lambda row: print(
                f"iter {row['iteration']:3d}  reward "
                f"{row['mean_reward']:.3f}  clean "
                f"{row['collision_free_fraction']:.2f}"))
        save_weights(policy, out / f"backup_{args.env}.ssnw")
        write_curve_csv(curve, out / f"backup_{args.env}_curve.csv")
        print(f"wrote {out / f'backup_{args.env}.ssnw'}")

    elif args.command == "gen-risk-data":
        env = _make_env(args)
        rollout_policy = (load_weights(args.rollout_policy)
                          if args.rollout_policy else None)
        ds = generate_risk_dataset(env, _load_backup(args.backup),
                                   args.horizon, args.count, seed,
                                   rollout_policy=rollout_policy,
                                   warmup_steps=args.warmup_steps)
        path = out / f"risk_{args.env}_n{args.horizon}.ssrd"
        write_dataset(ds, path)
        if args.csv:
            export_csv(ds, path.with_suffix(".csv"))
        print(f"wrote {path} ({ds.count} records, "
              f"{ds.positive_fraction:.1%} positive)")

    elif args.command == "train-risk":
        ds = read_dataset(args.data)
        cfg = RiskTrainConfig(epochs=args.epochs)
        net, metrics = train_risk_net(ds, args.head, cfg, seed)
        path = out / f"{args.name}.ssnw"
        save_weights(net, path)
        print(f"wrote {path}  holdout AUC {metrics['holdout_auc']:.3f}  "
              f"BCE {metrics['holdout_bce']:.3f}")

    elif args.command == "train-task":
        env = _make_env(args)
        shield = None
        if not args.no_shield:
            shield = (_load_backup(args.backup), _shield_config(args),
                      _risk_nets(args))
        cfg = PpoConfig(iterations=args.iterations,
                        rollout_steps=args.rollout_steps,
                        epochs=8, entropy_coef=1e-3)
        policy, _, curve = train_task(
            env, shield, cfg, seed,
            adjust_penalty=args.adjust_penalty,
            collision_penalty=args.collision_penalty,
            progress=lambda row: print(
                f"iter {row['iteration']:3d}  targets/s "
                f"{row['targets_per_s']:.3f}  clean "
                f"{row['collision_free_fraction']:.2f}"))
        save_weights(policy, out / f"task_{args.env}.ssnw")
        write_curve_csv(curve, out / f"task_{args.env}_curve.csv")
        print(f"wrote {out / f'task_{args.env}.ssnw'}")

    elif args.command == "evaluate":
        env = _make_env(args)
        policy = None if args.policy is None else _load_backup(args.policy)
        shield_cfg = None if args.risk_mode == "none" \
            else _shield_config(args)
        backup = None if args.risk_mode == "none" \
            else _load_backup(args.backup)
        row = evaluate(env, policy, shield_cfg, args.episodes,
                       args.max_seconds, seed, backup=backup,
                       risk_nets=_risk_nets(args))
        write_metrics_csv([row], out / "metrics.csv")
        print(f"mean ttc {row.mean_ttc:.1f} s  adjustment rate "
              f"{row.adjustment_rate:.2f}  capped "
              f"{row.capped_fraction:.2f}")

    elif args.command == "sweep-horizon":
        env = _make_env(args)
        ns = [int(x) for x in args.ns.split(",") if x.strip()]
        rows = sweep_horizon(env, _load_backup(args.backup), ns,
                             args.episodes, args.max_seconds, seed)
        write_metrics_csv(rows, out / "sweep_horizon.csv")
        for row in rows:
            print(f"N={row.n:3d}  ttc {row.mean_ttc:8.1f} s  "
                  f"compute {row.compute_ratio:.2f}")

    elif args.command == "sweep-threshold":
        env = _make_env(args)
        rows = sweep_threshold(env, args.risk_mode,
                               _load_backup(args.backup),
                               _risk_nets(args),
                               _parse_floats(args.thresholds),
                               args.episodes, args.max_seconds, seed,
                               horizon=args.horizon)
        write_metrics_csv(rows, out / "sweep_threshold.csv")
        for row in rows:
            print(f"c_th={row.c_th:.2f}  adj {row.adjustment_rate:.2f}  "
                  f"ttc {row.mean_ttc:8.1f} s")

    elif args.command == "rollout":
        env = _make_env(args)
        rng = np.random.default_rng([seed, 0])
        snap = env.reset(rng)
        policy = None if args.policy is None else _load_backup(args.policy)
        if policy is None:
            def act(obs, t):
                return rng.uniform(-1.0, 1.0, env.n_joints)
        else:
            from .nets import sample_action

            def act(obs, t):
                m, _ = sample_action(policy, obs, rng)
                return np.clip(m, -1.0, 1.0)
        stats, _ = run_shielded_episode(
            env, snap, act, _load_backup(args.backup),
            _shield_config(args), _risk_nets(args), max_steps=args.steps)
        print(f"steps {stats['steps']}  collision {stats['collision']}"
              f" ({stats['collision_class']})  adjusted "
              f"{stats['adjusted']}")

    elif args.command == "classify-failures":
        env = _make_env(args)
        counts = classify_collisions(env, _load_backup(args.backup),
                                     _shield_config(args), args.episodes,
                                     args.steps, seed,
                                     risk_nets=_risk_nets(args))
        for key, value in counts.items():
            print(f"{key}: {value}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except SafeShieldError as exc:
        print(f"safeshield: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (OSError, ValueError) as exc:
        print(f"safeshield: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
