"""Experiment orchestration: metrics, sweeps, configs and the pipeline.

Computes the reported quantities — mean time until collision, action
adjustment rate, collision-class shares, targets per second and the
risk-check compute ratio — over seeded evaluation campaigns, runs horizon
and threshold sweeps, parses the sectioned key-value experiment config and
executes the staged train/generate/evaluate pipeline with checkpointing.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .envs import Env, deterministic_mode, make_env
from .errors import ConfigError
from .nets import load_weights, mean_action, sample_action, save_weights
from .riskdata import generate_risk_dataset, read_dataset, write_dataset
from .shield import (ShieldConfig, classify_failure, run_shielded_episode,
                     shield_action)
from .training import (BackupRewardConfig, PpoConfig, RiskTrainConfig,
                       ee_target_distance, train_backup, train_risk_net,
                       train_task)

#: CSV columns, in emission order. The wall-clock-derived columns are the
#: only ones allowed to differ between identically seeded runs.
METRIC_COLUMNS = (
    "env", "mode", "n", "c_th", "backup", "deterministic", "episodes",
    "seed", "mean_ttc", "capped_fraction", "adjustment_rate",
    "share_moving", "share_static", "share_self", "targets_per_s",
    "compute_ratio",
)
WALL_CLOCK_COLUMNS = ("compute_ratio",)


@dataclass
class MetricsRow:
    """One evaluated condition, one CSV row."""

    env: str
    mode: str
    n: int
    c_th: float
    backup: str
    deterministic: bool
    episodes: int
    seed: int
    mean_ttc: float          # seconds; capped episodes enter at the cap
    capped_fraction: float
    adjustment_rate: float
    share_moving: float      # of collision-terminated episodes
    share_static: float
    share_self: float
    targets_per_s: float
    compute_ratio: float     # mean risk-check wall clock / decision interval

    def __post_init__(self):
        for name in ("capped_fraction", "adjustment_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        share_sum = self.share_moving + self.share_static + self.share_self
        if share_sum and abs(share_sum - 1.0) > 1e-9:
            raise ValueError("collision shares must sum to 1")

    def as_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def write_metrics_csv(rows, path) -> None:
    """Header + fixed column order, LF endings, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS,
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            rec = row.as_record() if isinstance(row, MetricsRow) else row
            writer.writerow({k: _csv_value(rec[k]) for k in METRIC_COLUMNS})


def _csv_value(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return format(v, ".12g")
    return v


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# evaluation

def _task_action_fn(policy, rng, n_act, deterministic_policy=False):
    """Action source for evaluation: uniform random when policy is None,
    sampled (or mean) policy actions otherwise."""
    if policy is None:
        return lambda obs, t: rng.uniform(-1.0, 1.0, n_act)
    if deterministic_policy:
        return lambda obs, t: mean_action(policy, obs)

    def act(obs, t):
        m, _ = sample_action(policy, obs, rng)
        return np.clip(m, -1.0, 1.0)
    return act


def evaluate(env: Env, policy, shield_cfg: ShieldConfig | None,
             episodes: int, max_seconds: float, seed: int,
             backup=None, risk_nets=None,
             arrive_threshold: float = 0.10,
             deterministic_policy: bool = False) -> MetricsRow:
    """Run seeded episodes to collision or the time cap and aggregate.

    Episodes draw disjoint substreams derived from (seed, episode index),
    so the campaign is order-independent and trivially parallelizable;
    aggregation here is the single-writer reduce. shield_cfg=None (or mode
    "none") evaluates without adjustment. Capped episodes contribute the
    cap to the mean time-to-collision and are counted in capped_fraction.
    """
    max_steps = max(1, int(round(max_seconds / env.dt)))
    ttc = np.empty(episodes)
    capped = 0
    adjusted = steps_total = targets = 0
    check_time = 0.0
    shares = {"moving": 0, "static": 0, "self": 0}
    collisions = 0
    cfg = shield_cfg or ShieldConfig(horizon=0, risk_mode="none",
                                     threshold=1.0, backup_kind="brake")
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        snap = env.reset(rng)
        act = _task_action_fn(policy, rng, env.n_joints,
                              deterministic_policy)
        collision = False
        steps = 0
        for t in range(max_steps):
            obs = env.observe(snap)
            dec = shield_action(env, snap, act(obs, t), backup, cfg,
                                risk_nets)
            adjusted += int(dec.adjusted)
            check_time += dec.check_time
            out = env.step(snap, dec.m)
            steps = t + 1
            if not out.collision and \
                    ee_target_distance(env, snap) < arrive_threshold:
                targets += 1
                snap.target = env.sample_target(snap.event_rng)
            if out.collision:
                collision = True
                shares[out.collision_class] += 1
                collisions += 1
                break
        steps_total += steps
        ttc[e] = (steps if collision else max_steps) * env.dt
        capped += int(not collision)
    return MetricsRow(
        env=env.kind, mode=cfg.risk_mode, n=cfg.horizon, c_th=cfg.threshold,
        backup=_backup_label(backup, cfg), deterministic=env.deterministic,
        episodes=episodes, seed=seed,
        mean_ttc=float(ttc.mean()),
        capped_fraction=capped / episodes,
        adjustment_rate=adjusted / steps_total if steps_total else 0.0,
        share_moving=shares["moving"] / collisions if collisions else 0.0,
        share_static=shares["static"] / collisions if collisions else 0.0,
        share_self=shares["self"] / collisions if collisions else 0.0,
        targets_per_s=targets / (steps_total * env.dt),
        compute_ratio=(check_time / steps_total / env.dt)
        if steps_total else 0.0)


def _backup_label(backup, cfg: ShieldConfig) -> str:
    if cfg.risk_mode == "none":
        return "none"
    return "brake" if backup == "brake" else "policy"


def sweep_horizon(env: Env, backup, horizons, episodes: int,
                  max_seconds: float, seed: int,
                  policy=None) -> list[MetricsRow]:
    """One SIM-mode evaluation per background-rollout horizon N."""
    rows = []
    for n in horizons:
        cfg = ShieldConfig(horizon=int(n), risk_mode="sim", threshold=0.0,
                           backup_kind="brake" if backup == "brake"
                           else "policy")
        rows.append(evaluate(env, policy, cfg, episodes, max_seconds, seed,
                             backup=backup))
    return rows


def sweep_threshold(env: Env, risk_mode: str, backup, risk_nets,
                    thresholds, episodes: int, max_seconds: float,
                    seed: int, horizon: int = 20,
                    policy=None) -> list[MetricsRow]:
    """Adjustment-rate / time-to-collision tradeoff curve over c_Th."""
    rows = []
    for c_th in thresholds:
        cfg = ShieldConfig(horizon=horizon, risk_mode=risk_mode,
                           threshold=float(c_th),
                           backup_kind="brake" if backup == "brake"
                           else "policy")
        rows.append(evaluate(env, policy, cfg, episodes, max_seconds, seed,
                             backup=backup, risk_nets=risk_nets))
    return rows


def classify_collisions(env: Env, backup, shield_cfg: ShieldConfig,
                        episodes: int, max_steps: int, seed: int,
                        risk_nets=None, policy=None) -> dict:
    """Run shielded episodes with traces and attribute each collision to a
    failure class. Returns counts keyed by class plus 'episodes' and
    'collisions'."""
    counts: dict = {"episodes": episodes, "collisions": 0}
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        snap = env.reset(rng)
        act = _task_action_fn(policy, rng, env.n_joints)
        stats, trace = run_shielded_episode(
            env, snap, act, backup, shield_cfg, risk_nets,
            max_steps=max_steps, record_trace=True)
        if stats["collision"]:
            counts["collisions"] += 1
            label = classify_failure(env, trace, shield_cfg, backup)
            counts[label] = counts.get(label, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# configuration

#: section -> {key: (parser, default)}; None default means required.
_SCHEMA = {
    "environment": {
        "kind": (str, None),
        "deterministic": ("bool", False),
    },
    "shield": {
        "horizon": (int, 20),
        "risk_mode": (str, "sim"),
        "threshold": (float, 0.0),
        "backup": (str, "policy"),
    },
    "backup_training": {
        "iterations": (int, 40),
        "rollout_steps": (int, 2048),
        "epochs": (int, 8),
        "minibatch": (int, 256),
        "lr": (float, 3e-4),
        "entropy_coef": (float, 1e-3),
        "seed": (int, 1),
    },
    "task_training": {
        "iterations": (int, 40),
        "rollout_steps": (int, 2048),
        "epochs": (int, 8),
        "minibatch": (int, 256),
        "lr": (float, 3e-4),
        "entropy_coef": (float, 1e-3),
        "episode_len": (int, 100),
        "seed": (int, 2),
    },
    "risk": {
        "count": (int, 4000),
        "horizon": (int, 20),
        "epochs": (int, 20),
        "minibatch": (int, 256),
        "lr": (float, 1e-3),
        "train_fraction": (float, 0.9),
        "modes": ("list", ("a", "b1", "b2a", "b2b")),
        "seed": (int, 3),
    },
    "evaluation": {
        "episodes": (int, 30),
        "max_seconds": (float, 2000.0),
        "seed": (int, 4),
    },
    "output": {
        "dir": (str, "out"),
    },
}


@dataclass
class ExperimentConfig:
    """Validated view of one sectioned key-value config file."""

    environment: dict
    shield: dict
    backup_training: dict
    task_training: dict
    risk: dict
    evaluation: dict
    output: dict

    def section(self, name: str) -> dict:
        return getattr(self, name)


def _parse_value(raw: str, kind, path, line_no: int, key: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "list":
            return tuple(item.strip() for item in raw.split(",")
                         if item.strip())
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(
            f"{path}:{line_no}: bad value for {key!r}: {raw!r}") from exc


def parse_config(path) -> ExperimentConfig:
    """Sectioned key-value text: `[section]` headers, `key = value` lines,
    `#` comments, comma-separated arrays. Unknown sections or keys are
    errors with line diagnostics; omitted keys take schema defaults."""
    values = {name: dict() for name in _SCHEMA}
    section = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("[") and text.endswith("]"):
                section = text[1:-1].strip()
                if section not in _SCHEMA:
                    raise ConfigError(
                        f"{path}:{line_no}: unknown section [{section}]")
                continue
            if "=" not in text:
                raise ConfigError(
                    f"{path}:{line_no}: expected 'key = value'")
            if section is None:
                raise ConfigError(
                    f"{path}:{line_no}: key outside any section")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"{path}:{line_no}: unknown key {key!r} in "
                    f"[{section}]")
            kind, _ = _SCHEMA[section][key]
            values[section][key] = _parse_value(raw, kind, path, line_no,
                                                key)
    for name, keys in _SCHEMA.items():
        for key, (_, default) in keys.items():
            if key not in values[name]:
                if default is None:
                    raise ConfigError(
                        f"{path}: missing required key {key!r} in "
                        f"[{name}]")
                values[name][key] = default
    kind = values["environment"]["kind"]
    if kind not in ("space", "ball", "human"):
        raise ConfigError(f"{path}: unknown environment kind {kind!r}")
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# pipeline

def _ppo_config(section: dict) -> PpoConfig:
    return PpoConfig(rollout_steps=section["rollout_steps"],
                     epochs=section["epochs"],
                     minibatch=section["minibatch"],
                     lr=section["lr"],
                     entropy_coef=section["entropy_coef"],
                     iterations=section["iterations"])


def _stage_stamp(out_dir: Path, name: str) -> Path:
    return out_dir / f"{name}.stamp"


def _stage_checksum(*parts) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(repr(part).encode())
        digest.update(b"\x00")
    return digest.hexdigest()


def _stage_done(out_dir: Path, name: str, checksum: str,
                artifacts) -> bool:
    stamp = _stage_stamp(out_dir, name)
    return stamp.exists() and stamp.read_text() == checksum \
        and all(Path(a).exists() for a in artifacts)


def _mark_stage(out_dir: Path, name: str, checksum: str) -> None:
    _stage_stamp(out_dir, name).write_text(checksum)


def write_curve_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0]),
                                lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})


def run_config(path, progress=None) -> dict:
    """Execute the config's pipeline: backup training, risk-data
    generation, risk-network training, task training, then evaluation.

    Stages checkpoint into the output directory and are skipped on re-run
    when their stamp checksum (config section + code-visible inputs) and
    artifacts are intact. Returns the artifact paths.
    """
    cfg = parse_config(path)
    out_dir = Path(cfg.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.environment["kind"])
    deterministic_mode(env, cfg.environment["deterministic"])
    note = progress or (lambda msg: None)
    artifacts = {}

    # stage 1: backup policy
    backup_path = out_dir / "backup_policy.ssnw"
    csum = _stage_checksum("backup", cfg.environment, cfg.backup_training)
    if not _stage_done(out_dir, "backup", csum, [backup_path]):
        note("training backup policy")
        policy, _, curve = train_backup(env,
                                        _ppo_config(cfg.backup_training),
                                        BackupRewardConfig(),
                                        cfg.backup_training["seed"])
        save_weights(policy, backup_path)
        write_curve_csv(curve, out_dir / "backup_curve.csv")
        _mark_stage(out_dir, "backup", csum)
    backup = load_weights(backup_path)
    artifacts["backup_policy"] = backup_path

    # stage 2: risk dataset
    data_path = out_dir / "risk_data.ssrd"
    csum = _stage_checksum("riskdata", cfg.environment, cfg.risk,
                           cfg.backup_training)
    if not _stage_done(out_dir, "riskdata", csum, [data_path]):
        note("generating risk dataset")
        ds = generate_risk_dataset(env, backup, cfg.risk["horizon"],
                                   cfg.risk["count"], cfg.risk["seed"])
        write_dataset(ds, data_path)
        _mark_stage(out_dir, "riskdata", csum)
    artifacts["risk_data"] = data_path

    # stage 3: risk networks
    risk_cfg = RiskTrainConfig(epochs=cfg.risk["epochs"],
                               minibatch=cfg.risk["minibatch"],
                               lr=cfg.risk["lr"],
                               train_fraction=cfg.risk["train_fraction"])
    net_paths = {mode: out_dir / f"risk_{mode}.ssnw"
                 for mode in cfg.risk["modes"]}
    csum = _stage_checksum("risknets", cfg.environment, cfg.risk,
                           cfg.backup_training)
    if not _stage_done(out_dir, "risknets", csum, net_paths.values()):
        note("training risk networks")
        ds = read_dataset(data_path)
        for mode, net_path in net_paths.items():
            head = "state_action" if mode == "a" else "state"
            net, _ = train_risk_net(ds, head, risk_cfg,
                                    cfg.risk["seed"])
            save_weights(net, net_path)
        _mark_stage(out_dir, "risknets", csum)
    risk_nets = {mode: load_weights(p) for mode, p in net_paths.items()}
    artifacts["risk_nets"] = net_paths

    # stage 4: task policy behind the shield
    task_path = out_dir / "task_policy.ssnw"
    shield_cfg = ShieldConfig(horizon=cfg.shield["horizon"],
                              risk_mode=cfg.shield["risk_mode"],
                              threshold=cfg.shield["threshold"],
                              backup_kind=cfg.shield["backup"])
    csum = _stage_checksum("task", cfg.environment, cfg.shield,
                           cfg.task_training, cfg.backup_training)
    if not _stage_done(out_dir, "task", csum, [task_path]):
        note("training task policy")
        shield = (backup if cfg.shield["backup"] == "policy" else "brake",
                  shield_cfg, risk_nets)
        policy, _, curve = train_task(env, shield,
                                      _ppo_config(cfg.task_training),
                                      cfg.task_training["seed"],
                                      episode_len=cfg.task_training[
                                          "episode_len"])
        save_weights(policy, task_path)
        write_curve_csv(curve, out_dir / "task_curve.csv")
        _mark_stage(out_dir, "task", csum)
    task_policy = load_weights(task_path)
    artifacts["task_policy"] = task_path

    # stage 5: evaluation metrics
    metrics_path = out_dir / "metrics.csv"
    csum = _stage_checksum("evaluate", cfg.environment, cfg.shield,
                           cfg.evaluation, cfg.task_training,
                           cfg.backup_training)
    if not _stage_done(out_dir, "evaluate", csum, [metrics_path]):
        note("evaluating")
        backup_arg = backup if cfg.shield["backup"] == "policy" else "brake"
        rows = [
            evaluate(env, None, None, cfg.evaluation["episodes"],
                     cfg.evaluation["max_seconds"],
                     cfg.evaluation["seed"]),
            evaluate(env, task_policy, shield_cfg,
                     cfg.evaluation["episodes"],
                     cfg.evaluation["max_seconds"],
                     cfg.evaluation["seed"], backup=backup_arg,
                     risk_nets=risk_nets),
        ]
        write_metrics_csv(rows, metrics_path)
        _mark_stage(out_dir, "evaluate", csum)
    artifacts["metrics"] = metrics_path
    return artifacts
