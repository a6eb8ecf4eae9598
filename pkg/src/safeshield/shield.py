"""The safety layer around the task policy.

Risk estimation for a candidate action — by background simulation of a
backup rollout (SIM) or by trained risk networks (modes A, B1, B2a, B2b) —
plus the threshold-based action adjustment, the braking-backup baseline
and post-hoc failure classification for collision episodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .envs import CONSTANT, FULL, Env, EnvSnapshot
from .errors import IncompleteTrace, MissingNetwork
from .limits import feasible_accel_window, inverse_map_action, map_action
from .nets import GaussianPolicy, forward, mean_action
from . import kernels

RISK_MODES = ("sim", "a", "b1", "b2a", "b2b", "none")
BACKUP_KINDS = ("policy", "brake")

#: failure classes
UNSAFE_START = "unsafe_start"
HORIZON_TOO_SHORT = "horizon_too_short"
STOCHASTIC_DIVERGENCE = "stochastic_divergence"
ESTIMATOR_ERROR = "estimator_error"


@dataclass
class ShieldConfig:
    """How the shield checks and adjusts candidate actions."""

    horizon: int = 20
    risk_mode: str = "sim"
    threshold: float = 0.0
    backup_kind: str = "policy"
    forecast: str | None = None   # derived from the mode when None

    def __post_init__(self):
        self.risk_mode = self.risk_mode.lower()
        self.backup_kind = self.backup_kind.lower()
        if self.risk_mode not in RISK_MODES:
            raise ValueError(f"unknown risk mode {self.risk_mode!r}")
        if self.backup_kind not in BACKUP_KINDS:
            raise ValueError(f"unknown backup kind {self.backup_kind!r}")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.forecast is None:
            self.forecast = FULL if self.risk_mode == "b2b" else CONSTANT
        elif self.risk_mode == "b2a" and self.forecast != CONSTANT:
            raise ValueError("mode b2a uses the constant forecast")
        elif self.risk_mode == "b2b" and self.forecast != FULL:
            raise ValueError("mode b2b uses the full forecast")


@dataclass
class RiskEstimate:
    """Collision risk c in [0, 1] for one candidate action."""

    c: float
    source: str
    collision_step: int | None = None


@dataclass
class ShieldDecision:
    m: np.ndarray
    adjusted: bool
    risk: RiskEstimate
    check_time: float
    aux: object = None


def braking_backup_action(env: Env, snap: EnvSnapshot) -> np.ndarray:
    """The m-vector whose mapped acceleration equals the next decision-step
    command of the discretized braking continuation (exact by construction:
    that command always lies inside the feasible window)."""
    lim = env.limits
    s = snap.state
    window = feasible_accel_window(s, lim, env.dt)
    a_br = kernels.brake_next_accel_all(s.p, s.v, s.a, env.dt, lim.a_min,
                                        lim.a_max, lim.j_min, lim.j_max)
    return inverse_map_action(a_br, window)


def backup_action(env: Env, snap: EnvSnapshot, backup) -> np.ndarray:
    """Deterministic backup action: policy mean or braking continuation."""
    if isinstance(backup, GaussianPolicy):
        return mean_action(backup, env.observe(snap))
    if backup == "brake":
        return braking_backup_action(env, snap)
    raise ValueError("backup must be a GaussianPolicy or 'brake'")


def simulate_backup_rollout(env: Env, snap: EnvSnapshot, candidate_m,
                            backup, horizon: int,
                            use_true_events: bool = False) -> RiskEstimate:
    """Background simulation: candidate action then `horizon` backup steps.

    Returns c=1.0 with the first colliding step index if any of the
    horizon+1 simulated steps collides, else c=0.0. The live snapshot is
    never mutated. In stochastic environments the simulated future draws a
    fresh event substream unless use_true_events (or the environment's
    deterministic mode) aligns it with reality.
    """
    bg = snap.copy() if use_true_events else env.background_copy(snap)
    out = env.step(bg, candidate_m)
    if out.collision:
        return RiskEstimate(1.0, "sim", 0)
    for k in range(horizon):
        out = env.step(bg, backup_action(env, bg, backup))
        if out.collision:
            return RiskEstimate(1.0, "sim", k + 1)
    return RiskEstimate(0.0, "sim")


def risk_net_input(env: Env, snap: EnvSnapshot, mode: str,
                   candidate_m=None, forecast: str | None = None
                   ) -> np.ndarray:
    """Network input vector for one of the learned risk modes.

    a:   (s_ki, s_mo, m) at time t.
    b1:  (s_ki, s_mo) at time t.
    b2a: (exact s_ki at t+1 under the candidate action, s_mo at t).
    b2b: (exact s_ki at t+1, forecast s_mo at t+1).
    """
    obs = env.observe(snap)
    n_ki = 3 * env.n_joints
    s_ki = obs[:n_ki]
    s_mo = obs[n_ki:n_ki + env.mo_size]
    if mode == "a":
        m = np.clip(np.asarray(candidate_m, dtype=np.float64), -1.0, 1.0)
        return np.concatenate([s_ki, s_mo, m])
    if mode == "b1":
        return np.concatenate([s_ki, s_mo])
    if mode in ("b2a", "b2b"):
        window = feasible_accel_window(snap.state, env.limits, env.dt)
        a1 = map_action(candidate_m, window)
        s = snap.state
        states = kernels.ramp_all(s.p, s.v, s.a, a1, env.dt, 1)
        nxt = states[-1]
        s_ki_next = np.concatenate([nxt[:, 0], nxt[:, 1], nxt[:, 2]]) \
            / env._ki_norm
        if mode == "b2a":
            return np.concatenate([s_ki_next, s_mo])
        return np.concatenate([
            s_ki_next,
            env.forecast_obstacles(snap, forecast or FULL)])
    raise ValueError(f"no network input for mode {mode!r}")


def risk_input_size(env: Env, mode: str) -> int:
    """Input dimension of the risk network for a mode on an environment."""
    base = 3 * env.n_joints + env.mo_size
    return base + env.n_joints if mode == "a" else base


def estimate_risk(env: Env, snap: EnvSnapshot, candidate_m,
                  config: ShieldConfig, risk_nets=None,
                  backup=None) -> RiskEstimate:
    """Risk of the candidate action under the configured mode."""
    mode = config.risk_mode
    if mode == "none":
        return RiskEstimate(0.0, "none")
    if mode == "sim":
        if backup is None:
            raise ValueError("sim mode needs a backup")
        return simulate_backup_rollout(env, snap, candidate_m, backup,
                                       config.horizon)
    risk_nets = risk_nets or {}
    net = risk_nets.get(mode)
    if net is None:
        raise MissingNetwork(f"risk mode {mode!r} needs a trained network")
    x = risk_net_input(env, snap, mode, candidate_m, config.forecast)
    if x.shape[0] != net.n_in:
        raise MissingNetwork(
            f"risk network for mode {mode!r} expects input size "
            f"{net.n_in}, got {x.shape[0]}")
    return RiskEstimate(float(forward(net, x)[0]), mode)


def shield_action(env: Env, snap: EnvSnapshot, task_m, backup,
                  config: ShieldConfig, risk_nets=None,
                  task_aux=None) -> ShieldDecision:
    """Pass the task action through, or swap in the backup action when the
    estimated risk exceeds the threshold (strict inequality). task_aux is
    returned untouched; the shield only ever replaces kinematic actions."""
    t0 = time.perf_counter()
    risk = estimate_risk(env, snap, task_m, config, risk_nets, backup)
    adjusted = risk.c > config.threshold
    check_time = time.perf_counter() - t0
    if adjusted:
        m = backup_action(env, snap, backup)
    else:
        m = np.asarray(task_m, dtype=np.float64)
    return ShieldDecision(m, adjusted, risk, check_time, task_aux)


@dataclass
class EpisodeTrace:
    """Everything needed to diagnose a collision episode after the fact."""

    initial: EnvSnapshot
    snapshots: list = field(default_factory=list)   # pre-step copies
    actions: list = field(default_factory=list)     # executed m-vectors
    collision: bool = False
    collision_class: str | None = None

    def record(self, snap: EnvSnapshot, m: np.ndarray) -> None:
        self.snapshots.append(snap.copy())
        self.actions.append(np.asarray(m, dtype=np.float64).copy())


def classify_failure(env: Env, trace: EpisodeTrace, config: ShieldConfig,
                     backup=None, n_max: int = 30) -> str:
    """Attribute a collision episode to one of the four failure modes.

    Replays diagnostics in order: a colliding backup rollout from the
    initial state means the start was never safe; a longer horizon flagging
    the fatal action means the horizon was too short; an event-free replay
    of the executed decisions staying collision-free means the environment
    diverged stochastically from the background simulation; otherwise the
    risk estimator was wrong.
    """
    if not trace.collision:
        raise IncompleteTrace("trace did not end in a collision")
    if trace.initial is None or not trace.snapshots or \
            len(trace.actions) != len(trace.snapshots):
        raise IncompleteTrace("trace must retain snapshots and actions")
    if backup is None:
        backup = "brake" if config.backup_kind == "brake" else None
    if backup is None:
        raise ValueError("classification needs the backup used at runtime")

    # 1. was the start ever safe? (backup-only rollout, true event tape)
    bg = trace.initial.copy()
    start_safe = True
    for _ in range(config.horizon + 1):
        if env.step(bg, backup_action(env, bg, backup)).collision:
            start_safe = False
            break
    if not start_safe:
        return UNSAFE_START

    # 2. would a longer horizon have rejected the fatal action? The fatal
    # action is the most recent one the N-horizon check accepts as safe —
    # later executed actions may be backup actions of an already-doomed
    # state and prove nothing about the horizon.
    for t in range(len(trace.actions) - 1, -1, -1):
        pre = trace.snapshots[t]
        m_t = trace.actions[t]
        c_n = simulate_backup_rollout(env, pre, m_t, backup, config.horizon,
                                      use_true_events=True)
        if c_n.c == 0.0:
            c_ext = simulate_backup_rollout(env, pre, m_t, backup, n_max,
                                            use_true_events=True)
            if c_ext.c == 1.0:
                return HORIZON_TOO_SHORT
            break

    # 3. does suppressing stochastic events make the same decisions safe?
    replay = trace.initial.copy()
    clean = True
    for m in trace.actions:
        if env.step(replay, m, allow_events=False).collision:
            clean = False
            break
    if clean:
        return STOCHASTIC_DIVERGENCE

    return ESTIMATOR_ERROR


def run_shielded_episode(env: Env, snap: EnvSnapshot, task_action_fn,
                         backup, config: ShieldConfig, risk_nets=None,
                         max_steps: int = 1000,
                         record_trace: bool = False):
    """Roll an episode under the shield.

    task_action_fn(observation, step_index) -> m-vector. Returns a dict of
    episode statistics and, when record_trace, the EpisodeTrace.
    """
    trace = EpisodeTrace(snap.copy()) if record_trace else None
    adjusted = 0
    check_time = 0.0
    outcome = None
    steps = 0
    for t in range(max_steps):
        obs = env.observe(snap)
        task_m = task_action_fn(obs, t)
        decision = shield_action(env, snap, task_m, backup, config,
                                 risk_nets)
        adjusted += int(decision.adjusted)
        check_time += decision.check_time
        if record_trace:
            trace.record(snap, decision.m)
        outcome = env.step(snap, decision.m)
        steps = t + 1
        if outcome.collision:
            break
    collision = bool(outcome and outcome.collision)
    if record_trace:
        trace.collision = collision
        trace.collision_class = outcome.collision_class if outcome else None
    stats = {
        "steps": steps,
        "collision": collision,
        "collision_class": outcome.collision_class if outcome else None,
        "adjusted": adjusted,
        "check_time": check_time,
    }
    return (stats, trace) if record_trace else (stats, None)
