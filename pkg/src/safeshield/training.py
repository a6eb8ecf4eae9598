"""On-policy policy training, reward functions and risk-network training.

Clipped-surrogate policy gradient with generalized advantage estimation for
the backup and task policies, the distance-based backup reward, the
difference-of-distances reaching reward, and supervised binary cross-entropy
training of the risk networks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .envs import Env
from .nets import (GaussianPolicy, MlpParams, OptimizerState, adam_step,
                   backprop, forward, forward_cached, gaussian_log_prob,
                   init_mlp, sample_action)
from .riskdata import RiskDataset, split_dataset
from .shield import ShieldConfig, backup_action, shield_action

RISK_HEADS = ("state_action", "state")


# ---------------------------------------------------------------------------
# rewards

@dataclass
class BackupRewardConfig:
    """Weights and thresholds of the backup distance reward."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    d_th_mo: float = 0.3
    d_th_st: float = 0.3
    d_th_sc: float = 0.3
    r_tb: float = 5.0
    episode_len: int = 20

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("reward weights must be >= 0")
        if min(self.d_th_mo, self.d_th_st, self.d_th_sc) <= 0:
            raise ValueError("distance thresholds must be positive")
        if self.episode_len < 1:
            raise ValueError("episode length must be >= 1")


def distance_reward(d: float, d_th: float) -> float:
    """Quadratic ramp (d/d_th)^2 capped at 1; zero at contact; +inf
    sentinel distances count as fully safe."""
    if d >= d_th:
        return 1.0
    if d <= 0.0:
        return 0.0
    r = d / d_th
    return r * r


def backup_reward(distances, terminal_no_collision: bool,
                  cfg: BackupRewardConfig) -> float:
    """Weighted distance rewards plus the clean-termination bonus."""
    d_mo, d_st, d_sc = distances
    r = (cfg.alpha * distance_reward(d_mo, cfg.d_th_mo)
         + cfg.beta * distance_reward(d_st, cfg.d_th_st)
         + cfg.gamma * distance_reward(d_sc, cfg.d_th_sc))
    if terminal_no_collision:
        r += cfg.r_tb
    return r


def reaching_reward(d_ta_t: float, d_ta_next: float) -> float:
    """Progress toward the target: previous distance minus current."""
    return d_ta_t - d_ta_next


# ---------------------------------------------------------------------------
# PPO machinery

@dataclass
class PpoConfig:
    rollout_steps: int = 2048
    epochs: int = 10
    minibatch: int = 256
    clip: float = 0.2
    discount: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    lr: float = 3e-4
    iterations: int = 40

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip ratio must be in (0, 1)")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("GAE lambda must be in [0, 1]")


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    logps: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray            # episode ended after this step
    advantages: np.ndarray = None
    returns: np.ndarray = None
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.obs.shape[0]


def compute_gae(buffer: RolloutBuffer, discount: float, lam: float) -> None:
    """Fill advantages (normalized) and returns. Episode boundaries never
    bootstrap across; the rollout is cut at a done step by construction."""
    n = len(buffer)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        if buffer.dones[t]:
            next_value = 0.0
            last = 0.0
        else:
            next_value = buffer.values[t + 1]
        delta = buffer.rewards[t] + discount * next_value - buffer.values[t]
        last = delta + discount * lam * last
        adv[t] = last
    buffer.returns = adv + buffer.values
    std = adv.std()
    buffer.advantages = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


def ppo_loss(policy: GaussianPolicy, value_net: MlpParams, obs, actions,
             logp_old, adv, ret, cfg: PpoConfig) -> float:
    """Scalar total loss on one minibatch (for gradient verification)."""
    mean = forward(policy.net, obs)
    logp = gaussian_log_prob(actions, mean, policy.log_std)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surrogate = -np.mean(np.minimum(ratio * adv, clipped * adv))
    v = forward(value_net, obs)[:, 0]
    value_loss = 0.5 * np.mean((v - ret) ** 2)
    k = policy.n_actions
    entropy = np.sum(policy.log_std) + 0.5 * k * (1 + np.log(2 * np.pi))
    return float(surrogate + cfg.value_coef * value_loss
                 - cfg.entropy_coef * entropy)


def ppo_loss_grads(policy: GaussianPolicy, value_net: MlpParams, obs,
                   actions, logp_old, adv, ret, cfg: PpoConfig):
    """Exact gradients of ppo_loss.

    Returns (loss, policy-net grads, log-std grad, value-net grads, stats).
    """
    n = obs.shape[0]
    mean, cache = forward_cached(policy.net, obs)
    std = np.exp(policy.log_std)
    z = (actions - mean) / std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(policy.log_std) \
        - 0.5 * policy.n_actions * np.log(2 * np.pi)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    surrogate = -np.mean(np.minimum(unclipped_term, clipped_term))
    # the gradient flows through ratio only where the unclipped branch is
    # the active minimum (or both branches coincide inside the clip box)
    active = unclipped_term <= clipped_term
    dl_dratio = np.where(active, -adv / n, 0.0)
    dl_dlogp = dl_dratio * ratio
    # logp partials: d/dmean = z/std ; d/dlog_std = z^2 - 1
    dmean = dl_dlogp[:, None] * (z / std)
    dlog_std = (dl_dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    dlog_std -= cfg.entropy_coef   # entropy bonus: d entropy/d log_std = 1
    pol_grads = backprop(policy.net, cache, dmean)[:-1]
    v, vcache = forward_cached(value_net, obs)
    v = v[:, 0]
    value_loss = 0.5 * np.mean((v - ret) ** 2)
    dv = (cfg.value_coef * (v - ret) / n)[:, None]
    val_grads = backprop(value_net, vcache, dv)[:-1]
    k = policy.n_actions
    entropy = np.sum(policy.log_std) + 0.5 * k * (1 + np.log(2 * np.pi))
    loss = float(surrogate + cfg.value_coef * value_loss
                 - cfg.entropy_coef * entropy)
    stats = {
        "surrogate": float(surrogate),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": float(np.mean(logp_old - logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return loss, pol_grads, dlog_std, val_grads, stats


def ppo_update(buffer: RolloutBuffer, policy: GaussianPolicy,
               value_net: MlpParams, cfg: PpoConfig,
               opt_policy: OptimizerState, opt_value: OptimizerState,
               rng) -> dict:
    """Epochs of minibatch updates on one rollout buffer."""
    compute_gae(buffer, cfg.discount, cfg.lam)
    n = len(buffer)
    last_stats = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            loss, pol_grads, dlog_std, val_grads, stats = ppo_loss_grads(
                policy, value_net, buffer.obs[idx], buffer.actions[idx],
                buffer.logps[idx], buffer.advantages[idx],
                buffer.returns[idx], cfg)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss during update: {stats}")
            adam_step(opt_policy, policy.net.flat() + [policy.log_std],
                      pol_grads + [dlog_std])
            policy.clamp_log_std()
            adam_step(opt_value, value_net.flat(), val_grads)
            last_stats = stats
    last_stats["mean_reward"] = float(buffer.rewards.mean())
    return last_stats


# ---------------------------------------------------------------------------
# rollout collection

def collect_backup_rollouts(env: Env, policy: GaussianPolicy,
                            value_net: MlpParams,
                            reward_cfg: BackupRewardConfig,
                            n_steps: int, rng) -> RolloutBuffer:
    """Short safety episodes: survive `episode_len` steps far from contact."""
    obs_size = env.obs_size
    n_act = env.n_joints
    obs = np.empty((n_steps, obs_size))
    actions = np.empty((n_steps, n_act))
    logps = np.empty(n_steps)
    rewards = np.empty(n_steps)
    values = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    episodes = 0
    clean = 0
    snap = None
    t_ep = 0
    for t in range(n_steps):
        if snap is None:
            snap = env.reset(rng)
            t_ep = 0
        o = env.observe(snap)
        m, logp = sample_action(policy, o, rng)
        out = env.step(snap, np.clip(m, -1.0, 1.0))
        t_ep += 1
        terminal_clean = (not out.collision
                          and t_ep >= reward_cfg.episode_len)
        r = backup_reward(out.distances, terminal_clean, reward_cfg)
        obs[t] = o
        actions[t] = m
        logps[t] = logp
        rewards[t] = r
        values[t] = forward(value_net, o)[0]
        if out.collision or terminal_clean:
            dones[t] = True
            episodes += 1
            clean += int(not out.collision)
            snap = None
    dones[-1] = True   # never bootstrap across the rollout edge
    buf = RolloutBuffer(obs, actions, logps, rewards, values, dones)
    buf.stats = {
        "episodes": episodes,
        "collision_free_fraction": clean / episodes if episodes else 0.0,
    }
    return buf


def ee_target_distance(env: Env, snap) -> float:
    return float(np.linalg.norm(env.robot.ee_position(snap.state.p)
                                - snap.target))


def collect_task_rollouts(env: Env, policy: GaussianPolicy,
                          value_net: MlpParams, n_steps: int, rng,
                          shield: tuple | None = None,
                          episode_len: int = 100,
                          arrive_threshold: float = 0.10,
                          adjust_penalty: float = 0.0,
                          collision_penalty: float = 0.0) -> RolloutBuffer:
    """Reaching-task episodes, optionally behind the shield.

    shield = (backup, ShieldConfig, risk_nets) or None. The shield is
    treated as part of the environment: the buffer always stores the
    policy's own sample with its own log-probability, even when the
    shield substitutes the backup action for execution. A vetoed proposal
    then simply earns the (lack of) progress the override produced, which
    is the credit assignment that teaches the policy to propose actions
    the shield will let through. The reward across a target-resample
    boundary uses the old target for both distance terms.

    adjust_penalty and collision_penalty subtract from the progress
    reward on vetoed steps and on the terminal collision step. At small
    step budgets the progress term alone rewards reckless diving — the
    lost future return from an early termination is too weak a deterrent
    for the policy to discover safe reaching; an explicit cost makes the
    tradeoff visible to the learner immediately.
    """
    obs_size = env.obs_size
    n_act = env.n_joints
    obs = np.empty((n_steps, obs_size))
    actions = np.empty((n_steps, n_act))
    logps = np.empty(n_steps)
    rewards = np.empty(n_steps)
    values = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    snap = None
    t_ep = 0
    d_prev = 0.0
    episodes = collisions = targets = adjusted = 0
    check_time = 0.0
    for t in range(n_steps):
        if snap is None:
            snap = env.reset(rng)
            t_ep = 0
            d_prev = ee_target_distance(env, snap)
        o = env.observe(snap)
        # store the raw sample with its own log-probability; the clip to
        # [-1, 1] is part of the environment, and a mismatched pair would
        # skew every importance ratio away from 1
        m_store, logp = sample_action(policy, o, rng)
        m = np.clip(m_store, -1.0, 1.0)
        if shield is not None:
            backup, sh_cfg, risk_nets = shield
            dec = shield_action(env, snap, m, backup, sh_cfg, risk_nets)
            adjusted += int(dec.adjusted)
            check_time += dec.check_time
            if dec.adjusted:
                m = dec.m
        out = env.step(snap, m)
        t_ep += 1
        d_now = ee_target_distance(env, snap)
        r = reaching_reward(d_prev, d_now)
        if shield is not None and dec.adjusted:
            r -= adjust_penalty
        if out.collision:
            r -= collision_penalty
        if d_now < arrive_threshold and not out.collision:
            targets += 1
            snap.target = env.sample_target(snap.event_rng)
            d_now = ee_target_distance(env, snap)
        d_prev = d_now
        obs[t] = o
        actions[t] = m_store
        logps[t] = logp
        rewards[t] = r
        values[t] = forward(value_net, o)[0]
        if out.collision or t_ep >= episode_len:
            dones[t] = True
            episodes += 1
            collisions += int(out.collision)
            snap = None
    dones[-1] = True
    buf = RolloutBuffer(obs, actions, logps, rewards, values, dones)
    buf.stats = {
        "episodes": episodes,
        "collisions": collisions,
        "targets": targets,
        "targets_per_s": targets / (n_steps * env.dt),
        "adjustment_rate": adjusted / n_steps,
        "check_time": check_time,
    }
    return buf


# ---------------------------------------------------------------------------
# training loops

def new_policy(env: Env, rng, hidden=(64, 64)) -> GaussianPolicy:
    net = init_mlp(env.obs_size, env.n_joints, "tanh", hidden, rng)
    return GaussianPolicy(net, np.full(env.n_joints, -0.5))


def new_value_net(env: Env, rng, hidden=(64, 64)) -> MlpParams:
    return init_mlp(env.obs_size, 1, "linear", hidden, rng, out_scale=1.0)


def train_backup(env: Env, ppo_cfg: PpoConfig,
                 reward_cfg: BackupRewardConfig, seed: int,
                 progress=None):
    """Train the backup policy to stay far from all three contact classes.

    Returns (policy, value_net, curve) where curve has one row per
    iteration with the collision-free episode fraction.
    """
    rng = np.random.default_rng(seed)
    policy = new_policy(env, rng)
    value_net = new_value_net(env, rng)
    opt_p = OptimizerState.for_params(policy.net.flat() + [policy.log_std],
                                      lr=ppo_cfg.lr)
    opt_v = OptimizerState.for_params(value_net.flat(), lr=ppo_cfg.lr)
    curve = []
    for it in range(ppo_cfg.iterations):
        t0 = time.perf_counter()
        buf = collect_backup_rollouts(env, policy, value_net, reward_cfg,
                                      ppo_cfg.rollout_steps, rng)
        stats = ppo_update(buf, policy, value_net, ppo_cfg, opt_p, opt_v,
                           rng)
        row = {
            "iteration": it,
            "steps": (it + 1) * ppo_cfg.rollout_steps,
            "mean_reward": stats["mean_reward"],
            "collision_free_fraction": buf.stats["collision_free_fraction"],
            "adjustment_rate": 0.0,
            "wall_clock": time.perf_counter() - t0,
        }
        curve.append(row)
        if progress:
            progress(row)
    return policy, value_net, curve


def evaluate_backup(env: Env, policy, episodes: int, episode_len: int,
                    seed: int, deterministic_policy: bool = True) -> float:
    """Fraction of episodes surviving `episode_len` steps without contact.

    policy=None evaluates the uniform random policy baseline.
    """
    rng = np.random.default_rng(seed)
    clean = 0
    for _ in range(episodes):
        snap = env.reset(rng)
        ok = True
        for _ in range(episode_len):
            if policy is None:
                m = rng.uniform(-1.0, 1.0, env.n_joints)
            elif deterministic_policy:
                m = backup_action(env, snap, policy)
            else:
                m, _ = sample_action(policy, env.observe(snap), rng)
                m = np.clip(m, -1.0, 1.0)
            if env.step(snap, m).collision:
                ok = False
                break
        clean += int(ok)
    return clean / episodes


# ---------------------------------------------------------------------------
# risk-network training

@dataclass
class RiskTrainConfig:
    epochs: int = 20
    minibatch: int = 256
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    train_fraction: float = 0.9


def risk_inputs(ds: RiskDataset, head: str) -> np.ndarray:
    """Network inputs from a dataset: kinematic+obstacle observation parts
    (the trailing 3 task-target entries are dropped) plus the action for the
    state-action head; the state head uses the successor state."""
    if head not in RISK_HEADS:
        raise ValueError(f"unknown risk head {head!r}")
    n_env = ds.obs_size - 3
    if head == "state_action":
        return np.hstack([ds.s[:, :n_env], ds.a])
    return ds.s_next[:, :n_env]


def binary_cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over ties
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == \
                sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    return float((ranks[labels == 1.0].sum()
                  - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def train_risk_net(ds: RiskDataset, head: str, cfg: RiskTrainConfig,
                   seed: int):
    """Fit a sigmoid-head MLP with binary cross-entropy.

    Returns (net, metrics) with holdout BCE, AUC and the entropy floor of
    a constant predictor at the base rate.
    """
    rng = np.random.default_rng(seed)
    train, hold = split_dataset(ds, cfg.train_fraction, rng)
    x_train = risk_inputs(train, head)
    y_train = train.c
    x_hold = risk_inputs(hold, head)
    net = init_mlp(x_train.shape[1], 1, "sigmoid", cfg.hidden, rng)
    opt = OptimizerState.for_params(net.flat(), lr=cfg.lr)
    n = x_train.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            p, cache = forward_cached(net, x_train[idx])
            p = p[:, 0]
            pc = np.clip(p, 1e-12, 1.0 - 1e-12)
            # d BCE/d p; the sigmoid backprop turns this into (p - y)/k
            up = ((pc - y_train[idx]) / (pc * (1.0 - pc)) / len(idx))[:, None]
            grads = backprop(net, cache, up)[:-1]
            adam_step(opt, net.flat(), grads)
    p_hold = forward(net, x_hold)[:, 0]
    base = ds.positive_fraction
    metrics = {
        "holdout_bce": binary_cross_entropy(p_hold, hold.c),
        "holdout_auc": auc_score(p_hold, hold.c),
        "base_rate": base,
        "entropy_floor": binary_cross_entropy(np.full(len(hold.c), base),
                                              hold.c),
    }
    return net, metrics


# ---------------------------------------------------------------------------
# task training

def measure_adjustment_rate(env: Env, policy, backup, sh_cfg: ShieldConfig,
                            risk_nets, probe_steps: int, seed: int) -> float:
    """Fraction of probe steps the shield adjusts for a given policy."""
    rng = np.random.default_rng(seed)
    adjusted = 0
    snap = None
    t_ep = 0
    for _ in range(probe_steps):
        if snap is None:
            snap = env.reset(rng)
            t_ep = 0
        m, _ = sample_action(policy, env.observe(snap), rng)
        m = np.clip(m, -1.0, 1.0)
        dec = shield_action(env, snap, m, backup, sh_cfg, risk_nets)
        adjusted += int(dec.adjusted)
        out = env.step(snap, dec.m)
        t_ep += 1
        if out.collision or t_ep >= 100:
            snap = None
    return adjusted / probe_steps


def calibrate_threshold(env: Env, policy, backup, sh_cfg: ShieldConfig,
                        risk_nets, target_rate: float,
                        probe_steps: int = 2000, seed: int = 0,
                        tol: float = 0.01, max_iters: int = 12) -> float:
    """Bisection over the risk threshold to hit a target initial
    adjustment rate within tol (adjustment rate falls as c_Th rises)."""
    lo, hi = 0.0, 1.0
    best = 0.5
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        cfg = ShieldConfig(sh_cfg.horizon, sh_cfg.risk_mode, mid,
                           sh_cfg.backup_kind)
        rate = measure_adjustment_rate(env, policy, backup, cfg, risk_nets,
                                       probe_steps, seed)
        best = mid
        if abs(rate - target_rate) <= tol:
            break
        if rate > target_rate:
            lo = mid   # too many adjustments: raise the threshold
        else:
            hi = mid
    return best


def train_task(env: Env, shield: tuple | None, ppo_cfg: PpoConfig,
               seed: int, episode_len: int = 100, progress=None,
               init: tuple | None = None, adjust_penalty: float = 0.0,
               collision_penalty: float = 0.0):
    """Train the reaching task policy, optionally behind the shield.

    shield = (backup, ShieldConfig, risk_nets) or None. init, if given,
    is a (policy, value_net) pair to fine-tune instead of starting from
    fresh networks — e.g. to adapt a policy trained behind a permissive
    shield to a stricter one. Returns (policy, value_net, curve).
    """
    rng = np.random.default_rng(seed)
    if init is not None:
        policy, value_net = init[0].copy(), init[1].copy()
    else:
        policy = new_policy(env, rng)
        value_net = new_value_net(env, rng)
    opt_p = OptimizerState.for_params(policy.net.flat() + [policy.log_std],
                                      lr=ppo_cfg.lr)
    opt_v = OptimizerState.for_params(value_net.flat(), lr=ppo_cfg.lr)
    curve = []
    for it in range(ppo_cfg.iterations):
        t0 = time.perf_counter()
        buf = collect_task_rollouts(env, policy, value_net,
                                    ppo_cfg.rollout_steps, rng,
                                    shield=shield,
                                    episode_len=episode_len,
                                    adjust_penalty=adjust_penalty,
                                    collision_penalty=collision_penalty)
        stats = ppo_update(buf, policy, value_net, ppo_cfg, opt_p, opt_v,
                           rng)
        row = {
            "iteration": it,
            "steps": (it + 1) * ppo_cfg.rollout_steps,
            "mean_reward": stats["mean_reward"],
            "collision_free_fraction":
                1.0 - (buf.stats["collisions"]
                       / max(buf.stats["episodes"], 1)),
            "targets_per_s": buf.stats["targets_per_s"],
            "adjustment_rate": buf.stats["adjustment_rate"],
            "wall_clock": time.perf_counter() - t0,
        }
        curve.append(row)
        if progress:
            progress(row)
    return policy, value_net, curve
