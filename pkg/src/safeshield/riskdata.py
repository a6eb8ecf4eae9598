"""Labeled risk tuples (s_t, a_t, s_{t+1}, c_t) from backup rollouts.

Records are generated from freshly sampled initial states with a uniform
random candidate action followed by a backup rollout; the binary label says
whether any of the horizon+1 simulated steps collided. Storage is a
checksummed binary file with a CSV export for inspection.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .envs import Env
from .errors import DatasetError

_MAGIC = b"SSRD"
_VERSION = 1


@dataclass
class RiskDataset:
    """Fixed-width labeled records plus the generation header."""

    env_kind: str
    horizon: int
    obs_size: int
    act_size: int
    seed: int
    s: np.ndarray        # (count, obs_size)
    a: np.ndarray        # (count, act_size)
    s_next: np.ndarray   # (count, obs_size)
    c: np.ndarray        # (count,), values in {0.0, 1.0}

    def __post_init__(self):
        n = self.s.shape[0]
        if self.a.shape != (n, self.act_size) or \
                self.s.shape != (n, self.obs_size) or \
                self.s_next.shape != (n, self.obs_size) or \
                self.c.shape != (n,):
            raise DatasetError("record arrays are dimensionally inconsistent")
        if not np.all((self.c == 0.0) | (self.c == 1.0)):
            raise DatasetError("labels must be binary")

    @property
    def count(self) -> int:
        return self.s.shape[0]

    @property
    def positive_fraction(self) -> float:
        return float(self.c.mean()) if self.count else 0.0

    def subset(self, idx) -> "RiskDataset":
        return RiskDataset(self.env_kind, self.horizon, self.obs_size,
                           self.act_size, self.seed, self.s[idx].copy(),
                           self.a[idx].copy(), self.s_next[idx].copy(),
                           self.c[idx].copy())


def record_rng(seed: int, index: int) -> np.random.Generator:
    """The per-record stream: derived from (seed, index) so any record can
    be regenerated independently."""
    return np.random.default_rng([int(seed), int(index)])


def generate_record(env: Env, backup, horizon: int, seed: int, index: int,
                    rollout_policy=None, warmup_steps: int = 0
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """One labeled tuple from its own deterministic substream.

    With a rollout_policy, the start state is reached by rolling the
    environment forward a random number of policy steps (< warmup_steps)
    from the reset state, and the candidate action is drawn from the
    policy half the time instead of uniformly. This records the states
    and actions that policy actually visits, which is what a risk net
    shielding it needs to have seen.
    """
    from .shield import backup_action   # local import: avoid module cycle
    from .nets import sample_action     # local import: avoid module cycle

    rng = record_rng(seed, index)
    snap = env.reset(rng)
    if rollout_policy is not None and warmup_steps > 0:
        for _ in range(int(rng.integers(0, warmup_steps))):
            m, _ = sample_action(rollout_policy, env.observe(snap), rng)
            if env.step(snap, np.clip(m, -1.0, 1.0)).collision:
                snap = env.reset(rng)
    s_t = env.observe(snap)
    if rollout_policy is not None and rng.random() < 0.5:
        a_t, _ = sample_action(rollout_policy, s_t, rng)
        a_t = np.clip(a_t, -1.0, 1.0)
    else:
        a_t = rng.uniform(-1.0, 1.0, env.n_joints)
    out = env.step(snap, a_t)
    s_next = out.observation
    c = 1.0 if out.collision else 0.0
    if c == 0.0:
        for _ in range(horizon):
            if env.step(snap, backup_action(env, snap, backup)).collision:
                c = 1.0
                break
    return s_t, a_t, s_next, c


def generate_risk_dataset(env: Env, backup, horizon: int, count: int,
                          seed: int, rollout_policy=None,
                          warmup_steps: int = 0) -> RiskDataset:
    """`count` records: (warmed-up) start, candidate action, horizon
    backup steps, binary collision label. See generate_record for the
    on-policy variant selected by rollout_policy."""
    if horizon < 0 or count <= 0:
        raise ValueError("horizon must be >= 0 and count positive")
    obs_size = env.obs_size
    act_size = env.n_joints
    s = np.empty((count, obs_size))
    a = np.empty((count, act_size))
    s_next = np.empty((count, obs_size))
    c = np.empty(count)
    for i in range(count):
        s[i], a[i], s_next[i], c[i] = generate_record(
            env, backup, horizon, seed, i, rollout_policy, warmup_steps)
    return RiskDataset(env.kind, horizon, obs_size, act_size, seed,
                       s, a, s_next, c)


def write_dataset(ds: RiskDataset, path) -> None:
    kind = ds.env_kind.encode()
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<IB", _VERSION, len(kind))
    buf += kind
    buf += struct.pack("<IIIqQ", ds.horizon, ds.obs_size, ds.act_size,
                       ds.seed, ds.count)
    rows = np.hstack([ds.s, ds.a, ds.s_next, ds.c[:, None]])
    buf += np.ascontiguousarray(rows, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_dataset(path) -> RiskDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 13 or raw[:4] != _MAGIC:
        raise DatasetError(f"{path}: not a risk dataset file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DatasetError(f"{path}: checksum mismatch")
    try:
        version, kind_len = struct.unpack_from("<IB", body, 4)
        if version != _VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        off = 9
        kind = body[off:off + kind_len].decode()
        off += kind_len
        horizon, obs_size, act_size, seed, count = struct.unpack_from(
            "<IIIqQ", body, off)
        off += struct.calcsize("<IIIqQ")
        width = 2 * obs_size + act_size + 1
        rows = np.frombuffer(body, "<f8", count * width, off).reshape(
            count, width)
        off += 8 * count * width
        if off != len(body):
            raise DatasetError(f"{path}: record count does not match header")
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"{path}: truncated file") from exc
    return RiskDataset(kind, horizon, obs_size, act_size, seed,
                       rows[:, :obs_size].copy(),
                       rows[:, obs_size:obs_size + act_size].copy(),
                       rows[:, obs_size + act_size:-1].copy(),
                       rows[:, -1].copy())


def export_csv(ds: RiskDataset, path) -> None:
    """Human-readable escape hatch; not intended for round-trips."""
    header = ([f"s_{i}" for i in range(ds.obs_size)]
              + [f"a_{i}" for i in range(ds.act_size)]
              + [f"s_next_{i}" for i in range(ds.obs_size)]
              + ["c"])
    rows = np.hstack([ds.s, ds.a, ds.s_next, ds.c[:, None]])
    np.savetxt(path, rows, delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")


def split_dataset(ds: RiskDataset, train_fraction: float, rng
                  ) -> tuple[RiskDataset, RiskDataset]:
    """Disjoint label-stratified train/holdout partition."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must be in (0, 1)")
    pos = np.flatnonzero(ds.c == 1.0)
    neg = np.flatnonzero(ds.c == 0.0)
    if len(pos) == 0 or len(neg) == 0:
        raise DatasetError("dataset contains a single label class")
    train_idx, hold_idx = [], []
    for stratum in (neg, pos):
        perm = rng.permutation(stratum)
        k = int(round(train_fraction * len(perm)))
        k = min(max(k, 1), len(perm) - 1)
        train_idx.append(perm[:k])
        hold_idx.append(perm[k:])
    train = ds.subset(np.sort(np.concatenate(train_idx)))
    hold = ds.subset(np.sort(np.concatenate(hold_idx)))
    return train, hold
