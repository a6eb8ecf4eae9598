"""Jerk-limited per-joint action space.

Feasible acceleration windows, the scalar action mapping m in [-1, 1],
closed-form sub-step integration of linear acceleration ramps, and
time-optimal braking profiles that guarantee recursive feasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InfeasibleState

#: default decision-step duration (s) and sub-steps per decision step
DT = 0.1
N_SUB = 10


def _as_vec(x, n=None):
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64)).copy()
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected length {n}, got {arr.shape[0]}")
    return arr


@dataclass
class KinematicLimits:
    """Box limits on position, velocity, acceleration and jerk per joint."""

    p_min: np.ndarray
    p_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    j_min: np.ndarray
    j_max: np.ndarray

    def __post_init__(self):
        names = ("p_min", "p_max", "v_min", "v_max", "a_min", "a_max",
                 "j_min", "j_max")
        vecs = [_as_vec(getattr(self, n)) for n in names]
        n_joints = max(v.shape[0] for v in vecs)
        for name, v in zip(names, vecs):
            setattr(self, name, np.broadcast_to(v, (n_joints,)).copy()
                    if v.shape[0] == 1 else _as_vec(v, n_joints))
        if not (np.all(self.p_min < self.p_max)
                and np.all(self.v_min < self.v_max)
                and np.all(self.a_min < self.a_max)
                and np.all(self.j_min < self.j_max)):
            raise ValueError("each min limit must be below its max")
        if not (np.all(self.v_min <= 0.0) and np.all(self.v_max >= 0.0)
                and np.all(self.a_min <= 0.0) and np.all(self.a_max >= 0.0)):
            raise ValueError("0 must lie inside the velocity and "
                             "acceleration boxes")
        if not (np.all(self.j_min < 0.0) and np.all(self.j_max > 0.0)):
            raise ValueError("jerk box must contain 0 strictly")

    @property
    def n_joints(self) -> int:
        return self.p_min.shape[0]

    def contains(self, state: "JointState", tol: float = 1e-9) -> bool:
        return bool(
            np.all(state.p >= self.p_min - tol)
            and np.all(state.p <= self.p_max + tol)
            and np.all(state.v >= self.v_min - tol)
            and np.all(state.v <= self.v_max + tol)
            and np.all(state.a >= self.a_min - tol)
            and np.all(state.a <= self.a_max + tol))


@dataclass
class JointState:
    """Position, velocity and acceleration vectors over the joints."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.p = _as_vec(self.p)
        self.v = _as_vec(self.v, self.p.shape[0])
        self.a = _as_vec(self.a, self.p.shape[0])

    def copy(self) -> "JointState":
        return JointState(self.p.copy(), self.v.copy(), self.a.copy())


@dataclass
class AccelWindow:
    """Feasible acceleration range [a_lo, a_hi] per joint."""

    a_lo: np.ndarray
    a_hi: np.ndarray

    def __post_init__(self):
        self.a_lo = _as_vec(self.a_lo)
        self.a_hi = _as_vec(self.a_hi, self.a_lo.shape[0])
        if np.any(self.a_lo > self.a_hi):
            raise ValueError("empty acceleration window")


@dataclass
class SubstepTrajectory:
    """States on the uniform sub-step grid of one or more decision steps."""

    times: np.ndarray          # (K,), strictly increasing, starts at 0
    states: np.ndarray         # (K, n_joints, 3): p, v, a

    @property
    def final_state(self) -> JointState:
        s = self.states[-1]
        return JointState(s[:, 0].copy(), s[:, 1].copy(), s[:, 2].copy())


def feasible_accel_window(state: JointState, limits: KinematicLimits,
                          dt: float = DT, n_sub: int = N_SUB) -> AccelWindow:
    """Accelerations reachable in one step that keep a braking escape open.

    Intersects the jerk box, the acceleration box and the braking
    feasibility set (found by bisection). Raises InfeasibleState when the
    window is empty, which cannot happen for states produced by this module.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    lo, hi, ok = kernels.window_all(
        state.p, state.v, state.a, dt,
        limits.p_min, limits.p_max, limits.v_min, limits.v_max,
        limits.a_min, limits.a_max, limits.j_min, limits.j_max)
    if not ok:
        raise InfeasibleState("no feasible acceleration window")
    return AccelWindow(lo, hi)


def map_action(m, window: AccelWindow) -> np.ndarray:
    """Map scalars m in [-1, 1] linearly onto the window (clamped first)."""
    m = np.clip(_as_vec(m, window.a_lo.shape[0]), -1.0, 1.0)
    return window.a_lo + (m + 1.0) / 2.0 * (window.a_hi - window.a_lo)


def inverse_map_action(a1: np.ndarray, window: AccelWindow) -> np.ndarray:
    """The m vector that map_action sends to a1 (window assumed nonempty)."""
    span = window.a_hi - window.a_lo
    m = np.where(span > 0.0,
                 2.0 * (a1 - window.a_lo) / np.where(span > 0.0, span, 1.0)
                 - 1.0,
                 0.0)
    return np.clip(m, -1.0, 1.0)


def integrate_step(state: JointState, a_next, dt: float = DT,
                   n_sub: int = N_SUB) -> SubstepTrajectory:
    """Integrate the linear acceleration ramp from state.a to a_next.

    Velocity is quadratic and position cubic in time; sub-step states are
    closed-form, so the final state is exact at t = dt.
    """
    a_next = _as_vec(a_next, state.p.shape[0])
    states = kernels.ramp_all(state.p, state.v, state.a, a_next, dt, n_sub)
    times = dt * np.arange(n_sub + 1) / n_sub
    return SubstepTrajectory(times, states)


def braking_profile(state: JointState, limits: KinematicLimits,
                    dt: float = DT, n_sub: int = N_SUB
                    ) -> tuple[SubstepTrajectory, float]:
    """Time-optimal jerk-limited stop (ramp, hold, ramp) per joint.

    Returns the profile sampled on the sub-step grid plus its duration,
    rounded up to whole decision steps. Joints that stop early hold rest.
    Raises InfeasibleState if the profile violates position or velocity
    limits (possible only for externally supplied states).
    """
    for i in range(limits.n_joints):
        if not kernels._brake_ok(
                state.p[i], state.v[i], state.a[i],
                limits.p_min[i], limits.p_max[i], limits.v_min[i],
                limits.v_max[i], limits.a_min[i], limits.a_max[i],
                limits.j_min[i], limits.j_max[i]):
            raise InfeasibleState(f"braking profile for joint {i} violates "
                                  "position or velocity limits")
    params, dur = kernels.brake_params_all(
        state.p, state.v, state.a, limits.a_min, limits.a_max,
        limits.j_min, limits.j_max)
    n_steps = int(np.ceil(np.max(dur) / dt - 1e-12))
    if n_steps == 0:
        times = np.zeros(1)
        states = state_array(state)[None, :, :]
        return SubstepTrajectory(times, states), 0.0
    n_samples = n_steps * n_sub + 1
    states = kernels.brake_sample_all(state.p, state.v, state.a, params,
                                      limits.j_min, limits.j_max,
                                      n_samples, dt / n_sub)
    times = (dt / n_sub) * np.arange(n_samples)
    return SubstepTrajectory(times, states), n_steps * dt


def braking_next_accel(state: JointState, limits: KinematicLimits,
                       dt: float = DT) -> np.ndarray:
    """One-step acceleration command of the discretized braking continuation.

    Identical to the witness used inside feasible_accel_window, so the
    returned command always lies inside the window.
    """
    return kernels.brake_next_accel_all(
        state.p, state.v, state.a, dt, limits.a_min, limits.a_max,
        limits.j_min, limits.j_max)


def state_array(state: JointState) -> np.ndarray:
    """(n_joints, 3) array view of a JointState."""
    return np.stack([state.p, state.v, state.a], axis=1)


def check_limits(traj: SubstepTrajectory, limits: KinematicLimits,
                 tol: float = 1e-9) -> list[tuple[int, str, float, float]]:
    """All (joint, quantity, time, value) entries exceeding a bound by > tol.

    Jerk is checked as the finite difference of acceleration between
    consecutive sub-steps. An empty list means the trajectory is compliant.
    """
    out = []
    p = traj.states[:, :, 0]
    v = traj.states[:, :, 1]
    a = traj.states[:, :, 2]
    checks = [("position", p, limits.p_min, limits.p_max),
              ("velocity", v, limits.v_min, limits.v_max),
              ("acceleration", a, limits.a_min, limits.a_max)]
    for name, arr, lo, hi in checks:
        bad = (arr < lo[None, :] - tol) | (arr > hi[None, :] + tol)
        for k, i in zip(*np.nonzero(bad)):
            out.append((int(i), name, float(traj.times[k]),
                        float(arr[k, i])))
    if traj.times.shape[0] > 1:
        dts = np.diff(traj.times)
        jerk = np.diff(a, axis=0) / dts[:, None]
        bad = (jerk < limits.j_min[None, :] - tol) | \
              (jerk > limits.j_max[None, :] + tol)
        for k, i in zip(*np.nonzero(bad)):
            out.append((int(i), "jerk", float(traj.times[k + 1]),
                        float(jerk[k, i])))
    return out
