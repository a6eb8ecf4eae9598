"""The three evaluation environments: Space, Ball and Human.

Deterministic decision-step dynamics over the jerk-limited action space,
sub-step obstacle motion and collision checking, bit-exact snapshots for
background simulation, observation assembly (s_ki, s_mo, s_ta) and
obstacle forecasting for the network risk modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import SamplingExhausted
from .geometry import Capsule, Pose, RobotModel, Sphere, default_arm, \
    pack_shapes
from .limits import DT, N_SUB, JointState, KinematicLimits, feasible_accel_window, \
    map_action

GRAVITY = 9.81
ENV_KINDS = ("space", "ball", "human")

#: obstacle forecast modes
CONSTANT = "constant"
FULL = "full"


def _copy_rng(rng) -> np.random.Generator:
    new = np.random.default_rng()
    new.bit_generator.state = rng.bit_generator.state
    return new


def _fork_rng(rng) -> np.random.Generator:
    """An event stream that is deterministic given the snapshot but draws
    different values than the original stream's future — models not knowing
    the environment's upcoming random events."""
    probe = _copy_rng(rng)
    return np.random.default_rng(int(probe.integers(2 ** 63)))


@dataclass
class SpaceState:
    """Orbit phases of the two orbiters (rad, wrapped to [0, 2pi))."""

    phases: np.ndarray

    def copy(self) -> "SpaceState":
        return SpaceState(self.phases.copy())


@dataclass
class BallState:
    """Ballistic ball position/velocity and a live flag (inside workspace)."""

    pos: np.ndarray
    vel: np.ndarray
    live: float

    def copy(self) -> "BallState":
        return BallState(self.pos.copy(), self.vel.copy(), self.live)


@dataclass
class HumanState:
    """Minimum-jerk joint-space motion of the human arm toward a hidden
    target configuration; clock counts seconds into the current segment."""

    q_start: np.ndarray
    q_target: np.ndarray
    duration: float
    clock: float

    def copy(self) -> "HumanState":
        return HumanState(self.q_start.copy(), self.q_target.copy(),
                          self.duration, self.clock)


@dataclass
class EnvSnapshot:
    """Everything needed to continue an episode bit-exactly."""

    state: JointState
    obstacle: object
    step_count: int
    event_rng: np.random.Generator
    target: np.ndarray

    def copy(self, fresh_events: bool = False) -> "EnvSnapshot":
        ev = _fork_rng(self.event_rng) if fresh_events \
            else _copy_rng(self.event_rng)
        return EnvSnapshot(self.state.copy(), self.obstacle.copy(),
                           self.step_count, ev, self.target.copy())


@dataclass
class StepOutcome:
    observation: np.ndarray
    d_mo: float
    d_st: float
    d_sc: float
    collision: bool
    collision_class: str | None
    terminal: bool
    steps: int

    @property
    def distances(self) -> tuple[float, float, float]:
        return (self.d_mo, self.d_st, self.d_sc)


def _min_jerk(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-jerk blend s(tau) and ds/dtau on [0, 1]."""
    tau = np.clip(tau, 0.0, 1.0)
    s = tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
    ds = 30.0 * tau * tau * (1.0 - tau) ** 2
    return s, ds


class Env:
    """Shared dynamics: robot stepping, collision scanning, observations.

    Subclasses supply obstacle initialization, per-sub-step obstacle
    advancement, obstacle collision shapes and the s_mo encoding.
    """

    kind = "base"

    def __init__(self,
                 link_lengths=(0.30, 0.30, 0.25, 0.20),
                 link_radii=(0.06, 0.05, 0.05, 0.04),
                 base_height=0.12,
                 p_limit=(3.1416, 2.3, 2.3, 2.3),
                 v_limit=2.0, a_limit=8.0, j_limit=80.0,
                 table_y=0.35, table_x=0.42, table_z=0.12,
                 table_radius=0.10,
                 floor_radius=50.0,
                 workspace_radius=1.2,
                 target_range=(0.35, 0.85),
                 target_z_min=0.18,
                 dt=DT, n_sub=N_SUB,
                 reset_attempts=10_000,
                 deterministic=False):
        self.dt = float(dt)
        self.n_sub = int(n_sub)
        self.deterministic = bool(deterministic)
        self.reset_attempts = int(reset_attempts)
        self.workspace_radius = float(workspace_radius)
        self.target_range = (float(target_range[0]), float(target_range[1]))
        self.target_z_min = float(target_z_min)
        self.base_height = float(base_height)
        self.robot = default_arm(link_lengths, link_radii,
                                 base=Pose(np.eye(3),
                                           [0.0, 0.0, base_height]))
        p_lim = np.asarray(p_limit, dtype=np.float64)
        self.limits = KinematicLimits(-p_lim, p_lim,
                                      -v_limit, v_limit,
                                      -a_limit, a_limit,
                                      -j_limit, j_limit)
        floor = Sphere([0.0, 0.0, -floor_radius], floor_radius)
        table = Capsule([table_x, -table_y, table_z],
                        [table_x, table_y, table_z], table_radius)
        self.static_shapes = [floor, table]
        self.stat_segs, self.stat_radii = pack_shapes(self.static_shapes)
        self._ki_norm = np.concatenate([
            np.maximum(np.abs(self.limits.p_min), np.abs(self.limits.p_max)),
            np.maximum(np.abs(self.limits.v_min), np.abs(self.limits.v_max)),
            np.maximum(np.abs(self.limits.a_min), np.abs(self.limits.a_max)),
        ])

    # ---- obstacle interface (subclasses) --------------------------------
    def init_obstacles(self, rng):
        raise NotImplementedError

    def obstacle_segments(self, obstacle) -> tuple[np.ndarray, np.ndarray]:
        """Collision capsule segments and radii of the moving obstacles."""
        raise NotImplementedError

    def advance_obstacles(self, obstacle, event_rng, n_steps: int,
                          allow_events: bool = True):
        """Advance the obstacle state by n_steps sub-steps of dt/n_sub.

        Returns (new_state, seg_traj (n_steps+1, M, 2, 3)) including the
        starting configuration at index 0. Stochastic events (respawns, new
        targets) draw from event_rng unless allow_events is false.
        """
        raise NotImplementedError

    def s_mo(self, obstacle) -> np.ndarray:
        raise NotImplementedError

    # ---- observations ----------------------------------------------------
    def observe(self, snap: EnvSnapshot) -> np.ndarray:
        s = snap.state
        s_ki = np.concatenate([s.p, s.v, s.a]) / self._ki_norm
        s_ta = snap.target / self.workspace_radius
        return np.concatenate([s_ki, self.s_mo(snap.obstacle), s_ta])

    @property
    def obs_size(self) -> int:
        return 3 * self.limits.n_joints + self.mo_size + 3

    @property
    def n_joints(self) -> int:
        return self.limits.n_joints

    def forecast_obstacles(self, snap: EnvSnapshot, mode: str) -> np.ndarray:
        """Predicted s_mo one decision step ahead.

        CONSTANT returns the current encoding; FULL advances the obstacles
        deterministically with stochastic events suppressed.
        """
        if mode == CONSTANT:
            return self.s_mo(snap.obstacle)
        if mode != FULL:
            raise ValueError(f"unknown forecast mode {mode!r}")
        ob, _ = self.advance_obstacles(snap.obstacle.copy(), None,
                                       self.n_sub, allow_events=False)
        return self.s_mo(ob)

    # ---- stepping --------------------------------------------------------
    def background_copy(self, snap: EnvSnapshot) -> EnvSnapshot:
        """Snapshot copy for background simulation: in stochastic mode the
        copy's future random events differ from the real environment's."""
        return snap.copy(fresh_events=not self.deterministic)

    def step(self, snap: EnvSnapshot, m,
             allow_events: bool = True) -> StepOutcome:
        """Advance one decision step with action scalars m in [-1, 1]."""
        window = feasible_accel_window(snap.state, self.limits, self.dt)
        return self.step_with_accel(snap, map_action(m, window),
                                    allow_events=allow_events)

    def step_with_accel(self, snap: EnvSnapshot, a_next,
                        allow_events: bool = True) -> StepOutcome:
        """Advance one decision step commanding accelerations a_next.

        Mutates snap in place. Distances are scanned at every sub-step; a
        collision freezes the state at the first penetrating sub-step and
        marks the outcome terminal.
        """
        a_next = np.asarray(a_next, dtype=np.float64)
        s = snap.state
        states = kernels.ramp_all(s.p, s.v, s.a, a_next, self.dt, self.n_sub)
        ob, seg_traj = self.advance_obstacles(snap.obstacle, snap.event_rng,
                                              self.n_sub,
                                              allow_events=allow_events)
        r = self.robot
        dists, first_hit = kernels.scan_trajectory_distances(
            states[:, :, 0], r.axes, r.off_rot, r.off_trans, r.base_rot,
            r.base_trans, r.cap_a, r.cap_b, r.link_radii,
            seg_traj, self._mov_radii, self.stat_segs, self.stat_radii,
            r.self_pairs)
        if first_hit >= 0:
            k = int(first_hit)
            d = dists[k]
        else:
            k = self.n_sub
            d = dists[1:].min(axis=0)
        snap.state = JointState(states[k, :, 0].copy(),
                                states[k, :, 1].copy(),
                                states[k, :, 2].copy())
        snap.obstacle = ob
        snap.step_count += 1
        collision = first_hit >= 0
        cls = None
        if collision:
            names = ("moving", "static", "self")
            cls = names[int(np.argmin(d))]
        return StepOutcome(self.observe(snap), float(d[0]), float(d[1]),
                           float(d[2]), collision, cls, collision,
                           snap.step_count)

    def distances(self, snap: EnvSnapshot) -> tuple[float, float, float]:
        """Current DistanceTriple of the snapshot (no stepping)."""
        segs, radii = self.obstacle_segments(snap.obstacle)
        r = self.robot
        link_segs = r.link_segments(snap.state.p)
        d = kernels.min_distances(link_segs, r.link_radii, segs, radii,
                                  self.stat_segs, self.stat_radii,
                                  r.self_pairs)
        return (float(d[0]), float(d[1]), float(d[2]))

    # ---- reset -----------------------------------------------------------
    def sample_target(self, rng) -> np.ndarray:
        """Uniform reachable task-space target above the table plane."""
        lo, hi = self.target_range
        base = np.array([0.0, 0.0, self.base_height])
        for _ in range(1000):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            p = base + u * rng.uniform(lo, hi)
            if p[2] >= self.target_z_min:
                return p
        raise SamplingExhausted("could not sample a task target")

    def reset(self, rng, safe_start_check=None) -> EnvSnapshot:
        """Sample a collision-free initial snapshot with a nonempty window.

        safe_start_check, if given, is a predicate on the candidate snapshot
        (e.g. a collision-free backup rollout requirement); candidates
        failing it are resampled.
        """
        lim = self.limits
        for _ in range(self.reset_attempts):
            obstacle = self.init_obstacles(rng)
            q = rng.uniform(lim.p_min, lim.p_max)
            segs, radii = self.obstacle_segments(obstacle)
            r = self.robot
            d = kernels.min_distances(r.link_segments(q), r.link_radii,
                                      segs, radii, self.stat_segs,
                                      self.stat_radii, r.self_pairs)
            if min(d) <= 0.0:
                continue
            ok_window = False
            for _ in range(50):
                v = rng.uniform(lim.v_min, lim.v_max)
                a = rng.uniform(lim.a_min, lim.a_max)
                _, _, ok = kernels.window_all(
                    q, v, a, self.dt, lim.p_min, lim.p_max, lim.v_min,
                    lim.v_max, lim.a_min, lim.a_max, lim.j_min, lim.j_max)
                if ok:
                    ok_window = True
                    break
            if not ok_window:
                continue
            snap = EnvSnapshot(JointState(q, v, a), obstacle, 0,
                               np.random.default_rng(int(
                                   rng.integers(2 ** 63))),
                               self.sample_target(rng))
            if safe_start_check is not None and not safe_start_check(snap):
                continue
            return snap
        raise SamplingExhausted(
            f"no valid initial state in {self.reset_attempts} attempts")


class SpaceEnv(Env):
    """Two spherical orbiters circling the robot at fixed radii/heights."""

    kind = "space"
    mo_size = 4

    def __init__(self, orbit_radii=(0.55, 0.72), orbit_heights=(0.45, 0.22),
                 orbit_omegas=(0.9, -1.4), orbiter_radii=(0.15, 0.12),
                 **kwargs):
        super().__init__(**kwargs)
        self.orbit_radii = np.asarray(orbit_radii, dtype=np.float64)
        self.orbit_heights = np.asarray(orbit_heights, dtype=np.float64)
        self.orbit_omegas = np.asarray(orbit_omegas, dtype=np.float64)
        self._mov_radii = np.asarray(orbiter_radii, dtype=np.float64)

    def init_obstacles(self, rng):
        return SpaceState(rng.uniform(0.0, 2 * np.pi, 2))

    def _segs_at(self, phases) -> np.ndarray:
        segs = np.empty((2, 2, 3))
        for i in range(2):
            c = np.array([self.orbit_radii[i] * np.cos(phases[i]),
                          self.orbit_radii[i] * np.sin(phases[i]),
                          self.orbit_heights[i]])
            segs[i, 0] = c
            segs[i, 1] = c
        return segs

    def obstacle_segments(self, obstacle):
        return self._segs_at(obstacle.phases), self._mov_radii

    def advance_obstacles(self, obstacle, event_rng, n_steps,
                          allow_events=True):
        dt_sub = self.dt / self.n_sub
        traj = np.empty((n_steps + 1, 2, 2, 3))
        phases = obstacle.phases
        for k in range(n_steps + 1):
            traj[k] = self._segs_at(phases + self.orbit_omegas * (k * dt_sub))
        new = SpaceState(np.mod(phases + self.orbit_omegas
                                * (n_steps * dt_sub), 2 * np.pi))
        return new, traj

    def s_mo(self, obstacle):
        ph = obstacle.phases
        return np.concatenate([np.sin(ph), np.cos(ph)])


class BallEnv(Env):
    """Balls thrown at the robot on ballistic arcs; a miss respawns one."""

    kind = "ball"
    mo_size = 7

    def __init__(self, ball_radius=0.08, spawn_radius=1.6,
                 flight_time=(0.6, 1.1), aim_center=(0.0, 0.0, 0.55),
                 aim_radius=0.8, **kwargs):
        super().__init__(**kwargs)
        self.ball_radius = float(ball_radius)
        self.spawn_radius = float(spawn_radius)
        self.flight_time = (float(flight_time[0]), float(flight_time[1]))
        self.aim_center = np.asarray(aim_center, dtype=np.float64)
        self.aim_radius = float(aim_radius)
        self._mov_radii = np.array([self.ball_radius])
        self.max_throw_speed = self.spawn_radius / self.flight_time[0] \
            + 0.5 * GRAVITY * self.flight_time[1]

    def _throw(self, rng) -> BallState:
        # spawn on the upper half of the spawn sphere, aim inside the
        # robot's reachable region, solve the ballistic initial velocity
        u = rng.normal(size=3)
        u[2] = abs(u[2])
        u /= np.linalg.norm(u)
        spawn = u * self.spawn_radius
        spawn[2] = max(spawn[2], 0.3)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        aim = self.aim_center + v * (self.aim_radius
                                     * rng.uniform(0.0, 1.0) ** (1 / 3))
        t = rng.uniform(*self.flight_time)
        g = np.array([0.0, 0.0, -GRAVITY])
        vel = (aim - spawn - 0.5 * g * t * t) / t
        return BallState(spawn, vel, 1.0)

    def _missed(self, pos) -> bool:
        return pos[2] < 0.0 or \
            float(np.linalg.norm(pos)) > 1.25 * self.spawn_radius

    def init_obstacles(self, rng):
        st = self._throw(rng)
        # start partway through the flight so resets vary in urgency
        t = rng.uniform(0.0, 0.3)
        st.pos = st.pos + st.vel * t + np.array([0, 0, -0.5 * GRAVITY * t * t])
        st.vel = st.vel + np.array([0.0, 0.0, -GRAVITY * t])
        return st

    def obstacle_segments(self, obstacle):
        segs = np.empty((1, 2, 3))
        segs[0, 0] = obstacle.pos
        segs[0, 1] = obstacle.pos
        return segs, self._mov_radii

    def advance_obstacles(self, obstacle, event_rng, n_steps,
                          allow_events=True):
        dt_sub = self.dt / self.n_sub
        g = np.array([0.0, 0.0, -GRAVITY])
        traj = np.empty((n_steps + 1, 1, 2, 3))
        pos = obstacle.pos.copy()
        vel = obstacle.vel.copy()
        traj[0, 0, 0] = pos
        traj[0, 0, 1] = pos
        for k in range(1, n_steps + 1):
            pos = pos + vel * dt_sub + 0.5 * g * dt_sub * dt_sub
            vel = vel + g * dt_sub
            if allow_events and self._missed(pos):
                st = self._throw(event_rng)
                pos, vel = st.pos.copy(), st.vel.copy()
            traj[k, 0, 0] = pos
            traj[k, 0, 1] = pos
        live = 1.0 if float(np.linalg.norm(pos)) <= self.workspace_radius \
            else 0.0
        return BallState(pos, vel, live), traj

    def s_mo(self, obstacle):
        return np.concatenate([
            obstacle.pos / self.spawn_radius,
            obstacle.vel / self.max_throw_speed,
            [obstacle.live]])


class HumanEnv(Env):
    """A 3-joint human arm whose hand tracks minimum-jerk segments toward
    hidden random target configurations."""

    kind = "human"
    mo_size = 6

    def __init__(self, human_base=(0.85, 0.0, 0.55),
                 human_link_lengths=(0.0, 0.30, 0.35),
                 human_link_radii=(0.07, 0.05, 0.05),
                 human_q_limit=1.2, segment_duration=(0.5, 1.5),
                 **kwargs):
        super().__init__(**kwargs)
        # shoulder frame: local z points from the human toward the robot
        rot = np.array([[0.0, 0.0, -1.0],
                        [0.0, 1.0, 0.0],
                        [1.0, 0.0, 0.0]])
        base = Pose(rot, human_base)
        axes = np.array([[0.0, 0.0, 1.0],
                         [0.0, 1.0, 0.0],
                         [0.0, 1.0, 0.0]])
        lengths = [float(v) for v in human_link_lengths]
        offsets = [Pose.identity()]
        for length in lengths[:-1]:
            offsets.append(Pose(np.eye(3), [0.0, 0.0, length]))
        caps = [Capsule([0, 0, 0], [0, 0, length], r)
                for length, r in zip(lengths, human_link_radii)]
        self.human = RobotModel(axes, offsets, caps, [], base=base)
        self.human_q_limit = float(human_q_limit)
        self.segment_duration = (float(segment_duration[0]),
                                 float(segment_duration[1]))
        self._mov_radii = self.human.link_radii
        self._human_v_norm = 2.0 * self.human_q_limit  # peak min-jerk rate

    def _new_segment(self, q_from, rng) -> HumanState:
        q_t = rng.uniform(-self.human_q_limit, self.human_q_limit, 3)
        dur = rng.uniform(*self.segment_duration)
        return HumanState(q_from.copy(), q_t, dur, 0.0)

    def human_qv(self, obstacle) -> tuple[np.ndarray, np.ndarray]:
        tau = obstacle.clock / obstacle.duration
        s, ds = _min_jerk(np.asarray(tau))
        dq = obstacle.q_target - obstacle.q_start
        q = obstacle.q_start + float(s) * dq
        v = dq * float(ds) / obstacle.duration
        return q, v

    def init_obstacles(self, rng):
        q0 = rng.uniform(-self.human_q_limit, self.human_q_limit, 3)
        st = self._new_segment(q0, rng)
        st.clock = rng.uniform(0.0, st.duration)
        return st

    def obstacle_segments(self, obstacle):
        q, _ = self.human_qv(obstacle)
        return self.human.link_segments(q), self._mov_radii

    def advance_obstacles(self, obstacle, event_rng, n_steps,
                          allow_events=True):
        dt_sub = self.dt / self.n_sub
        st = obstacle.copy()
        traj = np.empty((n_steps + 1, 3, 2, 3))
        q, _ = self.human_qv(st)
        traj[0] = self.human.link_segments(q)
        for k in range(1, n_steps + 1):
            st.clock += dt_sub
            if st.clock >= st.duration:
                if allow_events:
                    st = self._new_segment(st.q_target, event_rng)
                else:
                    st.clock = st.duration  # hold at the target
            q, _ = self.human_qv(st)
            traj[k] = self.human.link_segments(q)
        return st, traj

    def s_mo(self, obstacle):
        q, v = self.human_qv(obstacle)
        return np.concatenate([q / self.human_q_limit,
                               v / self._human_v_norm])


_ENV_CLASSES = {"space": SpaceEnv, "ball": BallEnv, "human": HumanEnv}


def make_env(kind: str, **params) -> Env:
    """Construct one of the named environments with keyword overrides."""
    try:
        cls = _ENV_CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown environment {kind!r}; "
                         f"choose from {sorted(_ENV_CLASSES)}") from None
    return cls(**params)


def deterministic_mode(env: Env, flag: bool) -> Env:
    """Toggle deterministic mode: background copies then share the event
    stream, so simulated futures match reality exactly."""
    env.deterministic = bool(flag)
    return env
