"""Numba kernels for the jerk-limited action space and collision geometry.

Everything in this module operates on plain float64 scalars/arrays so it can
be JIT-compiled. The public, documented surface lives in `limits` and
`geometry`; these kernels are shared by both and by the environments.
"""

import numpy as np
from numba import njit

INF = np.inf


# ---------------------------------------------------------------------------
# Braking profiles (ramp to peak deceleration, hold, ramp to zero)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _brake_v_end(v, a, a_pk, j_min, j_max):
    """Final velocity of a triangular (no hold) profile a -> a_pk -> 0."""
    j1 = j_max if a_pk >= a else j_min
    t1 = (a_pk - a) / j1
    dv1 = a * t1 + 0.5 * j1 * t1 * t1
    if a_pk < 0.0:
        t3 = -a_pk / j_max
    else:
        t3 = -a_pk / j_min
    dv3 = 0.5 * a_pk * t3
    return v + dv1 + dv3


@njit(cache=True)
def _brake_solve(v, a, a_min, a_max, j_min, j_max):
    """Choose the peak acceleration so that v crosses 0 exactly.

    Returns (a_pk, t1, th, t3). The profile ramps from `a` to `a_pk`,
    holds for `th`, then ramps to zero. `_brake_v_end` is monotone
    increasing in a_pk, so a plain bisection suffices.
    """
    ve_lo = _brake_v_end(v, a, a_min, j_min, j_max)
    ve_hi = _brake_v_end(v, a, a_max, j_min, j_max)
    if ve_lo > 0.0:
        a_pk = a_min
        th = ve_lo / (-a_min)
    elif ve_hi < 0.0:
        a_pk = a_max
        th = -ve_hi / a_max
    else:
        lo = a_min
        hi = a_max
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            if _brake_v_end(v, a, mid, j_min, j_max) < 0.0:
                lo = mid
            else:
                hi = mid
        a_pk = 0.5 * (lo + hi)
        th = 0.0
    j1 = j_max if a_pk >= a else j_min
    t1 = (a_pk - a) / j1
    if a_pk < 0.0:
        t3 = -a_pk / j_max
    else:
        t3 = -a_pk / j_min
    return a_pk, t1, th, t3


@njit(cache=True)
def _brake_state_at(p, v, a, a_pk, t1, th, t3, j_min, j_max, t):
    """Exact (p, v, a) of the braking profile at time t >= 0."""
    j1 = j_max if a_pk >= a else j_min
    j3 = j_max if a_pk < 0.0 else j_min
    if t < t1:
        return (p + v * t + 0.5 * a * t * t + j1 * t ** 3 / 6.0,
                v + a * t + 0.5 * j1 * t * t,
                a + j1 * t)
    p1 = p + v * t1 + 0.5 * a * t1 * t1 + j1 * t1 ** 3 / 6.0
    v1 = v + a * t1 + 0.5 * j1 * t1 * t1
    t -= t1
    if t < th:
        return (p1 + v1 * t + 0.5 * a_pk * t * t,
                v1 + a_pk * t,
                a_pk)
    p2 = p1 + v1 * th + 0.5 * a_pk * th * th
    v2 = v1 + a_pk * th
    t -= th
    if t < t3:
        return (p2 + v2 * t + 0.5 * a_pk * t * t + j3 * t ** 3 / 6.0,
                v2 + a_pk * t + 0.5 * j3 * t * t,
                a_pk + j3 * t)
    # at rest; residuals from the bisection are below 1e-12 and clamped
    p3 = p2 + v2 * t3 + 0.5 * a_pk * t3 * t3 + j3 * t3 ** 3 / 6.0
    return (p3, 0.0, 0.0)


@njit(cache=True)
def _phase_check(p0, v0, a0, j, dur, p_min, p_max, v_min, v_max):
    """Check v and p limits over one constant-jerk phase via its extrema."""
    if dur <= 0.0:
        return True
    # velocity extremum where a(t) = 0
    if j != 0.0:
        ts = -a0 / j
        if 0.0 < ts < dur:
            vs = v0 + a0 * ts + 0.5 * j * ts * ts
            if vs < v_min or vs > v_max:
                return False
    v_end = v0 + a0 * dur + 0.5 * j * dur * dur
    if v_end < v_min or v_end > v_max:
        return False
    # position extrema where v(t) = 0 (quadratic roots)
    for root in range(2):
        t_root = -1.0
        if j != 0.0:
            disc = a0 * a0 - 2.0 * j * v0
            if disc >= 0.0:
                sq = np.sqrt(disc)
                t_root = (-a0 + sq) / j if root == 0 else (-a0 - sq) / j
        elif a0 != 0.0 and root == 0:
            t_root = -v0 / a0
        if 0.0 < t_root < dur:
            ps = (p0 + v0 * t_root + 0.5 * a0 * t_root * t_root
                  + j * t_root ** 3 / 6.0)
            if ps < p_min or ps > p_max:
                return False
    p_end = p0 + v0 * dur + 0.5 * a0 * dur * dur + j * dur ** 3 / 6.0
    if p_end < p_min or p_end > p_max:
        return False
    return True


@njit(cache=True)
def _brake_ok(p, v, a, p_min, p_max, v_min, v_max, a_min, a_max,
              j_min, j_max):
    """True if the braking profile from (p, v, a) respects p and v limits."""
    a_pk, t1, th, t3 = _brake_solve(v, a, a_min, a_max, j_min, j_max)
    j1 = j_max if a_pk >= a else j_min
    j3 = j_max if a_pk < 0.0 else j_min
    if not _phase_check(p, v, a, j1, t1, p_min, p_max, v_min, v_max):
        return False
    p1, v1, _ = _brake_state_at(p, v, a, a_pk, t1, th, t3, j_min, j_max, t1)
    if not _phase_check(p1, v1, a_pk, 0.0, th, p_min, p_max, v_min, v_max):
        return False
    p2, v2, _ = _brake_state_at(p, v, a, a_pk, t1, th, t3, j_min, j_max,
                                t1 + th)
    if not _phase_check(p2, v2, a_pk, j3, t3, p_min, p_max, v_min, v_max):
        return False
    return True


# ---------------------------------------------------------------------------
# Feasible acceleration windows
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ramp_ok(p, v, a, a1, dt, p_min, p_max, v_min, v_max):
    """Continuum check of v and p limits over the linear ramp a -> a1.

    Conservative for any sub-step sampling of the same ramp.
    """
    j = (a1 - a) / dt
    return _phase_check(p, v, a, j, dt, p_min, p_max, v_min, v_max)


@njit(cache=True)
def _brake_next_accel(p, v, a, dt, a_min, a_max, j_min, j_max):
    """Acceleration command of the one-step discretized braking continuation.

    If the time-optimal profile outlasts the decision step, follow it
    (its acceleration at t = dt); otherwise command the two-step finish
    that zeroes velocity and acceleration exactly. The command is clamped
    into the jerk and acceleration boxes.
    """
    a_pk, t1, th, t3 = _brake_solve(v, a, a_min, a_max, j_min, j_max)
    if t1 + th + t3 > dt:
        _, _, a1 = _brake_state_at(p, v, a, a_pk, t1, th, t3,
                                   j_min, j_max, dt)
    else:
        a1 = (-2.0 * v / dt - a) / 2.0
    lo = max(a + j_min * dt, a_min)
    hi = min(a + j_max * dt, a_max)
    if a1 < lo:
        a1 = lo
    elif a1 > hi:
        a1 = hi
    return a1


@njit(cache=True)
def _brake_quick_accept(p, v, a, dt, p_min, p_max, v_min, v_max,
                        a_min, a_max, j_min, j_max):
    """Conservative bound showing braking cannot touch any limit.

    Bounds the velocity overshoot by a^2 / (2 j) plus one step of jerk and
    the position excursion by peak speed times a stopping-time bound. True
    implies the simulated continuation passes; false is inconclusive.
    """
    jm = min(-j_min, j_max)
    a_br = min(-a_min, a_max)
    ovs = a * a / (2.0 * jm) + abs(a) * dt
    if a > 0.0 and v + ovs > v_max:
        return False
    if a < 0.0 and v - ovs < v_min:
        return False
    peak = abs(v) + ovs
    t_stop = peak / a_br + 2.0 * (a_max - a_min) / jm + 2.0 * dt
    dp = 1.2 * peak * t_stop
    return p - dp >= p_min and p + dp <= p_max


@njit(cache=True)
def _discrete_brake_ok(p, v, a, dt, p_min, p_max, v_min, v_max,
                       a_min, a_max, j_min, j_max):
    """Simulate the discretized braking continuation and check every step.

    This is exactly the continuation the BRAKE backup executes, so a state
    accepted here stays feasible under the action space by construction.
    """
    if _brake_quick_accept(p, v, a, dt, p_min, p_max, v_min, v_max,
                           a_min, a_max, j_min, j_max):
        return True
    for _ in range(100):
        if abs(v) <= 1e-12 and abs(a) <= 1e-12:
            return p_min <= p <= p_max
        a1 = _brake_next_accel(p, v, a, dt, a_min, a_max, j_min, j_max)
        if not _ramp_ok(p, v, a, a1, dt, p_min, p_max, v_min, v_max):
            return False
        j = (a1 - a) / dt
        p = p + v * dt + 0.5 * a * dt * dt + j * dt ** 3 / 6.0
        v = v + a * dt + 0.5 * j * dt * dt
        a = a1
    return False


@njit(cache=True)
def _cand_ok(p, v, a, a1, dt, p_min, p_max, v_min, v_max,
             a_min, a_max, j_min, j_max):
    """Ramp limits hold and the post-ramp state admits a braking escape."""
    if not _ramp_ok(p, v, a, a1, dt, p_min, p_max, v_min, v_max):
        return False
    j = (a1 - a) / dt
    v1 = v + a * dt + 0.5 * j * dt * dt
    p1 = p + v * dt + 0.5 * a * dt * dt + j * dt ** 3 / 6.0
    return _discrete_brake_ok(p1, v1, a1, dt, p_min, p_max,
                              v_min, v_max, a_min, a_max, j_min, j_max)


@njit(cache=True)
def _window_joint(p, v, a, dt, p_min, p_max, v_min, v_max,
                  a_min, a_max, j_min, j_max):
    """Feasible acceleration window for one joint.

    Intersection of the jerk box, the acceleration box and the
    braking-feasibility set, the latter found by bisection around a
    feasible seed (the braking continuation of the current state).
    """
    lo0 = max(a + j_min * dt, a_min)
    hi0 = min(a + j_max * dt, a_max)
    if lo0 > hi0:
        return 0.0, 0.0, False
    # the discretized braking continuation is the feasibility witness
    seed = _brake_next_accel(p, v, a, dt, a_min, a_max, j_min, j_max)
    if not _cand_ok(p, v, a, seed, dt, p_min, p_max, v_min, v_max,
                    a_min, a_max, j_min, j_max):
        found = False
        for k in range(65):
            cand = lo0 + (hi0 - lo0) * k / 64.0
            if _cand_ok(p, v, a, cand, dt, p_min, p_max, v_min, v_max, a_min, a_max, j_min, j_max):
                seed = cand
                found = True
                break
        if not found:
            # knife-edge fallback: bisection accepts boundary candidates
            # whose braking continuation ends exactly on a position limit;
            # re-solving after the executed (ulp-perturbed) step can land
            # just past it. Accept the braking witness under a box
            # expansion that dwarfs the float drift yet stays an order of
            # magnitude below the 1e-9 compliance tolerance.
            tol = 1e-10
            seed = _brake_next_accel(p, v, a, dt, a_min, a_max,
                                     j_min, j_max)
            if _cand_ok(p, v, a, seed, dt, p_min - tol, p_max + tol,
                        v_min - tol, v_max + tol, a_min, a_max,
                        j_min, j_max):
                return seed, seed, True
            return 0.0, 0.0, False
    if _cand_ok(p, v, a, hi0, dt, p_min, p_max, v_min, v_max,
                a_min, a_max, j_min, j_max):
        hi = hi0
    else:
        t = seed
        f = hi0
        for _ in range(40):
            mid = 0.5 * (t + f)
            if _cand_ok(p, v, a, mid, dt, p_min, p_max, v_min, v_max, a_min, a_max, j_min, j_max):
                t = mid
            else:
                f = mid
        hi = t
    if _cand_ok(p, v, a, lo0, dt, p_min, p_max, v_min, v_max,
                a_min, a_max, j_min, j_max):
        lo = lo0
    else:
        t = seed
        f = lo0
        for _ in range(40):
            mid = 0.5 * (t + f)
            if _cand_ok(p, v, a, mid, dt, p_min, p_max, v_min, v_max, a_min, a_max, j_min, j_max):
                t = mid
            else:
                f = mid
        lo = t
    return lo, hi, True


@njit(cache=True)
def window_all(p, v, a, dt, p_min, p_max, v_min, v_max,
               a_min, a_max, j_min, j_max):
    """Feasible windows for all joints. Returns (lo, hi, ok)."""
    n = p.shape[0]
    lo = np.empty(n)
    hi = np.empty(n)
    ok = True
    for i in range(n):
        li, hi_i, ok_i = _window_joint(
            p[i], v[i], a[i], dt, p_min[i], p_max[i], v_min[i],
            v_max[i], a_min[i], a_max[i], j_min[i], j_max[i])
        lo[i] = li
        hi[i] = hi_i
        ok = ok and ok_i
    return lo, hi, ok


@njit(cache=True)
def ramp_all(p, v, a, a1, dt, n_sub):
    """Closed-form sub-step states of the linear acceleration ramp.

    Returns an array of shape (n_sub + 1, n_joints, 3) holding
    (position, velocity, acceleration); row 0 is the initiating state.
    """
    n = p.shape[0]
    out = np.empty((n_sub + 1, n, 3))
    for i in range(n):
        j = (a1[i] - a[i]) / dt
        for k in range(n_sub + 1):
            tau = dt * k / n_sub
            out[k, i, 0] = (p[i] + v[i] * tau + 0.5 * a[i] * tau * tau
                            + j * tau ** 3 / 6.0)
            out[k, i, 1] = v[i] + a[i] * tau + 0.5 * j * tau * tau
            out[k, i, 2] = a[i] + j * tau
    return out


@njit(cache=True)
def brake_params_all(p, v, a, a_min, a_max, j_min, j_max):
    """Braking profile parameters and durations for all joints."""
    n = p.shape[0]
    params = np.empty((n, 4))
    dur = np.empty(n)
    for i in range(n):
        a_pk, t1, th, t3 = _brake_solve(v[i], a[i], a_min[i], a_max[i],
                                        j_min[i], j_max[i])
        params[i, 0] = a_pk
        params[i, 1] = t1
        params[i, 2] = th
        params[i, 3] = t3
        dur[i] = t1 + th + t3
    return params, dur


@njit(cache=True)
def brake_next_accel_all(p, v, a, dt, a_min, a_max, j_min, j_max):
    """First discretized-braking acceleration command for every joint."""
    n = p.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _brake_next_accel(p[i], v[i], a[i], dt, a_min[i], a_max[i],
                                   j_min[i], j_max[i])
    return out


@njit(cache=True)
def brake_sample_all(p, v, a, params, j_min, j_max, n_samples, dt_sub):
    """Sample braking profiles on the sub-step grid; rest after stopping."""
    n = p.shape[0]
    out = np.empty((n_samples, n, 3))
    for i in range(n):
        a_pk = params[i, 0]
        t1 = params[i, 1]
        th = params[i, 2]
        t3 = params[i, 3]
        for k in range(n_samples):
            t = dt_sub * k
            pk, vk, ak = _brake_state_at(p[i], v[i], a[i], a_pk, t1, th, t3,
                                         j_min[i], j_max[i], t)
            out[k, i, 0] = pk
            out[k, i, 1] = vk
            out[k, i, 2] = ak
    return out


# ---------------------------------------------------------------------------
# Geometry: capsule/segment distances and forward kinematics
# ---------------------------------------------------------------------------

@njit(cache=True)
def seg_seg_closest(p1, q1, p2, q2):
    """Squared distance between segments [p1,q1] and [p2,q2] (3-vectors)."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    eps = 1e-14
    if a <= eps and e <= eps:
        return r @ r
    if a <= eps:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = d1 @ r
        if e <= eps:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            if denom > eps:
                s = min(max((b * f - c * e) / denom, 0.0), 1.0)
            else:
                s = 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
    cp1 = p1 + d1 * s
    cp2 = p2 + d2 * t
    diff = cp1 - cp2
    return diff @ diff


@njit(cache=True)
def _axis_rot(axis, q):
    """Rotation matrix about a unit axis by angle q (Rodrigues)."""
    c = np.cos(q)
    s = np.sin(q)
    x, y, z = axis[0], axis[1], axis[2]
    one_c = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * one_c
    R[0, 1] = x * y * one_c - z * s
    R[0, 2] = x * z * one_c + y * s
    R[1, 0] = y * x * one_c + z * s
    R[1, 1] = c + y * y * one_c
    R[1, 2] = y * z * one_c - x * s
    R[2, 0] = z * x * one_c - y * s
    R[2, 1] = z * y * one_c + x * s
    R[2, 2] = c + z * z * one_c
    return R


@njit(cache=True)
def fk_link_segments(q, axes, off_rot, off_trans, base_rot, base_trans,
                     cap_a, cap_b):
    """World-frame capsule segment endpoints for each link.

    axes: (J, 3) unit joint axes in the local joint frame.
    off_rot/off_trans: fixed offset pose of joint i relative to link i-1.
    cap_a/cap_b: (J, 3) capsule endpoints in each link frame.
    Returns (J, 2, 3).
    """
    n = q.shape[0]
    out = np.empty((n, 2, 3))
    R = base_rot.copy()
    t = base_trans.copy()
    for i in range(n):
        t = R @ off_trans[i] + t
        R = R @ off_rot[i]
        R = R @ _axis_rot(axes[i], q[i])
        out[i, 0] = R @ cap_a[i] + t
        out[i, 1] = R @ cap_b[i] + t
    return out


@njit(cache=True)
def fk_chain(q, axes, off_rot, off_trans, base_rot, base_trans):
    """World pose (rotation, translation) of every link frame."""
    n = q.shape[0]
    rots = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    R = base_rot.copy()
    t = base_trans.copy()
    for i in range(n):
        t = R @ off_trans[i] + t
        R = R @ off_rot[i]
        R = R @ _axis_rot(axes[i], q[i])
        rots[i] = R
        trans[i] = t
    return rots, trans


@njit(cache=True)
def min_distances(link_segs, link_radii, mov_segs, mov_radii,
                  stat_segs, stat_radii, self_pairs):
    """Minimum distances (moving, static, self) for one robot configuration.

    All obstacles are capsules; spheres are capsules with coincident
    endpoints. Empty sets yield +inf.
    """
    n_links = link_segs.shape[0]
    d_mo = INF
    for m in range(mov_segs.shape[0]):
        for i in range(n_links):
            d2 = seg_seg_closest(link_segs[i, 0], link_segs[i, 1],
                                 mov_segs[m, 0], mov_segs[m, 1])
            d = np.sqrt(d2) - link_radii[i] - mov_radii[m]
            if d < d_mo:
                d_mo = d
    d_st = INF
    for m in range(stat_segs.shape[0]):
        for i in range(n_links):
            d2 = seg_seg_closest(link_segs[i, 0], link_segs[i, 1],
                                 stat_segs[m, 0], stat_segs[m, 1])
            d = np.sqrt(d2) - link_radii[i] - stat_radii[m]
            if d < d_st:
                d_st = d
    d_sc = INF
    for m in range(self_pairs.shape[0]):
        i = self_pairs[m, 0]
        k = self_pairs[m, 1]
        d2 = seg_seg_closest(link_segs[i, 0], link_segs[i, 1],
                             link_segs[k, 0], link_segs[k, 1])
        d = np.sqrt(d2) - link_radii[i] - link_radii[k]
        if d < d_sc:
            d_sc = d
    return d_mo, d_st, d_sc


@njit(cache=True)
def scan_trajectory_distances(q_traj, axes, off_rot, off_trans, base_rot,
                              base_trans, cap_a, cap_b, link_radii,
                              mov_segs_traj, mov_radii, stat_segs,
                              stat_radii, self_pairs):
    """Distances along a trajectory of configurations, stopping at contact.

    q_traj: (K, J); mov_segs_traj: (K, M, 2, 3) moving-obstacle segments per
    sample. Returns (dists (K, 3), first_hit) where first_hit is the first
    index with any distance <= 0, or -1.
    """
    K = q_traj.shape[0]
    dists = np.full((K, 3), INF)
    for k in range(K):
        segs = fk_link_segments(q_traj[k], axes, off_rot, off_trans,
                                base_rot, base_trans, cap_a, cap_b)
        d_mo, d_st, d_sc = min_distances(segs, link_radii,
                                         mov_segs_traj[k], mov_radii,
                                         stat_segs, stat_radii, self_pairs)
        dists[k, 0] = d_mo
        dists[k, 1] = d_st
        dists[k, 2] = d_sc
        if d_mo <= 0.0 or d_st <= 0.0 or d_sc <= 0.0:
            return dists, k
    return dists, -1
