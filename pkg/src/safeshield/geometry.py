"""Serial-link forward kinematics and capsule/sphere distance queries.

Produces the three minimum distances (moving obstacles, static obstacles,
self-collision pairs) that drive rewards and collision detection. Negative
values report penetration depth; only the sign is load-bearing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


def _vec3(x):
    arr = np.asarray(x, dtype=np.float64).reshape(3).copy()
    return arr


@dataclass
class Pose:
    """Rigid transform: orthonormal rotation plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = _vec3(self.translation)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3),
                           atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be proper (det +1)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, point) -> np.ndarray:
        return self.rotation @ _vec3(point) + self.translation


@dataclass
class Capsule:
    """Segment swept by a sphere of the given radius."""

    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    radius: float

    def __post_init__(self):
        self.endpoint_a = _vec3(self.endpoint_a)
        self.endpoint_b = _vec3(self.endpoint_b)
        self.radius = float(self.radius)
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")

    def segment(self) -> np.ndarray:
        return np.stack([self.endpoint_a, self.endpoint_b])


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = _vec3(self.center)
        self.radius = float(self.radius)
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")

    def segment(self) -> np.ndarray:
        # a sphere is a capsule with coincident endpoints
        return np.stack([self.center, self.center])


@dataclass
class DistanceTriple:
    """Minimum distances to moving obstacles, static obstacles and between
    declared self-collision link pairs. +inf for empty shape-pair sets."""

    d_mo: float
    d_st: float
    d_sc: float

    @property
    def collision(self) -> bool:
        return self.d_mo <= 0.0 or self.d_st <= 0.0 or self.d_sc <= 0.0

    @property
    def collision_class(self) -> str | None:
        if not self.collision:
            return None
        vals = {"moving": self.d_mo, "static": self.d_st, "self": self.d_sc}
        return min(vals, key=vals.get)


def distance(shape_a, shape_b) -> float:
    """Minimum Euclidean distance between two capsules/spheres.

    Segment-segment closest point minus the radii sum; exact for
    sphere-sphere; symmetric; negative when the shapes overlap.
    """
    sa = shape_a.segment()
    sb = shape_b.segment()
    # canonical argument order makes the result exactly symmetric despite
    # the asymmetric roles of the two segments in the clamped algorithm
    if sb.tobytes() < sa.tobytes():
        sa, sb = sb, sa
    d2 = kernels.seg_seg_closest(sa[0], sa[1], sb[0], sb[1])
    return float(np.sqrt(d2) - (shape_a.radius + shape_b.radius))


class RobotModel:
    """A fixed-base serial-link robot with one capsule per link.

    Joint i applies its fixed offset pose then rotates about its axis.
    Immutable after construction; the packed arrays feed the numba kernels.
    """

    def __init__(self, axes, offsets, link_capsules, self_pairs,
                 base: Pose | None = None, ee_offset=None):
        axes = np.asarray(axes, dtype=np.float64)
        if axes.ndim != 2 or axes.shape[1] != 3 or axes.shape[0] < 2:
            raise ValueError("need at least 2 joints with 3-vector axes")
        norms = np.linalg.norm(axes, axis=1)
        self.axes = axes / norms[:, None]
        self.n_joints = axes.shape[0]
        if len(offsets) != self.n_joints or \
                len(link_capsules) != self.n_joints:
            raise ValueError("offsets and link capsules must match joints")
        self.offsets = list(offsets)
        self.off_rot = np.stack([o.rotation for o in offsets])
        self.off_trans = np.stack([o.translation for o in offsets])
        self.link_capsules = list(link_capsules)
        self.cap_a = np.stack([c.endpoint_a for c in link_capsules])
        self.cap_b = np.stack([c.endpoint_b for c in link_capsules])
        self.link_radii = np.array([c.radius for c in link_capsules])
        for i, k in self_pairs:
            if abs(i - k) < 2:
                raise ValueError("self-collision pairs must exclude "
                                 "adjacent links")
        self.self_pairs = np.asarray(self_pairs, dtype=np.int64).reshape(-1, 2)
        base = base or Pose.identity()
        self.base_rot = base.rotation
        self.base_trans = base.translation
        # end-effector point in the last link frame
        self.ee_offset = _vec3(ee_offset if ee_offset is not None
                               else link_capsules[-1].endpoint_b)

    def link_poses(self, q) -> list[Pose]:
        q = np.asarray(q, dtype=np.float64)
        rots, trans = kernels.fk_chain(q, self.axes, self.off_rot,
                                       self.off_trans, self.base_rot,
                                       self.base_trans)
        return [Pose(rots[i].copy(), trans[i].copy())
                for i in range(self.n_joints)]

    def link_segments(self, q) -> np.ndarray:
        """World-frame capsule segment endpoints, shape (n_links, 2, 3)."""
        q = np.asarray(q, dtype=np.float64)
        return kernels.fk_link_segments(q, self.axes, self.off_rot,
                                        self.off_trans, self.base_rot,
                                        self.base_trans, self.cap_a,
                                        self.cap_b)

    def ee_position(self, q) -> np.ndarray:
        poses = self.link_poses(q)
        return poses[-1].apply(self.ee_offset)


def forward_kinematics(model: RobotModel, q) -> list[Pose]:
    """World pose of every link frame for joint positions q."""
    return model.link_poses(q)


def pack_shapes(shapes) -> tuple[np.ndarray, np.ndarray]:
    """Pack capsules/spheres into (segments (M, 2, 3), radii (M,))."""
    if not shapes:
        return np.zeros((0, 2, 3)), np.zeros(0)
    segs = np.stack([s.segment() for s in shapes])
    radii = np.array([s.radius for s in shapes])
    return segs, radii


def default_arm(link_lengths=(0.30, 0.30, 0.25, 0.20),
                link_radii=(0.06, 0.05, 0.05, 0.04),
                base: Pose | None = None) -> RobotModel:
    """Default 4-joint spatial arm: base yaw about z, then three pitch
    joints about y. Each link is a capsule along its local z axis; the only
    non-adjacent pair that can geometrically touch is (1, 3)."""
    axes = np.array([[0.0, 0.0, 1.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 1.0, 0.0]])
    lengths = [float(v) for v in link_lengths]
    radii = [float(v) for v in link_radii]
    if len(lengths) != 4 or len(radii) != 4:
        raise ValueError("default arm needs 4 link lengths and radii")
    offsets = [Pose.identity()]
    for length in lengths[:-1]:
        offsets.append(Pose(np.eye(3), [0.0, 0.0, length]))
    caps = [Capsule([0.0, 0.0, 0.0], [0.0, 0.0, length], r)
            for length, r in zip(lengths, radii)]
    return RobotModel(axes, offsets, caps, [(1, 3)], base=base)


def world_distances(model: RobotModel, q, moving=(), static=()
                    ) -> DistanceTriple:
    """Minimum link distances to moving/static obstacles and self pairs."""
    mov_segs, mov_radii = pack_shapes(list(moving))
    stat_segs, stat_radii = pack_shapes(list(static))
    segs = model.link_segments(q)
    d_mo, d_st, d_sc = kernels.min_distances(
        segs, model.link_radii, mov_segs, mov_radii, stat_segs, stat_radii,
        model.self_pairs)
    return DistanceTriple(float(d_mo), float(d_st), float(d_sc))
