"""Rigid-body kinematics and pinhole projection for serial robot arms.

3D points are float64 arrays of shape (3,), in meters. Rotations are 3x3
orthonormal matrices. A serial chain is an ordered list of revolute joints,
each rotating about a fixed axis in its parent frame and followed by a fixed
link offset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9


class AngleCountMismatch(ValueError):
    """Joint angle vector length does not match the chain."""


class BehindCamera(ValueError):
    """Point is at or behind the camera plane; projection undefined."""


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a right-handed rotation of `angle` radians about a unit axis."""
    ax = np.asarray(axis, dtype=float)
    n = float(np.linalg.norm(ax))
    if not math.isfinite(n) or n < 1e-12:
        raise ValueError(f"rotation axis must be nonzero, got {axis!r}")
    x, y, z = ax / n
    c, s = math.cos(angle), math.sin(angle)
    t = 1.0 - c
    return np.array([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(rotation_about_axis(axis, angle), np.asarray(translation, dtype=float))

    def apply(self, points) -> np.ndarray:
        """Map one (3,) point or an (N, 3) batch through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint: rotation axis in the parent frame, then a fixed offset.

    `radius` is the capsule radius (meters) used when rendering the link that
    follows this joint.
    """

    axis: np.ndarray
    offset: RigidTransform
    radius: float

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float).reshape(3)
        n = float(np.linalg.norm(ax))
        if abs(n - 1.0) > ORTHO_TOL:
            ax = ax / n
        object.__setattr__(self, "axis", ax)
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")


@dataclass(frozen=True)
class KinematicChain:
    """Ordered revolute joints of a serial arm."""

    joints: tuple[JointSpec, ...]
    name: str = "chain"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if not self.joints:
            raise ValueError("chain needs at least one joint")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def reach(self) -> float:
        """Sum of link offset lengths; a scale for camera placement."""
        return float(sum(np.linalg.norm(j.offset.translation) for j in self.joints))


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform  # camera-from-robot-base

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


def forward_kinematics(chain: KinematicChain, angles) -> np.ndarray:
    """Joint-frame origins in the base frame for a given configuration.

    Returns an (n_joints + 1, 3) array; row 0 is the base origin and row i
    the origin of joint i's frame after rotating about each axis and applying
    each fixed offset in order. The last row is the end-effector tip.
    """
    ang = np.asarray(angles, dtype=float).reshape(-1)
    if ang.shape[0] != chain.n_joints:
        raise AngleCountMismatch(
            f"chain has {chain.n_joints} joints, got {ang.shape[0]} angles")
    if not np.isfinite(ang).all():
        raise ValueError("joint angles must be finite")
    positions = np.zeros((chain.n_joints + 1, 3))
    current = RigidTransform.identity()
    for i, (joint, theta) in enumerate(zip(chain.joints, ang)):
        spin = RigidTransform(rotation_about_axis(joint.axis, float(theta)), np.zeros(3))
        current = compose(current, compose(spin, joint.offset))
        positions[i + 1] = current.translation
    return positions


def to_camera_frame(points, camera: PinholeCamera) -> np.ndarray:
    """Map base-frame points into the camera frame via the extrinsic."""
    return camera.extrinsic.apply(points)


def project(camera: PinholeCamera, point_cam) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    x, y, z = np.asarray(point_cam, dtype=float).reshape(3)
    if z <= 1e-6:
        raise BehindCamera(f"point depth {z} is not in front of the camera")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy


def unproject(camera: PinholeCamera, u: float, v: float, depth: float) -> np.ndarray:
    """Camera-frame point at pixel (u, v) and positive depth."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    return np.array([(u - camera.cx) * depth / camera.fx,
                     (v - camera.cy) * depth / camera.fy,
                     depth])


# ---------------------------------------------------------------------------
# Built-in chain families
# ---------------------------------------------------------------------------

def _joint(axis, translation, radius, rot_axis=None, rot_angle=0.0) -> JointSpec:
    if rot_axis is None:
        off = RigidTransform(np.eye(3), np.asarray(translation, dtype=float))
    else:
        off = RigidTransform.from_axis_angle(rot_axis, rot_angle, translation)
    return JointSpec(np.asarray(axis, dtype=float), off, radius)


def ur_like(scale: float = 1.0, name: str = "ur5like") -> KinematicChain:
    """Six-joint elbow arm; `scale` shrinks or grows lengths and radii together."""
    s = scale
    return KinematicChain((
        _joint((0, 0, 1), (0.0, 0.0, 0.155 * s), 0.127 * s),
        _joint((0, 1, 0), (0.40 * s, 0.0, 0.0), 0.116 * s),
        _joint((0, 1, 0), (0.34 * s, 0.0, 0.0), 0.096 * s),
        _joint((0, 1, 0), (0.0, 0.0, 0.115 * s), 0.081 * s),
        _joint((0, 0, 1), (0.0, 0.105 * s, 0.0), 0.074 * s),
        _joint((0, 1, 0), (0.095 * s, 0.0, 0.0), 0.065 * s),
    ), name=name)


def kuka_like(name: str = "kukalike") -> KinematicChain:
    """Seven-joint tubular arm with alternating twist and bend axes."""
    return KinematicChain((
        _joint((0, 0, 1), (0.0, 0.0, 0.175), 0.138),
        _joint((0, 1, 0), (0.0, 0.0, 0.215), 0.133),
        _joint((0, 0, 1), (0.0, 0.0, 0.235), 0.122),
        _joint((0, 1, 0), (0.0, 0.0, 0.215), 0.119),
        _joint((0, 0, 1), (0.0, 0.0, 0.205), 0.105),
        _joint((0, 1, 0), (0.0, 0.0, 0.135), 0.060),
        _joint((0, 0, 1), (0.0, 0.0, 0.095), 0.081),
    ), name=name)


_BUILTIN = {
    "ur3like": lambda: ur_like(0.5, "ur3like"),
    "ur5like": lambda: ur_like(1.0, "ur5like"),
    "ur10like": lambda: ur_like(1.5, "ur10like"),
    "kukalike": kuka_like,
}

CHAIN_NAMES = tuple(_BUILTIN)


def builtin_chain(name: str) -> KinematicChain:
    try:
        return _BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown chain {name!r}; choose from {CHAIN_NAMES}") from None


# ---------------------------------------------------------------------------
# Chain config files: one record per joint with axis, offset rotation as an
# axis-angle vector (axis scaled by angle), offset translation, and radius.
# ---------------------------------------------------------------------------

def _rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    cos_t = (np.trace(r) - 1.0) / 2.0
    theta = math.acos(min(1.0, max(-1.0, cos_t)))
    if theta < 1e-12:
        return np.zeros(3)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return w / (2.0 * math.sin(theta)) * theta


def save_chain(chain: KinematicChain, path) -> None:
    records = []
    for j in chain.joints:
        records.append({
            "axis": j.axis.tolist(),
            "offset_rotation": _rotation_to_axis_angle(j.offset.rotation).tolist(),
            "offset_translation": j.offset.translation.tolist(),
            "radius": j.radius,
        })
    Path(path).write_text(json.dumps({"name": chain.name, "joints": records}, indent=2) + "\n",
                          encoding="utf-8")


def load_chain(path) -> KinematicChain:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    joints = []
    for rec in doc["joints"]:
        rv = np.asarray(rec["offset_rotation"], dtype=float)
        angle = float(np.linalg.norm(rv))
        rot = np.eye(3) if angle < 1e-12 else rotation_about_axis(rv / angle, angle)
        joints.append(JointSpec(
            np.asarray(rec["axis"], dtype=float),
            RigidTransform(rot, np.asarray(rec["offset_translation"], dtype=float)),
            float(rec["radius"]),
        ))
    return KinematicChain(tuple(joints), name=doc.get("name", "chain"))
