"""Rigid-body and pinhole-camera primitives shared by every pipeline stage.

Conventions
-----------
- Quaternions are unit length and scalar-first: (w, x, y, z).
- A RigidTransform maps points from its own frame into the parent frame.
  Camera extrinsics are stored camera-to-world; projection applies the
  inverse internally.
- Pixels are (u, v) with u to the right, v down, origin at the top-left
  corner of the image. Intrinsics are fx, fy, cx, cy without distortion;
  inputs are assumed rectified.
- Lengths are metres, angles in the API are degrees unless a name says
  otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegeneratePairError

# Rays closer to parallel than this (radians) cannot be intersected.
PARALLEL_RAY_TOL = 1e-8
# Camera centres closer than this (metres) give no usable baseline.
MIN_BASELINE = 1e-9
_QUAT_MIN_NORM = 1e-8


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Raises on a near-zero quaternion."""
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n < _QUAT_MIN_NORM:
        raise ValueError(f"quaternion norm {n:g} too small to normalize")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the w >= 0 representative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return normalize_quat(q)


def quat_rotate(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Rotate one point (3,) or a batch (N, 3) by the unit quaternion q."""
    pts = np.asarray(pts, dtype=float)
    w = q[0]
    v = q[1:]
    t = 2.0 * np.cross(v, pts)
    return pts + w * t + np.cross(v, t)


def quat_from_axis_angle(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle, radians)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        # First-order series keeps the map smooth through zero.
        q = np.array([1.0, 0.5 * rotvec[0], 0.5 * rotvec[1], 0.5 * rotvec[2]])
        return normalize_quat(q)
    axis = rotvec / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion; magnitude in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:].copy()
    angle = 2.0 * math.atan2(s, float(q[0]))
    return q[1:] / s * angle


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical-linear interpolation along the shorter arc."""
    a = normalize_quat(a)
    b = normalize_quat(b)
    dot = float(np.dot(a, b))
    if dot < 0:
        b = -b
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-10:
        return normalize_quat(a + t * (b - a))
    theta = math.acos(dot)
    sin_theta = math.sin(theta)
    wa = math.sin((1.0 - t) * theta) / sin_theta
    wb = math.sin(t * theta) / sin_theta
    return normalize_quat(wa * a + wb * b)


def hemisphere_align(q: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Flip q if needed so dot(q, reference) >= 0 (same double-cover sheet)."""
    if float(np.dot(q, reference)) < 0:
        return -np.asarray(q, dtype=float)
    return np.asarray(q, dtype=float)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    K = skew(rotvec)
    if theta < 1e-8:
        # second-order series, exact enough at this magnitude
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / theta
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def so3_right_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """J_r with exp(w + d) approx exp(w) exp(J_r(w) d) for small d."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    K = skew(rotvec)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (np.eye(3)
            - (1.0 - math.cos(theta)) / t2 * K
            + (theta - math.sin(theta)) / (t2 * theta) * (K @ K))


def quat_from_axis_angle_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """d quat_from_axis_angle(w) / dw, a 4x3 matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    J = np.zeros((4, 3))
    if theta < 1e-8:
        # q = (1 - theta^2/8, w/2) to second order
        J[0, :] = -0.25 * rotvec
        J[1:, :] = 0.5 * np.eye(3)
        return J
    half = 0.5 * theta
    s, c = math.sin(half), math.cos(half)
    unit = rotvec / theta
    k = s / theta                       # vector part is k(theta) * w
    k_prime = (0.5 * c - k) / theta
    J[0, :] = -0.5 * s * unit
    J[1:, :] = k * np.eye(3) + np.outer(rotvec, k_prime * unit)
    return J


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as unit quaternion (w, x, y, z) + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = normalize_quat(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        q.setflags(write=False)
        t.setflags(write=False)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rotvec(rotvec: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        return RigidTransform(quat_from_axis_angle(rotvec), translation)

    @staticmethod
    def from_matrix(T: np.ndarray) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return RigidTransform(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.rotation)
        T[:3, 3] = self.translation
        return T

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply `other` first, then `self`."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.translation + quat_rotate(self.rotation, other.translation)
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        q_inv = quat_conjugate(self.rotation)
        return RigidTransform(q_inv, -quat_rotate(q_inv, self.translation))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, pts) + self.translation


def pose_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(geodesic rotation angle in degrees, translation distance in metres).

    Hemisphere-safe: q and -q describe the same rotation and report 0.
    """
    dot = abs(float(np.dot(a.rotation, b.rotation)))
    dot = min(dot, 1.0)
    angle_deg = math.degrees(2.0 * math.acos(dot))
    dist = float(np.linalg.norm(a.translation - b.translation))
    return angle_deg, dist


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction, in world coordinates."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        o = np.asarray(self.origin, dtype=float).reshape(3).copy()
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = float(np.linalg.norm(d))
        if n < 1e-12:
            raise ValueError("ray direction has near-zero norm")
        d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        o.setflags(write=False)
        d.setflags(write=False)

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics plus a camera-to-world extrinsic."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: RigidTransform = field(default_factory=RigidTransform.identity)

    def center(self) -> np.ndarray:
        """Optical centre in world coordinates."""
        return self.camera_to_world.translation

    def world_to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return self.camera_to_world.inverse().apply(pts_world)

    def project(self, pts_world: np.ndarray) -> np.ndarray:
        """Project world points to pixels. Raises BehindCameraError on z <= 0."""
        pts_world = np.asarray(pts_world, dtype=float)
        single = pts_world.ndim == 1
        p = self.world_to_camera(pts_world.reshape(-1, 3))
        z = p[:, 2]
        if np.any(z <= 0):
            raise BehindCameraError(
                f"camera {self.name}: {int(np.sum(z <= 0))} point(s) at depth <= 0")
        uv = np.empty((p.shape[0], 2))
        uv[:, 0] = self.fx * p[:, 0] / z + self.cx
        uv[:, 1] = self.fy * p[:, 1] / z + self.cy
        return uv[0] if single else uv

    def backproject(self, pixel: np.ndarray) -> Ray:
        """World-frame ray through a pixel, origin at the optical centre."""
        u, v = float(pixel[0]), float(pixel[1])
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d_world = quat_rotate(self.camera_to_world.rotation, d_cam)
        return Ray(self.center(), d_world)


def triangulate_pair(ray_a: Ray, ray_b: Ray) -> np.ndarray:
    """Midpoint of the common perpendicular between two rays.

    Raises DegeneratePairError when the rays are parallel within
    PARALLEL_RAY_TOL radians or the origins coincide (no baseline).
    """
    o1, d1 = ray_a.origin, ray_a.direction
    o2, d2 = ray_b.origin, ray_b.direction
    if float(np.linalg.norm(o1 - o2)) < MIN_BASELINE:
        raise DegeneratePairError("ray origins coincide; no baseline")
    b = float(np.dot(d1, d2))
    denom = 1.0 - b * b  # sin^2 of the angle between the rays
    if denom < PARALLEL_RAY_TOL ** 2:
        raise DegeneratePairError("rays parallel within tolerance")
    w0 = o1 - o2
    d = float(np.dot(d1, w0))
    e = float(np.dot(d2, w0))
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    return 0.5 * ((o1 + s * d1) + (o2 + t * d2))


def load_camera_rig(path) -> dict[str, CameraModel]:
    """Read a rig file: a JSON array of camera records.

    Each record carries name, fx, fy, cx, cy, width, height and the
    camera-to-world pose as qw, qx, qy, qz, tx, ty, tz (metres).
    """
    with open(path, "r", encoding="utf-8") as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a top-level JSON array")
    rig: dict[str, CameraModel] = {}
    for rec in records:
        pose = RigidTransform(
            np.array([rec["qw"], rec["qx"], rec["qy"], rec["qz"]], dtype=float),
            np.array([rec["tx"], rec["ty"], rec["tz"]], dtype=float))
        cam = CameraModel(
            name=str(rec["name"]),
            fx=float(rec["fx"]), fy=float(rec["fy"]),
            cx=float(rec["cx"]), cy=float(rec["cy"]),
            width=int(rec["width"]), height=int(rec["height"]),
            camera_to_world=pose)
        if cam.name in rig:
            raise ValueError(f"{path}: duplicate camera name {cam.name!r}")
        rig[cam.name] = cam
    return rig


def save_camera_rig(path, rig: dict[str, CameraModel]) -> None:
    records = []
    for cam in rig.values():
        q = cam.camera_to_world.rotation
        t = cam.camera_to_world.translation
        records.append({
            "name": cam.name,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "qw": float(q[0]), "qx": float(q[1]), "qy": float(q[2]), "qz": float(q[3]),
            "tx": float(t[0]), "ty": float(t[1]), "tz": float(t[2]),
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2)
        f.write("\n")
