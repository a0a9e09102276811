"""Multi-view 2D hand landmarks to 3D joint tracks to hand poses.

Per frame and joint, candidate 3D points come from triangulating every
pair of valid views. Candidates are scored by their mean squared
reprojection error over the views that fall inside a pixel gate, the
best one is polished by Gauss-Newton over those inlier views, and the
resulting per-joint tracks are cleaned up in three passes: implausible
frame-to-frame jumps are dropped, gaps are filled linearly, and a
natural cubic spline through the measurement-backed frames re-evaluates
everything so the track is twice continuously differentiable. Each
frame's 51-dof hand state is then fitted to the 21 keypoints by damped
Gauss-Newton on

    (1/21) sum_i |J_i(theta) - x_i|^2 + lambda_reg * |theta_art|^2

seeded by the previous frame's estimate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline

from .errors import (BehindCameraError, DegeneratePairError, JointEmptyError,
                     JointInconsistentError, JointUnobservedError)
from .geometry import (CameraModel, matrix_to_quat, quat_to_axis_angle,
                       triangulate_pair)
from .hand import (HandModelData, HandPose, N_JOINTS, N_POSE, _wrap_rotvec,
                   fk_jacobian, forward_kinematics, rest_joints)
from .optim import damped_gauss_newton

PROV_NONE = ""
PROV_TRIANGULATED = "triangulated"
PROV_INTERPOLATED = "interpolated"
PROV_SPLINED = "splined"


@dataclass
class LandmarkObservation:
    """One camera's 21 detected landmarks for one frame."""

    frame: int
    camera: str
    pixels: np.ndarray  # (21, 2)
    valid: np.ndarray   # (21,) bool

    def __post_init__(self):
        self.frame = int(self.frame)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(N_JOINTS, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(N_JOINTS)

    def clipped_to_bounds(self, width: int, height: int) -> "LandmarkObservation":
        """Copy with landmarks outside the image marked invalid."""
        inside = ((self.pixels[:, 0] >= 0) & (self.pixels[:, 0] < width)
                  & (self.pixels[:, 1] >= 0) & (self.pixels[:, 1] < height))
        return LandmarkObservation(self.frame, self.camera,
                                   self.pixels.copy(), self.valid & inside)


@dataclass
class Keypoint3DTrack:
    """Per-frame 3D joint positions with per-entry provenance.

    Absent entries hold nan and an empty provenance string; present
    entries are finite and tagged triangulated, interpolated, or
    splined.
    """

    frames: np.ndarray      # (F,) int
    points: np.ndarray      # (F, 21, 3), nan where absent
    provenance: np.ndarray  # (F, 21) unicode

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int).reshape(-1)
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError("track frames must be strictly increasing")
        F = self.frames.shape[0]
        self.points = np.asarray(self.points, dtype=float).reshape(F, N_JOINTS, 3)
        self.provenance = np.asarray(self.provenance, dtype="<U12").reshape(F, N_JOINTS)

    @classmethod
    def empty(cls, frames: Sequence[int]) -> "Keypoint3DTrack":
        frames = np.asarray(sorted(set(int(f) for f in frames)), dtype=int)
        return cls(frames, np.full((len(frames), N_JOINTS, 3), np.nan),
                   np.full((len(frames), N_JOINTS), PROV_NONE, dtype="<U12"))

    def copy(self) -> "Keypoint3DTrack":
        return Keypoint3DTrack(self.frames.copy(), self.points.copy(),
                               self.provenance.copy())

    def present(self) -> np.ndarray:
        """(F, 21) mask of entries that carry a finite point."""
        return np.isfinite(self.points).all(axis=2)

    def set_point(self, frame_index: int, joint: int, point: np.ndarray,
                  provenance: str) -> None:
        self.points[frame_index, joint] = np.asarray(point, dtype=float)
        self.provenance[frame_index, joint] = provenance

    def drop(self, frame_index: int, joint: int) -> None:
        self.points[frame_index, joint] = np.nan
        self.provenance[frame_index, joint] = PROV_NONE

    def velocity_flags(self, max_step_m: float = 0.3) -> np.ndarray:
        """(F, 21) mask flagging arrivals of implausible jumps.

        A joint present at two consecutive frame numbers that moved
        farther than max_step_m is flagged at the later frame.
        """
        flags = np.zeros((len(self.frames), N_JOINTS), dtype=bool)
        present = self.present()
        consecutive = np.diff(self.frames) == 1
        step = np.linalg.norm(np.diff(self.points, axis=0), axis=2)
        both = present[:-1] & present[1:] & consecutive[:, None]
        flags[1:] = both & (step > max_step_m)
        return flags


# ---------------------------------------------------------------------------
# triangulation


def projection_loss(point: np.ndarray, pixels: Dict[str, np.ndarray],
                    cameras: Dict[str, CameraModel]) -> float:
    """Mean squared reprojection error (px^2) of one world point.

    Views where the point falls behind the camera contribute inf.
    """
    if not pixels:
        raise ValueError("no views to project into")
    total = 0.0
    for name, px in pixels.items():
        try:
            uv = cameras[name].project(np.asarray(point, dtype=float))
        except BehindCameraError:
            return float("inf")
        d = uv - np.asarray(px, dtype=float)
        total += float(d @ d)
    return total / len(pixels)


def _projection_jacobian(camera: CameraModel, point: np.ndarray) -> np.ndarray:
    """d(pixel)/d(world point), (2, 3)."""
    W = camera.camera_to_world.rotation_matrix().T
    p = W @ (point - camera.camera_to_world.translation)
    x, y, z = p
    J = np.array([[camera.fx / z, 0.0, -camera.fx * x / z ** 2],
                  [0.0, camera.fy / z, -camera.fy * y / z ** 2]])
    return J @ W


def triangulate_joint_ransac(
    pixels: Dict[str, np.ndarray],
    cameras: Dict[str, CameraModel],
    *,
    gate_px: float = 20.0,
) -> Tuple[np.ndarray, List[str]]:
    """Robust multi-view triangulation of one joint.

    Every pair of valid views proposes a candidate; the candidate with
    the lowest mean squared reprojection error over the views inside
    the pixel gate wins and is polished by Gauss-Newton over exactly
    those views. The mean (rather than the sum) keeps candidates with
    many inliers from scoring worse than tight two-view cliques.
    """
    names = sorted(n for n in pixels if n in cameras)
    if len(names) < 2:
        raise JointUnobservedError(
            f"{len(names)} valid view(s); need at least 2")

    best = None  # (score, point, inlier names)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = names[i], names[j]
            try:
                cand = triangulate_pair(cameras[a].backproject(pixels[a]),
                                        cameras[b].backproject(pixels[b]))
            except DegeneratePairError:
                continue
            inliers = []
            total = 0.0
            for name in names:
                err2 = projection_loss(cand, {name: pixels[name]}, cameras)
                if err2 <= gate_px ** 2:
                    inliers.append(name)
                    total += err2
            if len(inliers) < 2:
                continue
            score = total / len(inliers)
            if best is None or score < best[0]:
                best = (score, cand, inliers)

    if best is None:
        raise JointInconsistentError(
            f"no candidate from {len(names)} views kept 2 gated views")
    _, cand, inliers = best

    scale = 1.0 / np.sqrt(len(inliers))

    def evaluate(x, need_jac):
        rows = []
        jrows = []
        for name in inliers:
            try:
                uv = cameras[name].project(x)
            except BehindCameraError:
                return float("inf"), None, None
            rows.append((uv - pixels[name]) * scale)
            if need_jac:
                jrows.append(_projection_jacobian(cameras[name], x) * scale)
        r = np.concatenate(rows)
        loss = float(r @ r)
        if not need_jac:
            return loss, None, None
        return loss, r, np.vstack(jrows)

    polished, _ = damped_gauss_newton(np.asarray(cand, dtype=float), evaluate,
                                      lambda x, d: x + d,
                                      max_iters=20, step_tol=1e-10)
    return polished, inliers


# ---------------------------------------------------------------------------
# track cleanup


def fill_gaps_linear(track: Keypoint3DTrack) -> Keypoint3DTrack:
    """Fill absent entries per joint-coordinate by linear interpolation.

    Interior gaps interpolate between the neighbouring present frames;
    leading and trailing gaps hold the nearest present value. Joints
    with no present frame at all are an error.
    """
    out = track.copy()
    present = track.present()
    for j in range(N_JOINTS):
        have = np.nonzero(present[:, j])[0]
        if have.size == 0:
            raise JointEmptyError(f"joint {j} never observed in sequence")
        missing = np.nonzero(~present[:, j])[0]
        if missing.size == 0:
            continue
        for c in range(3):
            out.points[missing, j, c] = np.interp(
                track.frames[missing], track.frames[have],
                track.points[have, j, c])
        out.provenance[missing, j] = PROV_INTERPOLATED
    return out


def fit_natural_cubic(times: np.ndarray, values: np.ndarray) -> BSpline:
    """Natural cubic spline interpolating (times, values) knots."""
    return make_interp_spline(np.asarray(times, dtype=float),
                              np.asarray(values, dtype=float),
                              k=3, bc_type="natural")


def smooth_cubic_spline(track: Keypoint3DTrack,
                        frame_rate: float = 30.0) -> Keypoint3DTrack:
    """Re-evaluate each joint track with a natural cubic spline.

    Knots are the measurement-backed frames (triangulated or already
    splined); linearly interpolated values are replaced by the spline,
    which restores continuity of the first and second derivatives
    across the former gaps. Frames outside the knot span hold the
    nearest knot value. A joint with fewer than 4 knot frames is left
    unchanged with a warning.
    """
    out = track.copy()
    present = track.present()
    times = track.frames / float(frame_rate)
    for j in range(N_JOINTS):
        anchored = present[:, j] & np.isin(
            track.provenance[:, j], (PROV_TRIANGULATED, PROV_SPLINED))
        knots = np.nonzero(anchored)[0]
        if knots.size < 4:
            warnings.warn(f"joint {j}: {knots.size} spline knots (< 4), "
                          "track left unchanged")
            continue
        t_knots = times[knots]
        inside = (times >= t_knots[0]) & (times <= t_knots[-1])
        for c in range(3):
            spl = fit_natural_cubic(t_knots, track.points[knots, j, c])
            out.points[inside, j, c] = spl(times[inside])
            out.points[~inside & (times < t_knots[0]), j, c] = spl(t_knots[0])
            out.points[~inside & (times > t_knots[-1]), j, c] = spl(t_knots[-1])
        out.provenance[:, j] = PROV_SPLINED
    return out


# ---------------------------------------------------------------------------
# pose fitting


def keypoint_loss(data: HandModelData, betas: np.ndarray, pose: HandPose,
                  keypoints: np.ndarray) -> float:
    """Mean squared joint-to-keypoint distance (m^2)."""
    keypoints = np.asarray(keypoints, dtype=float).reshape(N_JOINTS, 3)
    if not np.all(np.isfinite(keypoints)):
        raise ValueError("keypoint loss needs all 21 keypoints present")
    d = forward_kinematics(data, betas, pose) - keypoints
    return float(np.mean(np.sum(d * d, axis=1)))


def global_align_init(data: HandModelData, betas: np.ndarray,
                      keypoints: np.ndarray) -> HandPose:
    """Rigid alignment of the rest joints onto the keypoints.

    Kabsch on the 21 correspondences; articulation stays zero. Used to
    seed the first frame of a track so the fit starts in the right
    rotation basin.
    """
    keypoints = np.asarray(keypoints, dtype=float).reshape(N_JOINTS, 3)
    src = rest_joints(data, betas)
    cs = src.mean(axis=0)
    cd = keypoints.mean(axis=0)
    H = (src - cs).T @ (keypoints - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, float(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    rotvec = quat_to_axis_angle(matrix_to_quat(R))
    # FK rotates about the wrist, which sits at the origin of the rest
    # frame, so the rigid translation applies unchanged
    return HandPose(rotvec, np.zeros(45), cd - R @ cs)


def fit_hand_pose(
    data: HandModelData,
    betas: np.ndarray,
    keypoints: np.ndarray,
    init_pose: HandPose,
    *,
    lambda_reg: float = 1e-3,
    max_iters: int = 100,
    step_tol: float = 1e-7,
) -> Tuple[HandPose, dict]:
    """Fit the 51-dof state to 21 keypoints.

    Minimizes the mean squared joint error plus
    lambda_reg * |articulation|^2; the global rotation and translation
    are excluded from the regularizer since pulling the wrist toward
    the origin would be meaningless. A solve that never improves
    returns the initialization with a warning.
    """
    keypoints = np.asarray(keypoints, dtype=float).reshape(N_JOINTS, 3)
    if not np.all(np.isfinite(keypoints)):
        raise ValueError("pose fit needs all 21 keypoints present")
    scale = 1.0 / np.sqrt(N_JOINTS)
    sqrt_reg = np.sqrt(lambda_reg) if lambda_reg > 0 else 0.0

    def evaluate(vec, need_jac):
        pose = HandPose.from_vector(vec)
        if need_jac:
            joints, jac = fk_jacobian(data, betas, pose)
        else:
            joints = forward_kinematics(data, betas, pose)
            jac = None
        rows = [(joints - keypoints).reshape(-1) * scale]
        jrows = None
        if need_jac:
            jrows = [jac.reshape(3 * N_JOINTS, N_POSE) * scale]
        if sqrt_reg > 0:
            rows.append(sqrt_reg * vec[3:48])
            if need_jac:
                jr = np.zeros((45, N_POSE))
                jr[:, 3:48] = sqrt_reg * np.eye(45)
                jrows.append(jr)
        r = np.concatenate(rows)
        loss = float(r @ r)
        if not need_jac:
            return loss, None, None
        return loss, r, np.vstack(jrows)

    def apply_step(vec, delta):
        out = vec + delta
        out[0:3] = _wrap_rotvec(out[0:3])
        return out

    best, info = damped_gauss_newton(
        init_pose.as_vector(), evaluate, apply_step,
        max_iters=max_iters, step_tol=step_tol)
    if info["status"] == "diverged":
        warnings.warn("hand pose fit never improved; returning the "
                      "initialization")
    return HandPose.from_vector(best), info


# ---------------------------------------------------------------------------
# sequence tracking


@dataclass
class HandTrackResult:
    poses: List[HandPose]
    keypoints: Keypoint3DTrack
    diagnostics: List[dict] = field(default_factory=list)


def track_hand(
    observations: Sequence[LandmarkObservation],
    cameras: Dict[str, CameraModel],
    data: HandModelData,
    betas: np.ndarray,
    frames: Sequence[int],
    *,
    lambda_reg: float = 1e-3,
    gate_px: float = 20.0,
    frame_rate: float = 30.0,
    max_step_m: float = 0.3,
    init_pose: Optional[HandPose] = None,
) -> HandTrackResult:
    """Landmarks in, per-frame hand poses out.

    Per frame and joint: RANSAC triangulation across the valid views;
    then jump filtering, linear gap fill (a joint observed nowhere in
    the whole sequence raises), spline re-evaluation, and a per-frame
    fit seeded by the previous frame (the first frame seeds from
    init_pose, or from rigid alignment of the rest joints).
    """
    by_frame: Dict[int, Dict[str, LandmarkObservation]] = {}
    for obs in observations:
        by_frame.setdefault(obs.frame, {})[obs.camera] = obs

    track = Keypoint3DTrack.empty(frames)
    diagnostics: List[dict] = []
    for fi, frame in enumerate(track.frames):
        frame_obs = by_frame.get(int(frame), {})
        n_tri = 0
        for j in range(N_JOINTS):
            pixels = {name: o.pixels[j] for name, o in frame_obs.items()
                      if o.valid[j]}
            try:
                point, _ = triangulate_joint_ransac(pixels, cameras,
                                                    gate_px=gate_px)
            except (JointUnobservedError, JointInconsistentError):
                continue
            track.set_point(fi, j, point, PROV_TRIANGULATED)
            n_tri += 1
        diagnostics.append({"frame": int(frame), "triangulated": n_tri})

    flags = track.velocity_flags(max_step_m)
    for fi, j in zip(*np.nonzero(flags)):
        track.drop(fi, j)
        diagnostics[fi].setdefault("velocity_dropped", []).append(int(j))

    filled = fill_gaps_linear(track)
    smoothed = smooth_cubic_spline(filled, frame_rate)

    poses: List[HandPose] = []
    prev: Optional[HandPose] = init_pose
    for fi, frame in enumerate(smoothed.frames):
        kp = smoothed.points[fi]
        if prev is None:
            prev = global_align_init(data, betas, kp)
        pose, info = fit_hand_pose(data, betas, kp, prev,
                                   lambda_reg=lambda_reg)
        poses.append(pose)
        prev = pose
        diagnostics[fi]["fit_status"] = info["status"]
        diagnostics[fi]["fit_loss"] = info["final_loss"]

    return HandTrackResult(poses, smoothed, diagnostics)
