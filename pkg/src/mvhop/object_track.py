"""Multi-view object pose fusion and signed-distance refinement.

Per frame, each camera contributes one candidate world pose of the
object (or none). Fusion runs a consensus search over the candidates,
averages the agreeing subset, and falls back to the previous output
when no consensus exists. Fused poses are then refined against the
frame's segmented object points by minimizing

    lambda_sdf * mean_i SDF(T^-1 x_i)^2
  + lambda_smooth * (|q - q_prev|^2 + |t - t_prev|^2)

over a left-perturbation of the pose (R <- exp(w) R, t <- t + u).
Carried-forward frames skip refinement: they contain no fresh
measurement to refine against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyCloudError
from .geometry import (RigidTransform, hemisphere_align, pose_distance,
                       quat_from_axis_angle, quat_multiply)
from .optim import damped_gauss_newton
from .sdf import VoxelSdf

STATUS_FUSED = "fused"
STATUS_CARRIED = "carried_forward"
STATUS_LOST = "lost"


@dataclass(frozen=True)
class FusionConfig:
    """Thresholds for the per-frame candidate consensus search."""

    inlier_dist_m: float = 0.02
    inlier_angle_deg: float = 10.0
    # maximum spread (RMS about the consensus mean) tolerated before
    # the consensus is declared unreliable
    spread_dist_m: float = 0.05
    spread_angle_deg: float = 15.0
    ransac_iters: int = 64
    min_inliers: int = 2


@dataclass
class FusionDiagnostics:
    status: str
    candidate_count: int
    inlier_count: int
    spread_dist_m: float = float("nan")
    spread_angle_deg: float = float("nan")
    inlier_mask: Optional[np.ndarray] = None


def average_poses(poses: Sequence[RigidTransform],
                  reference: Optional[RigidTransform] = None) -> RigidTransform:
    """Mean pose: arithmetic translation mean and normalized quaternion
    mean with every quaternion aligned to the reference hemisphere."""
    if not poses:
        raise ValueError("cannot average zero poses")
    ref_q = (reference or poses[0]).rotation
    quats = np.stack([hemisphere_align(p.rotation, ref_q) for p in poses])
    trans = np.stack([p.translation for p in poses])
    return RigidTransform(quats.mean(axis=0), trans.mean(axis=0))


def _consensus_spread(poses: Sequence[RigidTransform],
                      center: RigidTransform) -> Tuple[float, float]:
    dists = np.empty(len(poses))
    angles = np.empty(len(poses))
    for i, p in enumerate(poses):
        angles[i], dists[i] = pose_distance(p, center)
    return float(np.sqrt(np.mean(dists ** 2))), float(np.sqrt(np.mean(angles ** 2)))


def fuse_poses_ransac(
    candidates: Sequence[Optional[RigidTransform]],
    config: FusionConfig = FusionConfig(),
    prev_pose: Optional[RigidTransform] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Optional[RigidTransform], FusionDiagnostics]:
    """Consensus-average the candidate poses of one frame.

    Every candidate is tried as a hypothesis when there are at most
    ransac_iters of them (the usual case, and deterministic); larger
    sets are subsampled with the supplied generator. The best
    hypothesis maximizes inlier count, with ties broken by the mean
    normalized inlier residual. If the consensus has fewer than
    min_inliers members or spreads wider than the configured gate, the
    previous pose is carried forward when one exists; otherwise the
    frame is lost.
    """
    present = [(i, c) for i, c in enumerate(candidates) if c is not None]
    n_all = len(candidates)

    def fallback(count: int) -> Tuple[Optional[RigidTransform], FusionDiagnostics]:
        if prev_pose is not None:
            return prev_pose, FusionDiagnostics(
                STATUS_CARRIED, len(present), count)
        return None, FusionDiagnostics(STATUS_LOST, len(present), count)

    if not present:
        return fallback(0)

    hypotheses = list(range(len(present)))
    if len(hypotheses) > config.ransac_iters:
        if rng is None:
            rng = np.random.default_rng(0)
        hypotheses = list(rng.choice(len(present), size=config.ransac_iters,
                                     replace=False))

    best_mask = None
    best_key = None
    for h in hypotheses:
        _, hyp = present[h]
        mask = np.zeros(len(present), dtype=bool)
        residuals = []
        for j, (_, cand) in enumerate(present):
            angle, dist = pose_distance(hyp, cand)
            if dist <= config.inlier_dist_m and angle <= config.inlier_angle_deg:
                mask[j] = True
                residuals.append(0.5 * (dist / config.inlier_dist_m
                                        + angle / config.inlier_angle_deg))
        key = (-int(mask.sum()), float(np.mean(residuals)) if residuals else np.inf)
        if best_key is None or key < best_key:
            best_key = key
            best_mask = mask

    inliers = [c for (_, c), m in zip(present, best_mask) if m]
    if len(inliers) < config.min_inliers:
        return fallback(len(inliers))

    fused = average_poses(inliers)
    spread_d, spread_a = _consensus_spread(inliers, fused)
    if spread_d > config.spread_dist_m or spread_a > config.spread_angle_deg:
        pose, diag = fallback(len(inliers))
        diag.spread_dist_m = spread_d
        diag.spread_angle_deg = spread_a
        return pose, diag

    full_mask = np.zeros(n_all, dtype=bool)
    for (i, _), m in zip(present, best_mask):
        full_mask[i] = m
    return fused, FusionDiagnostics(
        STATUS_FUSED, len(present), len(inliers), spread_d, spread_a,
        full_mask)


# ---------------------------------------------------------------------------
# SDF refinement


def sdf_loss(sdf: VoxelSdf, pose: RigidTransform, points: np.ndarray) -> float:
    """Mean squared signed distance of world points under the pose."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyCloudError("no points for sdf loss")
    local = pose.inverse().apply(points)
    values = sdf.query(local)
    return float(np.mean(values ** 2))


def smoothness_loss(pose: RigidTransform, prev_pose: RigidTransform) -> float:
    """Squared quaternion and translation increments between frames."""
    q = hemisphere_align(pose.rotation, prev_pose.rotation)
    dq = q - prev_pose.rotation
    dt = pose.translation - prev_pose.translation
    return float(dq @ dq + dt @ dt)


def _quat_left_jacobian(q: np.ndarray) -> np.ndarray:
    """d/dw of quat_multiply(quat_from_axis_angle(w), q) at w = 0, (4, 3)."""
    out = np.empty((4, 3))
    for i in range(3):
        e = np.zeros(4)
        e[1 + i] = 0.5
        out[:, i] = quat_multiply(e, q)
    return out


def refine_pose_sdf(
    sdf: VoxelSdf,
    points: np.ndarray,
    init_pose: RigidTransform,
    *,
    prev_pose: Optional[RigidTransform] = None,
    lambda_sdf: float = 10.0,
    lambda_smooth: float = 1e-3,
    max_iters: int = 50,
    step_tol: float = 1e-6,
) -> Tuple[RigidTransform, dict]:
    """Refine a world pose against segmented object points.

    Residuals are the signed distances of the points pulled into the
    object frame, differentiated through the same trilinear
    interpolation the queries use; the optional smoothness term ties
    the pose parameters to the previous frame's output.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyCloudError("no points to refine against")
    scale = np.sqrt(lambda_sdf / points.shape[0])
    sqrt_smooth = np.sqrt(lambda_smooth) if lambda_smooth > 0 else 0.0

    lo = sdf.origin
    hi = sdf.origin + (np.asarray(sdf.values.shape) - 1) * sdf.voxel_size

    def evaluate(pose: RigidTransform, need_jac: bool):
        inv = pose.inverse()
        local = inv.apply(points)
        values = sdf.query(local)
        rows = [values * scale]
        jrows = None
        if need_jac:
            # gradients of the interpolant, evaluated just inside the
            # grid for any point that strayed out of it
            clamped = np.clip(local, lo + 1e-9, hi - 1e-9)
            grad_local = sdf.gradient_trilinear(clamped)
            R = pose.rotation_matrix()
            grad_world = grad_local @ R.T
            lever = points - pose.translation
            j = np.empty((points.shape[0], 6))
            j[:, 0:3] = np.cross(grad_world, lever) * scale
            j[:, 3:6] = -grad_world * scale
            jrows = [j]
        if sqrt_smooth > 0 and prev_pose is not None:
            q = hemisphere_align(pose.rotation, prev_pose.rotation)
            rows.append(sqrt_smooth * (q - prev_pose.rotation))
            rows.append(sqrt_smooth * (pose.translation - prev_pose.translation))
            if need_jac:
                jq = np.zeros((4, 6))
                jq[:, 0:3] = sqrt_smooth * _quat_left_jacobian(q)
                jt = np.zeros((3, 6))
                jt[:, 3:6] = sqrt_smooth * np.eye(3)
                jrows.extend([jq, jt])
        r = np.concatenate(rows)
        loss = float(r @ r)
        if not need_jac:
            return loss, None, None
        return loss, r, np.vstack(jrows)

    def apply_step(pose: RigidTransform, delta: np.ndarray) -> RigidTransform:
        dq = quat_from_axis_angle(delta[0:3])
        return RigidTransform(quat_multiply(dq, pose.rotation),
                              pose.translation + delta[3:6])

    best, info = damped_gauss_newton(
        init_pose, evaluate, apply_step,
        max_iters=max_iters, step_tol=step_tol)
    return best, info


# ---------------------------------------------------------------------------
# sequence tracking


@dataclass
class PoseTrack:
    """Per-frame world poses with validity and provenance statuses.

    Stored quaternions keep consecutive valid frames on the same
    hemisphere (non-negative dot products) so downstream smoothness
    terms and serialization never see sign flips.
    """

    frames: List[int] = field(default_factory=list)
    quats: List[np.ndarray] = field(default_factory=list)
    trans: List[np.ndarray] = field(default_factory=list)
    valid: List[bool] = field(default_factory=list)
    status: List[str] = field(default_factory=list)

    def append(self, frame: int, pose: Optional[RigidTransform],
               status: str) -> None:
        self.frames.append(int(frame))
        if pose is None:
            self.quats.append(np.array([1.0, 0.0, 0.0, 0.0]))
            self.trans.append(np.zeros(3))
            self.valid.append(False)
            self.status.append(status)
            return
        q = pose.rotation
        for prev_q, prev_ok in zip(reversed(self.quats), reversed(self.valid)):
            if prev_ok:
                q = hemisphere_align(q, prev_q)
                break
        self.quats.append(q)
        self.trans.append(pose.translation.copy())
        self.valid.append(True)
        self.status.append(status)

    def __len__(self) -> int:
        return len(self.frames)

    def pose_at(self, frame: int) -> Optional[RigidTransform]:
        try:
            i = self.frames.index(int(frame))
        except ValueError:
            return None
        if not self.valid[i]:
            return None
        return RigidTransform(self.quats[i], self.trans[i])

    def valid_frames(self) -> List[int]:
        return [f for f, ok in zip(self.frames, self.valid) if ok]


@dataclass
class ObjectTrackResult:
    fused: PoseTrack
    refined: PoseTrack
    diagnostics: List[dict]


def track_object(
    frames: Sequence[int],
    candidates_by_camera: Dict[str, PoseTrack],
    points_for_frame: Callable[[int], np.ndarray],
    sdf: VoxelSdf,
    *,
    config: FusionConfig = FusionConfig(),
    lambda_sdf: float = 10.0,
    lambda_smooth: float = 1e-3,
    max_iters: int = 50,
) -> ObjectTrackResult:
    """Fuse and refine one object's pose over a frame range.

    points_for_frame returns the world-frame points segmented to this
    object at a frame (possibly empty). Carried-forward frames skip
    refinement, as does any frame with no segmented points; both facts
    are recorded in the per-frame diagnostics.
    """
    fused_track = PoseTrack()
    refined_track = PoseTrack()
    diagnostics: List[dict] = []
    prev_refined: Optional[RigidTransform] = None

    for frame in frames:
        cands = [track.pose_at(frame)
                 for track in candidates_by_camera.values()]
        fused, diag = fuse_poses_ransac(cands, config, prev_refined)
        entry = {
            "frame": int(frame),
            "fusion_status": diag.status,
            "candidates": diag.candidate_count,
            "inliers": diag.inlier_count,
            "refined": False,
        }
        if fused is None:
            fused_track.append(frame, None, diag.status)
            refined_track.append(frame, None, diag.status)
            diagnostics.append(entry)
            continue

        fused_track.append(frame, fused, diag.status)
        refined = fused
        if diag.status == STATUS_FUSED:
            points = points_for_frame(frame)
            points = np.asarray(points, dtype=float).reshape(-1, 3)
            if points.shape[0] > 0:
                refined, rinfo = refine_pose_sdf(
                    sdf, points, fused, prev_pose=prev_refined,
                    lambda_sdf=lambda_sdf, lambda_smooth=lambda_smooth,
                    max_iters=max_iters)
                entry["refined"] = True
                entry["refine_status"] = rinfo["status"]
                entry["refine_initial_loss"] = rinfo["initial_loss"]
                entry["refine_final_loss"] = rinfo["final_loss"]
            else:
                entry["refine_skipped"] = "no segmented points"
        refined_track.append(frame, refined, diag.status)
        prev_refined = refined
        diagnostics.append(entry)

    return ObjectTrackResult(fused_track, refined_track, diagnostics)
