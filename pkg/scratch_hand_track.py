import time

import numpy as np

from mvhop.geometry import CameraModel, RigidTransform, matrix_to_quat
from mvhop.hand import HandPose, forward_kinematics, make_synthetic_hand
from mvhop.hand_track import (LandmarkObservation, fit_hand_pose,
                              global_align_init, keypoint_loss, track_hand,
                              triangulate_joint_ransac)

rng = np.random.default_rng(0)


def ring_cameras(count=8, radius=1.0, height=0.6, look_at=(0.0, 0.0, 0.1)):
    cams = {}
    look_at = np.asarray(look_at, dtype=float)
    up = np.array([0.0, 0.0, 1.0])
    for i in range(count):
        a = 2 * np.pi * i / count
        pos = np.array([radius * np.cos(a), radius * np.sin(a), height])
        z = look_at - pos
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        pose = RigidTransform(matrix_to_quat(R), pos)
        cams[f"cam{i}"] = CameraModel(f"cam{i}", 600.0, 600.0, 320.0, 240.0,
                                      640, 480, pose)
    return cams


cams = ring_cameras()
data = make_synthetic_hand("right")
betas = np.zeros(10)

# --- triangulation: exact projections
P = np.array([0.03, -0.02, 0.12])
pixels = {n: c.project(P) for n, c in cams.items()}
pt, inl = triangulate_joint_ransac(pixels, cams)
print("exact:", np.linalg.norm(pt - P), len(inl))

# corrupted view
pixels_bad = dict(pixels)
pixels_bad["cam3"] = pixels["cam3"] + np.array([100.0, 0.0])
pt, inl = triangulate_joint_ransac(pixels_bad, cams)
print("corrupted:", np.linalg.norm(pt - P), sorted(inl), "cam3" in inl)

# noisy
errs = []
for _ in range(20):
    noisy = {n: px + rng.normal(0, 1.0, 2) for n, px in pixels.items()}
    pt, inl = triangulate_joint_ransac(noisy, cams)
    errs.append(np.linalg.norm(pt - P))
print("noisy 1px: mean", np.mean(errs), "max", np.max(errs))

# --- fit_hand_pose from rest on a random state
rng2 = np.random.default_rng(5)
t0 = time.time()
worst = 0.0
for trial in range(10):
    truth = HandPose(rng2.normal(0, 0.5, 3), rng2.uniform(-0.3, 0.3, 45),
                     rng2.normal(0, 0.1, 3))
    kp = forward_kinematics(data, betas, truth)
    fit, info = fit_hand_pose(data, betas, kp, HandPose.identity(),
                              lambda_reg=1e-4)
    mp = np.linalg.norm(forward_kinematics(data, betas, fit) - kp,
                        axis=1).mean()
    worst = max(worst, mp)
    if mp > 2e-3:
        print(f"  trial {trial}: MPJPE {mp*1000:.3f} mm status",
              info["status"], "iters", info["iterations"])
print(f"fit from rest: worst MPJPE {worst*1000:.4f} mm over 10, "
      f"{time.time()-t0:.2f}s")

# with Kabsch init
t0 = time.time()
worst = 0.0
for trial in range(10):
    truth = HandPose(rng2.normal(0, 1.5, 3), rng2.uniform(-0.4, 0.4, 45),
                     rng2.normal(0, 0.2, 3))
    kp = forward_kinematics(data, betas, truth)
    init = global_align_init(data, betas, kp)
    fit, info = fit_hand_pose(data, betas, kp, init, lambda_reg=1e-4)
    mp = np.linalg.norm(forward_kinematics(data, betas, fit) - kp,
                        axis=1).mean()
    worst = max(worst, mp)
    if mp > 2e-3:
        print(f"  trial {trial}: MPJPE {mp*1000:.3f} mm")
print(f"fit with align init: worst MPJPE {worst*1000:.4f} mm over 10 "
      f"(large rotations), {time.time()-t0:.2f}s")

# --- track_hand end to end, noiseless moving hand
frames = list(range(12))
observations = []
truths = []
for f in frames:
    s = f / 11.0
    truth = HandPose(np.array([0.2 * s, 0.1, 0.3 * s]),
                     0.25 * s * np.ones(45) * 0.5,
                     np.array([0.02 * s, -0.01, 0.10]))
    truths.append(truth)
    kp = forward_kinematics(data, betas, truth)
    for name, cam in cams.items():
        observations.append(LandmarkObservation(
            f, name, cam.project(kp), np.ones(21, dtype=bool)))

t0 = time.time()
result = track_hand(observations, cams, data, betas, frames)
dt = time.time() - t0
mpjpes = []
for f, pose in zip(frames, result.poses):
    kp_true = forward_kinematics(data, betas, truths[f])
    kp_fit = forward_kinematics(data, betas, pose)
    mpjpes.append(np.linalg.norm(kp_fit - kp_true, axis=1).mean())
print(f"track noiseless: MPJPE mean {np.mean(mpjpes)*1000:.4f} mm, "
      f"max {np.max(mpjpes)*1000:.4f} mm, {dt:.2f}s for 12 frames")
print("statuses:", set(d["fit_status"] for d in result.diagnostics))
