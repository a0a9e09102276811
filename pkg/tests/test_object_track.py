from __future__ import annotations

import numpy as np
import pytest

from mvhop.errors import EmptyCloudError
from mvhop.geometry import (RigidTransform, pose_distance, quat_from_axis_angle,
                            quat_multiply)
from mvhop.mesh import make_box, sample_surface
from mvhop.object_track import (STATUS_CARRIED, STATUS_FUSED, STATUS_LOST,
                                FusionConfig, PoseTrack, average_poses,
                                fuse_poses_ransac, refine_pose_sdf, sdf_loss,
                                smoothness_loss, track_object)
from mvhop.sdf import build_sdf


def _perturbed(pose: RigidTransform, rotvec, dt) -> RigidTransform:
    dq = quat_from_axis_angle(np.asarray(rotvec, dtype=float))
    return RigidTransform(quat_multiply(dq, pose.rotation),
                          pose.translation + np.asarray(dt, dtype=float))


def _noisy(pose: RigidTransform, rng, rot_sigma, trans_sigma) -> RigidTransform:
    return _perturbed(pose, rng.normal(0.0, rot_sigma, 3),
                      rng.normal(0.0, trans_sigma, 3))


@pytest.fixture(scope="module")
def box_mesh():
    # all three extents distinct so the pose is fully observable
    return make_box(extents=(0.12, 0.08, 0.05))


@pytest.fixture(scope="module")
def box_sdf(box_mesh):
    return build_sdf(box_mesh, voxel_size=0.004, padding=0.015)


@pytest.fixture(scope="module")
def box_points(box_mesh):
    rng = np.random.default_rng(11)
    return sample_surface(box_mesh, 1200, rng)


class TestAveragePoses:
    def test_identical_poses_average_to_themselves(self):
        pose = RigidTransform.from_rotvec(np.array([0.3, -0.1, 0.2]),
                                          np.array([0.5, 0.1, -0.2]))
        mean = average_poses([pose, pose, pose])
        assert np.allclose(mean.rotation, pose.rotation, atol=1e-15)
        assert np.allclose(mean.translation, pose.translation, atol=1e-15)

    def test_sign_flipped_quaternion_does_not_corrupt_mean(self):
        pose = RigidTransform.from_rotvec(np.array([0.4, 0.2, -0.3]),
                                          np.zeros(3))
        flipped = RigidTransform(-pose.rotation, pose.translation)
        mean = average_poses([pose, flipped])
        angle, dist = pose_distance(mean, pose)
        assert angle < 1e-9
        assert dist < 1e-12

    def test_symmetric_rotations_average_to_midpoint(self):
        plus = RigidTransform.from_rotvec(np.array([0.0, 0.0, 0.35]),
                                          np.array([1.0, 0.0, 0.0]))
        minus = RigidTransform.from_rotvec(np.array([0.0, 0.0, -0.35]),
                                           np.array([0.0, 1.0, 0.0]))
        mean = average_poses([plus, minus])
        angle, _ = pose_distance(mean, RigidTransform.identity())
        assert angle < 1e-9
        assert np.allclose(mean.translation, [0.5, 0.5, 0.0])

    def test_empty_input_raises(self):
        with pytest.raises(ValueError):
            average_poses([])


class TestFusePosesRansac:
    def test_outliers_rejected_and_mask_reported(self):
        rng = np.random.default_rng(7)
        truth = RigidTransform.from_rotvec(np.array([0.4, -0.1, 0.2]),
                                           np.array([0.05, -0.02, 0.12]))
        candidates = []
        outlier_slots = {2, 5, 6}
        for i in range(8):
            if i in outlier_slots:
                candidates.append(_perturbed(
                    truth, rng.normal(0, 0.8, 3), rng.normal(0, 0.5, 3)))
            else:
                candidates.append(_noisy(truth, rng, 0.004, 0.0015))
        fused, diag = fuse_poses_ransac(candidates)
        assert diag.status == STATUS_FUSED
        assert diag.candidate_count == 8
        assert diag.inlier_count == 5
        expected_mask = np.array([i not in outlier_slots for i in range(8)])
        assert np.array_equal(diag.inlier_mask, expected_mask)
        angle, dist = pose_distance(fused, truth)
        assert angle <= 1.0
        assert dist <= 0.005

    def test_missing_cameras_are_skipped(self):
        truth = RigidTransform.from_rotvec(np.array([0.1, 0.0, 0.0]),
                                           np.array([0.3, 0.0, 0.0]))
        rng = np.random.default_rng(8)
        candidates = [None, _noisy(truth, rng, 0.002, 0.001), None,
                      _noisy(truth, rng, 0.002, 0.001),
                      _noisy(truth, rng, 0.002, 0.001)]
        fused, diag = fuse_poses_ransac(candidates)
        assert diag.status == STATUS_FUSED
        assert diag.candidate_count == 3
        assert diag.inlier_count == 3
        # mask spans the full candidate list, absent slots stay False
        assert diag.inlier_mask.shape == (5,)
        assert not diag.inlier_mask[0] and not diag.inlier_mask[2]

    def test_no_candidates_with_previous_pose_carries_forward(self):
        prev = RigidTransform.from_rotvec(np.array([0.0, 0.2, 0.0]),
                                          np.array([0.1, 0.2, 0.3]))
        fused, diag = fuse_poses_ransac([None, None, None], prev_pose=prev)
        assert diag.status == STATUS_CARRIED
        assert fused is prev

    def test_no_candidates_without_previous_pose_is_lost(self):
        fused, diag = fuse_poses_ransac([None, None])
        assert fused is None
        assert diag.status == STATUS_LOST
        assert diag.candidate_count == 0

    def test_scattered_candidates_never_reach_consensus(self):
        poses = [RigidTransform.from_rotvec(np.zeros(3), np.array([x, 0.0, 0.0]))
                 for x in (0.0, 0.2, 0.4, 0.6)]
        fused, diag = fuse_poses_ransac(poses)
        assert fused is None
        assert diag.status == STATUS_LOST
        assert diag.inlier_count == 1
        prev = RigidTransform.identity()
        fused, diag = fuse_poses_ransac(poses, prev_pose=prev)
        assert fused is prev
        assert diag.status == STATUS_CARRIED

    def test_min_inliers_bounds_single_candidate(self):
        only = RigidTransform.from_rotvec(np.array([0.0, 0.0, 0.1]),
                                          np.array([0.2, 0.0, 0.0]))
        fused, diag = fuse_poses_ransac([only])
        assert fused is None and diag.status == STATUS_LOST
        permissive = FusionConfig(min_inliers=1)
        fused, diag = fuse_poses_ransac([only], permissive)
        assert diag.status == STATUS_FUSED
        angle, dist = pose_distance(fused, only)
        assert angle < 1e-9 and dist < 1e-12

    def test_spread_gate_rejects_loose_consensus(self):
        # gates chosen so the three candidates all pass the inlier test
        # yet spread far wider than the consensus is allowed to
        config = FusionConfig(inlier_dist_m=0.2, inlier_angle_deg=60.0,
                              spread_dist_m=0.01, spread_angle_deg=5.0)
        poses = [RigidTransform.from_rotvec(np.zeros(3), np.array([x, 0.0, 0.0]))
                 for x in (0.0, 0.06, 0.12)]
        fused, diag = fuse_poses_ransac(poses, config)
        assert fused is None
        assert diag.status == STATUS_LOST
        assert diag.inlier_count == 3
        assert diag.spread_dist_m == pytest.approx(np.sqrt(2 * 0.06 ** 2 / 3))
        prev = RigidTransform.identity()
        fused, diag = fuse_poses_ransac(poses, config, prev_pose=prev)
        assert fused is prev
        assert diag.status == STATUS_CARRIED

    def test_equal_counts_tie_break_on_residual(self):
        tight = [RigidTransform.from_rotvec(np.zeros(3), np.array([x, 0.0, 0.0]))
                 for x in (0.0, 0.001)]
        loose = [RigidTransform.from_rotvec(np.zeros(3), np.array([x, 0.0, 0.0]))
                 for x in (0.5, 0.515)]
        fused, diag = fuse_poses_ransac(tight + loose)
        assert diag.status == STATUS_FUSED
        assert np.array_equal(diag.inlier_mask, [True, True, False, False])
        assert np.allclose(fused.translation, [0.0005, 0.0, 0.0])

    def test_deterministic_with_and_without_subsampling(self):
        rng = np.random.default_rng(13)
        truth = RigidTransform.from_rotvec(np.array([0.2, 0.1, -0.3]),
                                           np.array([0.4, 0.0, 0.2]))
        many = [_noisy(truth, rng, 0.001, 0.0005) for _ in range(66)]
        many += [_perturbed(truth, rng.normal(0, 1.0, 3),
                            rng.normal(0, 0.5, 3)) for _ in range(4)]
        first, diag_first = fuse_poses_ransac(many)
        second, diag_second = fuse_poses_ransac(many)
        assert diag_first.status == STATUS_FUSED
        assert diag_first.inlier_count == 66
        assert np.array_equal(diag_first.inlier_mask, diag_second.inlier_mask)
        assert np.array_equal(first.rotation, second.rotation)
        assert np.array_equal(first.translation, second.translation)


class TestLossValues:
    def test_sdf_loss_vanishes_on_surface_points(self, fine_sphere_sdf):
        rng = np.random.default_rng(5)
        dirs = rng.normal(size=(400, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        loss = sdf_loss(fine_sphere_sdf, RigidTransform.identity(),
                        dirs * 0.05)
        assert loss < 1e-8

    def test_sdf_loss_squares_the_offset(self, fine_sphere_sdf):
        point = np.array([[0.055, 0.0, 0.0]])
        loss = sdf_loss(fine_sphere_sdf, RigidTransform.identity(), point)
        assert loss == pytest.approx(0.005 ** 2, abs=2e-6)

    def test_sdf_loss_uses_pose_to_pull_points_local(self, fine_sphere_sdf):
        # the same world point lands on the surface once the pose
        # carries the object 5 mm toward it
        point = np.array([[0.055, 0.0, 0.0]])
        shifted = RigidTransform.from_rotvec(np.zeros(3),
                                             np.array([0.005, 0.0, 0.0]))
        assert sdf_loss(fine_sphere_sdf, shifted, point) < 1e-8

    def test_sdf_loss_empty_cloud_raises(self, fine_sphere_sdf):
        with pytest.raises(EmptyCloudError):
            sdf_loss(fine_sphere_sdf, RigidTransform.identity(),
                     np.zeros((0, 3)))

    def test_smoothness_zero_for_identical_poses(self):
        pose = RigidTransform.from_rotvec(np.array([0.1, 0.2, 0.3]),
                                          np.array([1.0, 2.0, 3.0]))
        assert smoothness_loss(pose, pose) == 0.0

    def test_smoothness_translation_term(self):
        prev = RigidTransform.identity()
        step = np.array([0.01, -0.02, 0.005])
        pose = RigidTransform.from_rotvec(np.zeros(3), step)
        assert smoothness_loss(pose, prev) == pytest.approx(step @ step)

    def test_smoothness_rotation_term_closed_form(self):
        # |q(theta) - q(0)|^2 = 4 sin^2(theta / 4) for a single axis
        theta = 0.6
        prev = RigidTransform.identity()
        pose = RigidTransform.from_rotvec(np.array([0.0, 0.0, theta]),
                                          np.zeros(3))
        expected = 4.0 * np.sin(theta / 4.0) ** 2
        assert smoothness_loss(pose, prev) == pytest.approx(expected, rel=1e-12)

    def test_smoothness_ignores_quaternion_sign(self):
        pose = RigidTransform.from_rotvec(np.array([0.2, -0.1, 0.4]),
                                          np.array([0.3, 0.0, 0.0]))
        flipped = RigidTransform(-pose.rotation, pose.translation)
        assert smoothness_loss(flipped, pose) == 0.0


class TestRefinePoseSdf:
    def test_recovers_pose_from_offset_inits(self, box_sdf, box_points):
        truth = RigidTransform.from_rotvec(np.array([0.3, -0.2, 0.5]),
                                           np.array([0.02, -0.01, 0.03]))
        world = truth.apply(box_points)
        rng = np.random.default_rng(17)
        for _ in range(3):
            axis = rng.normal(size=3)
            axis *= 0.05 / np.linalg.norm(axis)  # ~2.9 degrees
            dt = rng.normal(size=3)
            dt *= 0.008 / np.linalg.norm(dt)
            init = _perturbed(truth, axis, dt)
            refined, info = refine_pose_sdf(box_sdf, world, init)
            assert info["status"] == "ok"
            angle, dist = pose_distance(refined, truth)
            assert angle <= 0.1
            assert dist <= 3e-4
            hist = info["loss_history"]
            assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_reported_losses_match_public_loss_terms(self, box_sdf, box_points):
        truth = RigidTransform.from_rotvec(np.array([0.1, 0.4, -0.2]),
                                           np.array([0.0, 0.02, 0.01]))
        world = truth.apply(box_points)
        init = _perturbed(truth, [0.02, 0.0, -0.01], [0.004, -0.002, 0.003])
        prev = _perturbed(truth, [0.0, 0.01, 0.0], [0.001, 0.0, 0.0])
        lam_sdf, lam_smooth = 10.0, 1e-3
        refined, info = refine_pose_sdf(box_sdf, world, init, prev_pose=prev,
                                        lambda_sdf=lam_sdf,
                                        lambda_smooth=lam_smooth)
        composite_init = (lam_sdf * sdf_loss(box_sdf, init, world)
                          + lam_smooth * smoothness_loss(init, prev))
        composite_final = (lam_sdf * sdf_loss(box_sdf, refined, world)
                           + lam_smooth * smoothness_loss(refined, prev))
        assert info["initial_loss"] == pytest.approx(composite_init, rel=1e-12)
        assert info["final_loss"] == pytest.approx(composite_final, rel=1e-12)

    def test_strong_smoothness_anchors_to_previous(self, box_sdf, box_points):
        truth = RigidTransform.from_rotvec(np.array([0.0, 0.0, 0.2]),
                                           np.zeros(3))
        world = truth.apply(box_points)
        init = _perturbed(truth, [0.0, 0.03, 0.0], [0.005, 0.0, 0.0])
        refined, _ = refine_pose_sdf(box_sdf, world, init, prev_pose=init,
                                     lambda_smooth=1e6)
        angle, dist = pose_distance(refined, init)
        assert angle <= 0.02
        assert dist <= 1e-4

    def test_default_smoothness_still_tracks_data(self, box_sdf, box_points):
        truth = RigidTransform.from_rotvec(np.array([0.0, 0.0, 0.2]),
                                           np.zeros(3))
        world = truth.apply(box_points)
        init = _perturbed(truth, [0.0, 0.03, 0.0], [0.005, 0.0, 0.0])
        refined, _ = refine_pose_sdf(box_sdf, world, init, prev_pose=init)
        angle, dist = pose_distance(refined, truth)
        assert angle <= 0.1
        assert dist <= 5e-4

    def test_empty_cloud_raises(self, box_sdf):
        with pytest.raises(EmptyCloudError):
            refine_pose_sdf(box_sdf, np.zeros((0, 3)),
                            RigidTransform.identity())


class TestPoseTrack:
    def test_append_lookup_and_validity(self):
        track = PoseTrack()
        pose = RigidTransform.from_rotvec(np.array([0.1, 0.0, 0.0]),
                                          np.array([0.2, 0.3, 0.4]))
        track.append(0, pose, STATUS_FUSED)
        track.append(1, None, STATUS_LOST)
        track.append(4, pose, STATUS_CARRIED)
        assert len(track) == 3
        assert track.valid_frames() == [0, 4]
        assert track.pose_at(1) is None
        assert track.pose_at(2) is None
        got = track.pose_at(4)
        angle, dist = pose_distance(got, pose)
        assert angle < 1e-9 and dist < 1e-12
        assert track.status == [STATUS_FUSED, STATUS_LOST, STATUS_CARRIED]

    def test_consecutive_quaternions_share_hemisphere(self):
        track = PoseTrack()
        base = RigidTransform.from_rotvec(np.array([0.0, 0.0, 0.3]),
                                          np.zeros(3))
        flipped = RigidTransform(-base.rotation, base.translation)
        track.append(0, base, STATUS_FUSED)
        track.append(1, flipped, STATUS_FUSED)
        # a gap must not break the alignment chain
        track.append(2, None, STATUS_LOST)
        track.append(3, flipped, STATUS_FUSED)
        quats = [q for q, ok in zip(track.quats, track.valid) if ok]
        for a, b in zip(quats, quats[1:]):
            assert float(a @ b) >= 0.0
        # the sign flip must not change the rotation it decodes to
        angle, _ = pose_distance(track.pose_at(3), base)
        assert angle < 1e-9


class TestTrackObject:
    @pytest.fixture()
    def scenario(self, box_mesh):
        rng = np.random.default_rng(23)
        frames = list(range(6))
        truth = {}
        # rotation rate kept small: the default smoothness weight trades
        # a lag of roughly motion/30 per frame for noise suppression, and
        # this test asserts refinement beats the fused average
        for f in frames:
            truth[f] = RigidTransform.from_rotvec(
                np.array([0.1, 0.2, 0.005 * f]),
                np.array([0.30 + 0.004 * f, -0.10, 0.25]))

        samples = sample_surface(box_mesh, 800, rng)
        cams = {name: PoseTrack() for name in
                ("cam0", "cam1", "cam2", "cam3")}
        for f in frames:
            if f == 2:
                # total detection dropout; cam0 skips the frame
                # entirely while the others log an invalid entry
                for name in ("cam1", "cam2", "cam3"):
                    cams[name].append(f, None, "candidate")
                continue
            for name, track in cams.items():
                if name == "cam3" and f in (1, 4):
                    track.append(f, _perturbed(
                        truth[f], rng.normal(0, 0.7, 3),
                        rng.normal(0, 0.5, 3)), "candidate")
                else:
                    track.append(f, _noisy(truth[f], rng, 0.003, 0.0015),
                                 "candidate")

        def points_for_frame(f):
            if f == 3:
                return np.zeros((0, 3))
            return truth[f].apply(samples)

        return frames, truth, cams, points_for_frame

    def test_sequence_statuses_and_diagnostics(self, scenario, box_sdf):
        frames, truth, cams, points_for_frame = scenario
        result = track_object(frames, cams, points_for_frame, box_sdf)
        assert len(result.fused) == len(frames)
        assert len(result.refined) == len(frames)
        assert len(result.diagnostics) == len(frames)

        expected = [STATUS_FUSED, STATUS_FUSED, STATUS_CARRIED,
                    STATUS_FUSED, STATUS_FUSED, STATUS_FUSED]
        assert result.fused.status == expected
        assert result.refined.status == expected

        carried = result.diagnostics[2]
        assert carried["fusion_status"] == STATUS_CARRIED
        assert carried["refined"] is False
        assert "refine_status" not in carried
        # the carried frame repeats the last refined output verbatim
        angle, dist = pose_distance(result.refined.pose_at(2),
                                    result.refined.pose_at(1))
        assert angle < 1e-9 and dist < 1e-12

        skipped = result.diagnostics[3]
        assert skipped["refine_skipped"] == "no segmented points"
        assert skipped["refined"] is False
        angle, dist = pose_distance(result.refined.pose_at(3),
                                    result.fused.pose_at(3))
        assert angle < 1e-9 and dist < 1e-12

        for f in (1, 4):
            assert result.diagnostics[f]["candidates"] == 4
            assert result.diagnostics[f]["inliers"] == 3

    def test_refinement_improves_fused_poses(self, scenario, box_sdf):
        frames, truth, cams, points_for_frame = scenario
        result = track_object(frames, cams, points_for_frame, box_sdf)
        refined_frames = [f for f in frames
                          if result.diagnostics[f]["refined"]]
        assert refined_frames == [0, 1, 4, 5]
        fused_err = []
        refined_err = []
        for f in refined_frames:
            diag = result.diagnostics[f]
            assert diag["refine_status"] == "ok"
            assert diag["refine_final_loss"] <= diag["refine_initial_loss"]
            fa, fd = pose_distance(result.fused.pose_at(f), truth[f])
            ra, rd = pose_distance(result.refined.pose_at(f), truth[f])
            fused_err.append((fa, fd))
            refined_err.append((ra, rd))
            assert ra <= 0.3
            assert rd <= 1e-3
        assert (np.mean([d for _, d in refined_err])
                < np.mean([d for _, d in fused_err]))
        assert (np.mean([a for a, _ in refined_err])
                < np.mean([a for a, _ in fused_err]))

    def test_lost_start_recovers_on_later_frames(self, box_sdf, box_mesh):
        rng = np.random.default_rng(29)
        truth = RigidTransform.from_rotvec(np.array([0.1, 0.2, 0.0]),
                                           np.array([0.3, -0.1, 0.25]))
        cams = {"cam0": PoseTrack(), "cam1": PoseTrack(), "cam2": PoseTrack()}
        for name, track in cams.items():
            track.append(0, None, "candidate")
            track.append(1, _noisy(truth, rng, 0.003, 0.0015), "candidate")
        samples = sample_surface(box_mesh, 500, rng)

        result = track_object([0, 1], cams, lambda f: truth.apply(samples),
                              box_sdf)
        assert result.fused.status[0] == STATUS_LOST
        assert result.fused.valid_frames() == [1]
        assert result.refined.valid_frames() == [1]
        assert result.diagnostics[0]["refined"] is False
        assert result.diagnostics[1]["fusion_status"] == STATUS_FUSED
