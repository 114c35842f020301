import logging

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import scanbot.perception as pc
from scanbot.robot_core import Pose
from scanbot.rotations import quat_from_matrix, rotation_x


def make_skeleton(neck=(0.5, 0.0, 0.3), alpha_head=0.0, hand=(0.0, -0.7, 0.5)):
    neck = np.asarray(neck, dtype=float)
    return pc.Skeleton(neck_joint=neck, head_joint=neck + [0.2, 0.0, 0.0],
                       alpha_head=alpha_head, hand_position=np.asarray(hand))


def aligned_capture_pose(neck=(0.5, 0.0, 0.3), alpha_head_at_capture=0.0):
    """Capture pose whose x-axis follows the cervical axis and whose scan
    plane contains +z at the given capture head angle."""
    R_target = np.column_stack([[1.0, 0, 0], [0.0, 0, 1], [0.0, -1, 0]])
    R0 = R_target @ rotation_x(pc.ALPHA_ARTERY - alpha_head_at_capture)
    return Pose(np.asarray(neck, dtype=float), quat_from_matrix(R0))


def cylinder_cloud(radius=0.06, length=0.4, center=(0.5, 0.0, 0.3),
                   noise=0.0, count=6000, seed=0):
    pose = Pose(np.asarray(center, dtype=float), np.array([1.0, 0, 0, 0]))
    return pc.synth_neck_cloud(radius, length, pose, noise, count, seed=seed)


class TestScanFrame:
    def test_equal_angles_reproduce_capture_frame(self):
        sk = make_skeleton(alpha_head=pc.ALPHA_ARTERY)
        cap = Pose(np.array([0.7, 0.1, 0.5]),
                   Rotation.from_euler("zx", [0.4, 0.2]).as_quat(scalar_first=True))
        # align the capture x-axis with the cervical axis first
        R = cap.rotation()
        R[:, 0] = [1.0, 0.0, 0.0]
        R[:, 1] -= R[:, 1] @ R[:, 0] * R[:, 0]
        R[:, 1] /= np.linalg.norm(R[:, 1])
        R[:, 2] = np.cross(R[:, 0], R[:, 1])
        cap = Pose(cap.p, quat_from_matrix(R))
        frame = pc.scan_frame_from_skeleton(sk, cap)
        np.testing.assert_allclose(frame.rotation, cap.rotation(), atol=1e-12)
        np.testing.assert_allclose(frame.origin, sk.neck_joint, atol=1e-15)

    def test_quarter_turn_maps_y_to_capture_z(self):
        sk = make_skeleton(alpha_head=pc.ALPHA_ARTERY + np.pi / 2)
        cap = aligned_capture_pose(alpha_head_at_capture=pc.ALPHA_ARTERY)
        frame = pc.scan_frame_from_skeleton(sk, cap)
        np.testing.assert_allclose(frame.rotation[:, 1], cap.rotation()[:, 2],
                                   atol=1e-12)

    def test_head_turn_rolls_frame(self):
        cap = aligned_capture_pose()
        base = pc.scan_frame_from_skeleton(make_skeleton(alpha_head=0.0), cap)
        turned = pc.scan_frame_from_skeleton(make_skeleton(alpha_head=0.3), cap)
        # oracle: compose the baseline with an independent x-roll
        expected = base.rotation @ Rotation.from_euler("x", 0.3).as_matrix()
        np.testing.assert_allclose(turned.rotation, expected, atol=1e-12)

    def test_orthonormal_for_scripted_sweep(self):
        cap = aligned_capture_pose()
        for alpha in np.linspace(-0.6, 0.6, 25):
            f = pc.scan_frame_from_skeleton(make_skeleton(alpha_head=alpha), cap)
            assert np.abs(f.rotation @ f.rotation.T - np.eye(3)).max() < 1e-10
            assert abs(np.linalg.det(f.rotation) - 1.0) < 1e-10

    def test_degenerate_skeleton_rejected(self):
        with pytest.raises(ValueError):
            pc.Skeleton(neck_joint=np.zeros(3), head_joint=np.zeros(3),
                        alpha_head=0.0, hand_position=np.zeros(3))


class TestSynthCloud:
    def test_noiseless_points_on_exact_radius(self):
        cloud = cylinder_cloud(noise=0.0, count=2000)
        rel = cloud.points - [0.5, 0.0, 0.3]
        radial = np.hypot(rel[:, 1], rel[:, 2])
        np.testing.assert_allclose(radial, 0.06, atol=1e-12)

    def test_noise_standard_deviation(self):
        cloud = cylinder_cloud(noise=0.002, count=10000, seed=123)
        rel = cloud.points - [0.5, 0.0, 0.3]
        radial = np.hypot(rel[:, 1], rel[:, 2])
        sd = (radial - 0.06).std()
        assert 0.0018 <= sd <= 0.0022

    def test_reproducible_for_seed(self):
        a = cylinder_cloud(count=500, seed=9).points
        b = cylinder_cloud(count=500, seed=9).points
        assert np.array_equal(a, b)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            cylinder_cloud(count=0)


class TestSegmentCylinder:
    def frame(self):
        return pc.ScanFrame(np.eye(3), np.array([0.5, 0.0, 0.3]))

    def test_all_inside_is_identity(self):
        cloud = cylinder_cloud(count=500)
        seg = pc.segment_cylinder(cloud, self.frame(), r_cyl=0.2,
                                  x_top=0.3, x_bottom=-0.3)
        assert np.array_equal(seg.points, cloud.points)

    def test_boundary_point_kept(self):
        pts = np.array([[0.1, 0.15, 0.0], [0.1, 0.150001, 0.0]])
        cloud = pc.PointCloud(pts + [0.5, 0.0, 0.3])
        seg = pc.segment_cylinder(cloud, self.frame(), r_cyl=0.15,
                                  x_top=0.2, x_bottom=-0.2)
        assert len(seg) == 1  # closed region: the exact-boundary point stays

    def test_matches_brute_force_predicate(self, rng):
        pts = rng.uniform(-0.5, 0.5, size=(4000, 3)) + [0.5, 0.0, 0.3]
        cloud = pc.PointCloud(pts)
        frame = self.frame()
        seg = pc.segment_cylinder(cloud, frame, 0.15, x_top=0.1, x_bottom=-0.02)
        kept = []
        for p in pts:
            d = p - [0.5, 0.0, 0.3]
            if np.sqrt(d[1]**2 + d[2]**2) <= 0.15 and -0.02 <= d[0] <= 0.1:
                kept.append(p)
        np.testing.assert_array_equal(seg.points, np.array(kept))

    def test_empty_result_rejected(self):
        cloud = cylinder_cloud(count=100)
        with pytest.raises(ValueError, match="no neck"):
            pc.segment_cylinder(cloud, self.frame(), 0.001, x_top=5.0, x_bottom=4.0)


class TestMlsSmooth:
    def test_plane_reproduced(self, rng):
        pts = np.column_stack([rng.uniform(-0.1, 0.1, 800),
                               rng.uniform(-0.1, 0.1, 800),
                               np.zeros(800)])
        R = Rotation.from_euler("xy", [0.4, -0.3]).as_matrix()
        pts = pts @ R.T + [0.2, 0.1, 0.5]
        for degree in (1, 2):
            out = pc.mls_smooth(pc.PointCloud(pts), support_radius=0.03,
                                poly_degree=degree)
            assert len(out) == 800
            assert np.abs(out.points - pts).max() < 1e-9

    def test_cylinder_noise_reduction(self):
        cloud = cylinder_cloud(noise=0.002, count=10000, seed=7)
        out = pc.mls_smooth(cloud, support_radius=0.025, poly_degree=2)
        def rms_radial(points):
            rel = points - [0.5, 0.0, 0.3]
            return np.sqrt(np.mean((np.hypot(rel[:, 1], rel[:, 2]) - 0.06) ** 2))
        before = rms_radial(cloud.points)
        after = rms_radial(out.points)
        assert after <= 0.5 * before

    def test_smoothed_cloud_carries_normals(self):
        cloud = cylinder_cloud(count=3000)
        out = pc.mls_smooth(cloud, support_radius=0.025)
        assert out.normals is not None and out.normals.shape == out.points.shape
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0,
                                   atol=1e-12)

    def test_isolated_point_dropped_with_warning(self, caplog):
        pts = np.vstack([cylinder_cloud(count=1500).points,
                         [[9.0, 9.0, 9.0]]])
        with caplog.at_level(logging.WARNING, logger="scanbot.perception"):
            out = pc.mls_smooth(pc.PointCloud(pts), support_radius=0.025)
        assert len(out) == 1500
        assert any("dropped" in r.message for r in caplog.records)

    def test_collinear_neighborhood_dropped(self, caplog):
        line = np.column_stack([np.linspace(0, 0.1, 300), np.zeros(300), np.zeros(300)])
        with caplog.at_level(logging.WARNING, logger="scanbot.perception"), \
             pytest.raises(ValueError):
            pc.mls_smooth(pc.PointCloud(line), support_radius=0.03)

    def test_output_within_support_radius(self):
        cloud = cylinder_cloud(noise=0.002, count=4000, seed=3)
        out = pc.mls_smooth(cloud, support_radius=0.025)
        # projection cannot move a kept point farther than its support
        d = np.linalg.norm(out.points - cloud.points[:len(out)]
                           if len(out) == len(cloud) else out.points, axis=1)
        assert d.max() < 0.025 or len(out) != len(cloud)


class TestGenerateTrajectory:
    def setup_traj(self, noise=0.0, N=100, seed=0):
        cloud = cylinder_cloud(noise=noise, count=8000, seed=seed)
        smoothed = pc.mls_smooth(cloud, support_radius=0.025)
        frame = pc.ScanFrame(np.column_stack([[1.0, 0, 0], [0.0, 0, 1], [0.0, -1, 0]]),
                             np.array([0.5, 0.0, 0.3]))
        traj = pc.generate_trajectory(smoothed, frame, N, skin_offset=0.03,
                                      slab_half=0.004, x_range=(0.01, 0.15))
        return traj, frame

    def test_noiseless_positions_near_analytic_curve(self):
        traj, frame = self.setup_traj()
        # analytic: top line of the cylinder displaced 3 cm radially inward
        for pose in traj.poses:
            assert abs(pose.p[2] - (0.3 + 0.06 - 0.03)) < 2e-3
            assert abs(pose.p[1] - 0.0) < 2e-3

    def test_orientations_oppose_outward_normal(self):
        traj, frame = self.setup_traj()
        for pose in traj.poses:
            z_axis = pose.rotation()[:, 2]
            outward = np.array([0.0, 0.0, 1.0])  # at the cylinder top
            assert abs(z_axis @ outward + 1.0) < 1e-6

    def test_two_points_are_segment_endpoints(self):
        traj, frame = self.setup_traj(N=2)
        assert len(traj) == 2
        assert traj.poses[0].p[0] < traj.poses[1].p[0]
        span = traj.poses[1].p[0] - traj.poses[0].p[0]
        assert span > 0.12  # covers most of the requested x range

    def test_arc_length_spacing_uniform(self):
        traj, frame = self.setup_traj()
        pts = traj.positions()
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert gaps.max() < 0.02
        assert (gaps.max() - gaps.min()) / gaps.mean() < 0.05

    def test_too_few_slab_points_rejected(self):
        cloud = cylinder_cloud(count=60)
        smoothed = pc.mls_smooth(cloud, support_radius=0.08)
        frame = pc.ScanFrame(np.column_stack([[1.0, 0, 0], [0.0, 0, 1], [0.0, -1, 0]]),
                             np.array([0.5, 0.0, 0.3]))
        with pytest.raises(ValueError, match="scan plane"):
            pc.generate_trajectory(smoothed, frame, 10, slab_half=0.0005)


class TestIO:
    def test_xyz_round_trip(self, tmp_path, rng):
        cloud = pc.PointCloud(rng.normal(size=(50, 3)))
        path = tmp_path / "cloud.xyz"
        pc.save_xyz(cloud, path)
        loaded = pc.load_xyz(path)
        np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-15)

    def test_trajectory_csv(self, tmp_path):
        poses = [Pose(np.array([0.1 * i, 0.0, 0.3]), np.array([1.0, 0, 0, 0]))
                 for i in range(5)]
        traj = pc.ScanTrajectory(poses=poses, skin_offset=0.03)
        path = tmp_path / "traj.csv"
        traj.save_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t_index,px,py,pz,qw,qx,qy,qz"
        assert len(lines) == 6
        first = lines[1].split(",")
        assert int(first[0]) == 1 and float(first[4]) == 1.0
