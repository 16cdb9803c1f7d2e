import numpy as np
import pytest

from stmgen.motion import (
    MotionSequence,
    Skeleton,
    axis_angle_to_matrix,
    decode_features,
    default_skeleton,
    encode_features,
    foot_contact_flags,
    forward_kinematics,
    markers,
    pose_dim,
    read_motion_json,
    write_motion_json,
)


def random_motion(rng, n=6, yaw_only_root=False):
    skel = default_skeleton()
    root = rng.standard_normal((n, 3)) * 0.5 + [0, 0, 0.8]
    rot = rng.standard_normal((n, skel.joint_count, 3)) * 0.3
    if yaw_only_root:
        rot[:, 0, :2] = 0.0
    return MotionSequence(root, rot, skel)


class TestForwardKinematics:
    def test_zero_pose_accumulates_offsets(self):
        skel = default_skeleton()
        pos = forward_kinematics(skel, [0, 0, 0], np.zeros((8, 3)))
        expect = np.zeros((8, 3))
        for j in range(1, 8):
            expect[j] = expect[skel.parents[j]] + skel.offsets[j]
        np.testing.assert_allclose(pos, expect, atol=1e-12)

    def test_rigid_translation(self):
        skel = default_skeleton()
        theta = np.random.default_rng(0).standard_normal((8, 3)) * 0.2
        p0 = forward_kinematics(skel, [0, 0, 0], theta)
        p1 = forward_kinematics(skel, [1, 0, 0], theta)
        np.testing.assert_allclose(p1 - p0, np.tile([1, 0, 0], (8, 1)), atol=1e-12)

    def test_root_yaw_quarter_turn(self):
        # joint at accumulated offset (1,0,0) from the root maps to (0,1,0)+T
        skel = Skeleton((-1, 0), np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        theta = np.zeros((2, 3))
        theta[0, 2] = np.pi / 2
        t = np.array([0.3, -0.2, 0.5])
        pos = forward_kinematics(skel, t, theta)
        # independent oracle: explicit rotation matrix product
        rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        np.testing.assert_allclose(pos[1], rz @ [1, 0, 0] + t, atol=1e-12)

    def test_malformed_tree_rejected(self):
        with pytest.raises(ValueError):
            Skeleton((-1, 2, 1), np.zeros((3, 3)))

    def test_rigidity_under_global_transform(self):
        rng = np.random.default_rng(1)
        skel = default_skeleton()
        theta = rng.standard_normal((8, 3)) * 0.3
        theta[0] = 0.0
        t = rng.standard_normal(3)
        p0 = forward_kinematics(skel, t, theta)
        # apply global yaw rotation R and translation v at the root
        ang = 1.234
        v = np.array([0.5, -1.0, 2.0])
        R = axis_angle_to_matrix(np.array([0, 0, ang]))
        theta_g = theta.copy()
        theta_g[0] = [0, 0, ang]
        p1 = forward_kinematics(skel, R @ t + v, theta_g)
        np.testing.assert_allclose(p1, p0 @ R.T + v, atol=1e-9)


class TestFeatureCodec:
    def test_standing_still(self):
        skel = default_skeleton()
        n = 5
        m = MotionSequence(np.tile([0, 0, 0.8], (n, 1)), np.zeros((n, 8, 3)), skel)
        f = encode_features(m)
        np.testing.assert_allclose(f[:, 0], 0)          # yaw velocity
        np.testing.assert_allclose(f[:, 1:3], 0)        # planar velocity
        np.testing.assert_allclose(f[:, 3], 0.8)        # height
        vel_block = f[:, 4 + 3 * 7: 4 + 3 * 7 + 24]
        np.testing.assert_allclose(vel_block, 0)

    def test_straight_walk_velocity(self):
        skel = default_skeleton()
        n = 8
        root = np.zeros((n, 3))
        root[:, 0] = np.arange(n) * 0.1   # 1 m/s at 10 fps
        root[:, 2] = 0.8
        m = MotionSequence(root, np.zeros((n, 8, 3)), skel)
        f = encode_features(m)
        np.testing.assert_allclose(f[:, 1], 0.1, atol=1e-12)
        np.testing.assert_allclose(f[:, 2], 0.0, atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        m = random_motion(rng, n=10, yaw_only_root=True)
        f = encode_features(m)
        root, joints, yaw = decode_features(
            f, root_init_pos=m.root_translation[0, :2], root_init_yaw=m.root_yaw[0])
        np.testing.assert_allclose(root, m.root_translation, atol=1e-6)
        np.testing.assert_allclose(joints, markers(m), atol=1e-6)
        np.testing.assert_allclose(yaw, m.root_yaw, atol=1e-6)

    def test_round_trip_general_root_rotation(self):
        # position reconstruction holds even with non-yaw root rotation
        rng = np.random.default_rng(8)
        m = random_motion(rng, n=6)
        f = encode_features(m)
        root, joints, _ = decode_features(
            f, root_init_pos=m.root_translation[0, :2], root_init_yaw=m.root_yaw[0])
        np.testing.assert_allclose(joints, markers(m), atol=1e-6)

    def test_single_frame_rejected(self):
        m = MotionSequence(np.array([[0, 0, 0.8]]), np.zeros((1, 8, 3)))
        with pytest.raises(ValueError):
            encode_features(m)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            decode_features(np.zeros((4, 50)), num_joints=8)

    def test_no_nan_for_finite_motion(self):
        rng = np.random.default_rng(9)
        f = encode_features(random_motion(rng, n=12))
        assert np.isfinite(f).all()
        assert f.shape[1] == pose_dim(8) == 51


class TestFootContacts:
    def test_planted_feet(self):
        skel = default_skeleton()
        n = 4
        m = MotionSequence(np.tile([0, 0, 0.8], (n, 1)), np.zeros((n, 8, 3)), skel)
        np.testing.assert_allclose(foot_contact_flags(m), 1.0)

    def test_jump_frame(self):
        skel = default_skeleton()
        root = np.tile([0, 0, 0.8], (4, 1)).astype(float)
        root[2, 2] = 1.3   # feet at 0.5 m on frame 2
        m = MotionSequence(root, np.zeros((4, 8, 3)), skel)
        flags = foot_contact_flags(m)
        assert (flags[2] == 0).all()

    def test_boundary_inclusive(self):
        # foot exactly at both thresholds -> flag 1 (<= comparisons)
        skel = default_skeleton()
        n = 3
        root = np.tile([0, 0, 0.88], (n, 1)).astype(float)  # feet at 0.08
        root[:, 0] = np.arange(n) * 0.05 / np.sqrt(1.0)     # speed exactly 0.05
        m = MotionSequence(root, np.zeros((n, 8, 3)), skel)
        pos = markers(m)[:, [4, 6]]
        speeds = np.linalg.norm(np.diff(pos, axis=0), axis=-1)  # oracle speeds
        np.testing.assert_allclose(speeds, 0.05, atol=1e-12)
        np.testing.assert_allclose(pos[..., 2], 0.08, atol=1e-12)
        np.testing.assert_allclose(foot_contact_flags(m), 1.0)

    def test_missing_foot_joints(self):
        skel = Skeleton((-1, 0), np.zeros((2, 3)))
        m = MotionSequence(np.zeros((3, 3)), np.zeros((3, 2, 3)), skel)
        with pytest.raises(ValueError):
            foot_contact_flags(m)


class TestMarkers:
    def test_static_pose_identical_frames(self):
        rng = np.random.default_rng(3)
        theta = rng.standard_normal((8, 3)) * 0.2
        m = MotionSequence(np.tile([1, 2, 0.8], (5, 1)),
                           np.tile(theta, (5, 1, 1)))
        mk = markers(m)
        for i in range(1, 5):
            np.testing.assert_allclose(mk[i], mk[0], atol=1e-12)

    def test_matches_per_frame_fk_oracle(self):
        rng = np.random.default_rng(4)
        m = random_motion(rng, n=7)
        mk = markers(m)
        for i in range(7):
            oracle = forward_kinematics(m.skeleton, m.root_translation[i],
                                        m.rotations[i])
            np.testing.assert_allclose(mk[i], oracle, atol=0)


class TestMotionJson:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(5)
        f = encode_features(random_motion(rng, n=6))
        p1 = tmp_path / "m1.json"
        p2 = tmp_path / "m2.json"
        write_motion_json(p1, f, root_init_pos=(1, 2, 0.8), root_init_yaw=0.3)
        feats, fps, J, (pos, yaw) = read_motion_json(p1)
        write_motion_json(p2, feats, fps=fps, num_joints=J,
                          root_init_pos=pos, root_init_yaw=yaw)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(feats, f)

    def test_bad_width_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"layout":"hml-lite-v1","fps":10,"num_frames":2,'
                     '"num_joints":8,"features":[[0,0],[0,0]],'
                     '"root_init":{"pos":[0,0,0],"yaw":0}}')
        with pytest.raises(ValueError):
            read_motion_json(p)
