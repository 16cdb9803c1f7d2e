"""Motion sequences: skeleton FK, pose-feature encode/decode, contacts.

Conventions: Z-up, meters, right-handed. Rotations are axis-angle vectors
(radians) per joint, relative to the parent; the root entry is the global
orientation. The per-frame feature layout "hml-lite-v1" is:

    [0]        root yaw angular velocity (rad/frame)
    [1:3]      root planar linear velocity in the yaw-local frame (m/frame)
    [3]        root height (m)
    [4:4+3(J-1)]   local joint positions of joints 1..J-1, yaw-local, rel. root
    [..:..+3J]     joint linear velocities, world frame (m/frame)
    [-2:]      foot contact flags (left, right)

At the default J=8 this gives d_pose = 51. Velocities are finite
differences to the next frame; the last frame repeats the previous value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LAYOUT_VERSION = "hml-lite-v1"
DEFAULT_FPS = 10.0


def axis_angle_to_matrix(aa):
    """Rodrigues formula; `aa` is (..., 3), output (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-12
    axis = np.where(small, 0.0, aa / np.where(small, 1.0, theta))
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def yaw_matrix(yaw):
    """2x2 planar rotation for a yaw angle (or array of angles)."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([np.stack([c, -s], axis=-1),
                     np.stack([s, c], axis=-1)], axis=-2)


@dataclass(frozen=True)
class Skeleton:
    """Joint tree: parent[0] == -1 (root), offsets in meters."""

    parents: tuple
    offsets: np.ndarray          # (J, 3) rest offsets from parent
    foot_joints: tuple = ()      # (left, right) joint indices

    def __post_init__(self):
        parents = tuple(self.parents)
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(parents[1:], start=1):
            if not (0 <= p < j):
                raise ValueError(f"parent of joint {j} must precede it, got {p}")
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.shape != (len(parents), 3) or not np.isfinite(offsets).all():
            raise ValueError("offsets must be (J, 3) finite")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def joint_count(self):
        return len(self.parents)


def default_skeleton():
    """8-joint toy chain: pelvis, spine, head, two 2-joint legs, arm marker.

    Standing with zero rotations and the root at z=0.8 puts both feet on
    the ground plane.
    """
    parents = (-1, 0, 1, 0, 3, 0, 5, 1)
    offsets = np.array([
        [0.0, 0.0, 0.0],     # 0 pelvis (root)
        [0.0, 0.0, 0.4],     # 1 spine
        [0.0, 0.0, 0.3],     # 2 head
        [0.0, 0.1, -0.4],    # 3 left knee
        [0.0, 0.0, -0.4],    # 4 left foot
        [0.0, -0.1, -0.4],   # 5 right knee
        [0.0, 0.0, -0.4],    # 6 right foot
        [0.0, 0.3, 0.1],     # 7 arm marker
    ])
    return Skeleton(parents, offsets, foot_joints=(4, 6))


ROOT_HEIGHT_STAND = 0.8


def forward_kinematics(skeleton, t_frame, theta_frame):
    """World joint positions (J, 3) for one frame.

    `t_frame` is the root translation; `theta_frame` is (J, 3) axis-angle,
    entry 0 being the global root orientation.
    """
    theta_frame = np.asarray(theta_frame, dtype=np.float64)
    J = skeleton.joint_count
    if theta_frame.shape != (J, 3):
        raise ValueError(f"expected ({J}, 3) rotations")
    rot = axis_angle_to_matrix(theta_frame)
    world_rot = np.empty((J, 3, 3))
    pos = np.empty((J, 3))
    world_rot[0] = rot[0]
    pos[0] = np.asarray(t_frame, dtype=np.float64)
    for j in range(1, J):
        p = skeleton.parents[j]
        pos[j] = pos[p] + world_rot[p] @ skeleton.offsets[j]
        world_rot[j] = world_rot[p] @ rot[j]
    return pos


def markers(motion, skeleton=None):
    """World joint positions per frame, (N, J, 3)."""
    skeleton = skeleton or motion.skeleton
    return np.stack([forward_kinematics(skeleton, motion.root_translation[i],
                                        motion.rotations[i])
                     for i in range(motion.frame_count)])


@dataclass
class MotionSequence:
    """Raw motion: root translation + per-joint axis-angle rotations."""

    root_translation: np.ndarray     # (N, 3)
    rotations: np.ndarray            # (N, J, 3)
    skeleton: Skeleton = field(default_factory=default_skeleton)
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.root_translation.ndim != 2 or self.root_translation.shape[1] != 3:
            raise ValueError("root_translation must be (N, 3)")
        if self.frame_count < 1:
            raise ValueError("need at least one frame")
        if self.rotations.shape != (self.frame_count, self.skeleton.joint_count, 3):
            raise ValueError("rotations must be (N, J, 3)")
        if not (np.isfinite(self.root_translation).all()
                and np.isfinite(self.rotations).all()):
            raise ValueError("non-finite motion data")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def frame_count(self):
        return self.root_translation.shape[0]

    @property
    def root_yaw(self):
        """Yaw extracted from the root axis-angle (assumed Z-aligned)."""
        return self.rotations[:, 0, 2]


def pose_dim(num_joints):
    return 1 + 2 + 1 + 3 * (num_joints - 1) + 3 * num_joints + 2


def foot_contact_flags(motion, velocity_threshold=0.05, height_threshold=0.08):
    """(N, 2) binary flags: foot slow AND low (<= comparisons)."""
    if velocity_threshold <= 0 or height_threshold <= 0:
        raise ValueError("thresholds must be positive")
    if len(motion.skeleton.foot_joints) != 2:
        raise ValueError("skeleton lacks designated foot joints")
    pos = markers(motion)[:, list(motion.skeleton.foot_joints)]  # (N, 2, 3)
    vel = np.zeros_like(pos)
    if motion.frame_count > 1:
        vel[:-1] = pos[1:] - pos[:-1]
        vel[-1] = vel[-2]
    speed = np.linalg.norm(vel, axis=-1)
    return ((speed <= velocity_threshold) & (pos[..., 2] <= height_threshold)
            ).astype(np.float64)


def encode_features(motion, contact_velocity_threshold=0.05,
                    contact_height_threshold=0.08):
    """Encode a motion into the hml-lite-v1 feature matrix (N, d_pose)."""
    N = motion.frame_count
    if N < 2:
        raise ValueError("encoding needs at least 2 frames")
    J = motion.skeleton.joint_count
    yaw = motion.root_yaw
    root = motion.root_translation
    pos = markers(motion)

    yaw_vel = np.zeros(N)
    yaw_vel[:-1] = yaw[1:] - yaw[:-1]
    yaw_vel[-1] = yaw_vel[-2]

    planar_vel = np.zeros((N, 2))
    d_xy = root[1:, :2] - root[:-1, :2]
    inv_rot = yaw_matrix(-yaw[:-1])
    planar_vel[:-1] = np.einsum("nij,nj->ni", inv_rot, d_xy)
    planar_vel[-1] = planar_vel[-2]

    local = pos[:, 1:] - root[:, None, :]          # (N, J-1, 3)
    inv_rot_all = yaw_matrix(-yaw)
    local_xy = np.einsum("nij,nkj->nki", inv_rot_all, local[..., :2])
    local = np.concatenate([local_xy, local[..., 2:]], axis=-1)

    joint_vel = np.zeros((N, J, 3))
    joint_vel[:-1] = pos[1:] - pos[:-1]
    joint_vel[-1] = joint_vel[-2]

    flags = foot_contact_flags(motion, contact_velocity_threshold,
                               contact_height_threshold)

    feats = np.concatenate([
        yaw_vel[:, None],
        planar_vel,
        root[:, 2:3],
        local.reshape(N, -1),
        joint_vel.reshape(N, -1),
        flags,
    ], axis=1)
    assert feats.shape[1] == pose_dim(J)
    return feats


def decode_features(features, root_init_pos=(0.0, 0.0), root_init_yaw=0.0,
                    num_joints=None):
    """Reconstruct root trajectory and world joint positions from features.

    Returns (root (N,3), joints (N,J,3), yaw (N,)). Joint 0 equals the
    root translation; joints 1..J-1 come from the local-position block.
    """
    features = np.asarray(features, dtype=np.float64)
    N, d = features.shape
    if num_joints is None:
        # invert d = 1+2+1+3(J-1)+3J+2
        num_joints = (d - 3) // 6
    if pose_dim(num_joints) != d:
        raise ValueError(f"feature width {d} does not match layout at J={num_joints}")
    J = num_joints

    yaw_vel = features[:, 0]
    planar_vel = features[:, 1:3]
    height = features[:, 3]
    local = features[:, 4:4 + 3 * (J - 1)].reshape(N, J - 1, 3)

    yaw = np.empty(N)
    yaw[0] = root_init_yaw
    yaw[1:] = root_init_yaw + np.cumsum(yaw_vel[:-1])

    rot = yaw_matrix(yaw)
    root = np.empty((N, 3))
    root[0, :2] = np.asarray(root_init_pos, dtype=np.float64)[:2]
    step = np.einsum("nij,nj->ni", rot[:-1], planar_vel[:-1])
    root[1:, :2] = root[0, :2] + np.cumsum(step, axis=0)
    root[:, 2] = height

    local_world_xy = np.einsum("nij,nkj->nki", rot, local[..., :2])
    joints = np.empty((N, J, 3))
    joints[:, 0] = root
    joints[:, 1:, :2] = root[:, None, :2] + local_world_xy
    joints[:, 1:, 2] = root[:, None, 2] + local[..., 2]
    return root, joints, yaw


# -- motion-json-v1 I/O --------------------------------------------------------


def write_motion_json(path, features, fps=DEFAULT_FPS, num_joints=8,
                      root_init_pos=(0.0, 0.0, 0.0), root_init_yaw=0.0):
    """Write the deterministic motion-json-v1 file format."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != pose_dim(num_joints):
        raise ValueError("feature width does not match num_joints")
    obj = {
        "layout": LAYOUT_VERSION,
        "fps": fps,
        "num_frames": int(features.shape[0]),
        "num_joints": int(num_joints),
        "features": [[float(v) for v in row] for row in features],
        "root_init": {"pos": [float(v) for v in root_init_pos],
                      "yaw": float(root_init_yaw)},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, separators=(",", ":"))
        f.write("\n")


def read_motion_json(path):
    """Read motion-json-v1; returns (features, fps, num_joints, root_init)."""
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    if obj.get("layout") != LAYOUT_VERSION:
        raise ValueError(f"unsupported motion layout: {obj.get('layout')!r}")
    features = np.asarray(obj["features"], dtype=np.float64)
    J = int(obj["num_joints"])
    if features.ndim != 2 or features.shape[1] != pose_dim(J):
        raise ValueError("feature width does not match declared num_joints")
    if features.shape[0] != int(obj["num_frames"]):
        raise ValueError("frame count mismatch")
    root_init = (np.asarray(obj["root_init"]["pos"], dtype=np.float64),
                 float(obj["root_init"]["yaw"]))
    return features, float(obj["fps"]), J, root_init
