"""Fixed 24-joint kinematic tree with SMPL joint naming.

Offsets are hand-chosen anthropometric bone vectors in millimetres for a
y-up, x-left, z-forward rest pose (arms stretched sideways). They are
version-pinned through ``SKELETON_VERSION`` and serialised with checkpoints.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .rotations import _back, _to_torch, aa_to_mat

SKELETON_VERSION = 1
NUM_JOINTS = 24

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

OFFSETS_MM = (
    (0.0, 0.0, 0.0),
    (70.0, -90.0, 0.0), (-70.0, -90.0, 0.0),
    (0.0, 110.0, -10.0),
    (40.0, -380.0, 0.0), (-40.0, -380.0, 0.0),
    (0.0, 135.0, 10.0),
    (-10.0, -400.0, -40.0), (10.0, -400.0, -40.0),
    (0.0, 55.0, 0.0),
    (20.0, -60.0, 120.0), (-20.0, -60.0, 120.0),
    (0.0, 215.0, -20.0),
    (75.0, 125.0, -10.0), (-75.0, 125.0, -10.0),
    (0.0, 110.0, 50.0),
    (120.0, 45.0, -10.0), (-120.0, 45.0, -10.0),
    (255.0, -15.0, -20.0), (-255.0, -15.0, -20.0),
    (250.0, 10.0, 0.0), (-250.0, 10.0, 0.0),
    (85.0, -10.0, -10.0), (-85.0, -10.0, -10.0),
)

# partial-body crops: everything above the hips, or above the knees
TO_HIPS = (0, 1, 2, 3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23)
TO_KNEES = tuple(sorted(TO_HIPS + (4, 5)))


@dataclass(frozen=True)
class Skeleton:
    parents: tuple
    offsets: np.ndarray
    names: tuple
    upper_body: dict = field(default_factory=dict)
    version: int = SKELETON_VERSION

    @property
    def num_joints(self):
        return len(self.parents)

    def levels(self):
        """Joint indices grouped by depth in the tree (root first)."""
        depth = [0] * self.num_joints
        for j, p in enumerate(self.parents):
            if p >= 0:
                depth[j] = depth[p] + 1
        return [[j for j in range(self.num_joints) if depth[j] == d] for d in range(max(depth) + 1)]

    def to_dict(self):
        return {
            "version": self.version,
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            parents=tuple(d["parents"]),
            offsets=np.asarray(d["offsets"], dtype=np.float64),
            names=tuple(d["names"]),
            upper_body={"to_hips": TO_HIPS, "to_knees": TO_KNEES},
            version=d.get("version", SKELETON_VERSION),
        )


def default_skeleton():
    offsets = np.array(OFFSETS_MM, dtype=np.float64)
    offsets.setflags(write=False)
    return Skeleton(
        parents=PARENTS,
        offsets=offsets,
        names=JOINT_NAMES,
        upper_body={"to_hips": TO_HIPS, "to_knees": TO_KNEES},
    )


@dataclass
class Pose:
    """One body pose: root orientation, 23 joint rotations, root translation."""

    global_orient: np.ndarray
    body: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64).reshape(3)
        self.body = np.asarray(self.body, dtype=np.float64).reshape(NUM_JOINTS - 1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @classmethod
    def from_array(cls, rotations, root_translation=None):
        rotations = np.asarray(rotations, dtype=np.float64).reshape(NUM_JOINTS, 3)
        return cls(rotations[0], rotations[1:],
                   np.zeros(3) if root_translation is None else root_translation)

    def rotations(self):
        """Axis-angle rotations of all 24 joints, shape (24, 3)."""
        return np.concatenate([self.global_orient[None], self.body], axis=0)


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: uniform scale then 2D offset."""

    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")


def mean_pose():
    return Pose(np.zeros(3), np.zeros((NUM_JOINTS - 1, 3)), np.zeros(3))


def forward_kinematics(skeleton, q, root_translation=None):
    """Joint positions in millimetres.

    ``q`` is a :class:`Pose`, axis-angle rotations ``(..., 24, 3)`` or
    rotation matrices ``(..., 24, 3, 3)``. Returns ``(..., 24, 3)`` with the
    array type of ``q`` (numpy for a Pose). Torch inputs stay differentiable.
    """
    if isinstance(q, Pose):
        root_translation = q.root_translation
        q = q.rotations()
    t, np_in = _to_torch(q)
    if t.shape[-1] == 3 and t.shape[-2] == skeleton.num_joints:
        mats = aa_to_mat(t)
    else:
        mats = t
    if mats.shape[-3:] != (skeleton.num_joints, 3, 3):
        raise ValueError(f"unexpected pose shape {tuple(t.shape)}")
    offsets = torch.tensor(np.array(skeleton.offsets), dtype=mats.dtype)
    batch = mats.shape[:-3]

    glob = [None] * skeleton.num_joints
    pos = [None] * skeleton.num_joints
    if root_translation is None:
        root = torch.zeros(batch + (3,), dtype=mats.dtype)
    else:
        root, _ = _to_torch(root_translation)
        root = root.to(mats.dtype).expand(batch + (3,))
    glob[0] = mats[..., 0, :, :]
    pos[0] = root
    # level by level so each depth is a single batched matmul
    for level in skeleton.levels()[1:]:
        idx = torch.tensor(level)
        par = [skeleton.parents[j] for j in level]
        g_par = torch.stack([glob[p] for p in par], dim=-3)
        p_par = torch.stack([pos[p] for p in par], dim=-2)
        g = g_par @ mats[..., idx, :, :]
        p = p_par + (g_par @ offsets[idx][..., None])[..., 0]
        for k, j in enumerate(level):
            glob[j] = g[..., k, :, :]
            pos[j] = p[..., k, :]
    return _back(torch.stack(pos, dim=-2), np_in)


def project_weak_perspective(p, camera):
    """Orthographic drop of z, then ``scale * (x, y) + (tx, ty)``."""
    t, np_in = _to_torch(p)
    off = torch.tensor([camera.tx, camera.ty], dtype=t.dtype)
    return _back(camera.scale * t[..., :2] + off, np_in)
