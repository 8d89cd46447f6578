"""Rendering-parameter sampler: camera orientation, crops, texture/background ids.

Nothing is rasterised. The sampler emits scene descriptions (JSON lines)
for an external renderer.

Axis conventions: world is y-up. The camera orientation is the intrinsic
composition yaw -> pitch -> roll, i.e. ``R = R_y(yaw) R_x(pitch) R_z(roll)``:
yaw turns about the vertical world axis, pitch about the camera x axis and
roll about the camera z (viewing) axis. At identity the camera looks along
the horizontal world z axis, so the roll axis is horizontal::

        y (up)
        |
        |____ x          camera looks along +z, roll spins about z,
       /                 pitch tilts about x, yaw turns about y
      z
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParseError, UnsupportedVersion
from .skeleton import Camera, default_skeleton, forward_kinematics, project_weak_perspective

YAW_RANGE = 180.0
PITCH_RANGE = 45.0
ROLL_RANGE = 15.0
PARTIAL_PROB = 0.2
CROP_PADDING = 1.2
SCENE_SCHEMA_VERSION = 1


@dataclass
class CameraSample:
    yaw: float
    pitch: float
    roll: float
    translation: tuple = (0.0, 0.0, 4000.0)

    def __post_init__(self):
        if not (abs(self.yaw) <= YAW_RANGE and abs(self.pitch) <= PITCH_RANGE and abs(self.roll) <= ROLL_RANGE):
            raise ValueError("camera angles outside the sampling ranges")

    def rotation(self):
        return camera_rotation(self.yaw, self.pitch, self.roll)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def camera_rotation(yaw, pitch, roll):
    """Camera-to-world rotation from Tait-Bryan angles in degrees."""
    y, p, r = np.deg2rad([yaw, pitch, roll])
    return _ry(y) @ _rx(p) @ _rz(r)


def sample_camera(rng):
    """Independent uniform yaw/pitch/roll on the fixed ranges, plus a distance."""
    yaw = float(rng.uniform(-YAW_RANGE, YAW_RANGE))
    pitch = float(rng.uniform(-PITCH_RANGE, PITCH_RANGE))
    roll = float(rng.uniform(-ROLL_RANGE, ROLL_RANGE))
    t = (float(rng.uniform(-200, 200)), float(rng.uniform(-200, 200)), float(rng.uniform(2500, 6000)))
    return CameraSample(yaw, pitch, roll, t)


@dataclass
class CropSpec:
    bbox: tuple
    partial: bool
    subset_used: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError("empty crop box")
        if self.partial == (self.subset_used == "full"):
            raise ValueError("partial crops need a body subset, full crops need 'full'")

    def contains(self, pts):
        pts = np.asarray(pts)
        x0, y0, x1, y1 = self.bbox
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def crop_box(points, padding=CROP_PADDING):
    """Tight box around ``points`` scaled by ``padding`` about its centre."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(0), pts.max(0)
    c = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * padding, 1e-6)
    return (float(c[0] - half[0]), float(c[1] - half[1]), float(c[0] + half[0]), float(c[1] + half[1]))


def sample_crop(joints2d, rng, skeleton=None, partial_prob=PARTIAL_PROB, padding=CROP_PADDING):
    """Full-body box, or with probability ``partial_prob`` an upper-body box
    (to the hips or to the knees with equal odds)."""
    skeleton = skeleton or default_skeleton()
    joints2d = np.asarray(joints2d, dtype=np.float64)
    if rng.random() < partial_prob:
        subset = "to_hips" if rng.random() < 0.5 else "to_knees"
        pts = joints2d[list(skeleton.upper_body[subset])]
        return CropSpec(crop_box(pts, padding), True, subset)
    return CropSpec(crop_box(joints2d, padding), False, "full")


@dataclass
class SceneDescription:
    pose_ref: dict
    camera: CameraSample
    texture_id: int
    background_id: int
    crop: CropSpec

    def to_record(self):
        cam = asdict(self.camera)
        cam["translation"] = list(cam["translation"])
        crop = asdict(self.crop)
        crop["bbox"] = list(crop["bbox"])
        return {"pose_ref": self.pose_ref, "camera": cam, "texture_id": self.texture_id,
                "background_id": self.background_id, "crop": crop}


def project_pose(rotations, camera, skeleton=None, focal=1000.0, image_size=224):
    """2D joints of a posed body seen by ``camera`` (weak perspective, image units)."""
    skeleton = skeleton or default_skeleton()
    p = forward_kinematics(skeleton, np.asarray(rotations))
    p_cam = (p - p[0]) @ camera.rotation()  # world -> camera: R^T p
    scale = focal / camera.translation[2]
    u0 = image_size / 2 + focal * camera.translation[0] / camera.translation[2]
    v0 = image_size / 2 + focal * camera.translation[1] / camera.translation[2]
    return project_weak_perspective(p_cam, Camera(scale, u0, v0))


def emit_scenes(dataset, n, texture_count, background_count, seed, path, skeleton=None, extra_header=None):
    """Write ``n`` scene records. Record ``i`` draws from its own generator
    seeded with ``(seed, i)``, so the file is byte-identical for equal inputs."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if texture_count < 1 or background_count < 1:
        raise ValueError("texture_count and background_count must be >= 1")
    skeleton = skeleton or default_skeleton()
    header = {"schema": "posebert-scenes", "schema_version": SCENE_SCHEMA_VERSION, "n": n,
              "texture_count": texture_count, "background_count": background_count,
              "dataset": dataset.provenance, "seed": seed}
    if extra_header:
        header.update(extra_header)
    frames = np.array([s.n_frames for s in dataset.sequences])
    cum = np.concatenate([[0], np.cumsum(frames)])
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            k = int(rng.integers(0, cum[-1]))
            s = int(np.searchsorted(cum, k, side="right") - 1)
            f = int(k - cum[s])
            seq = dataset.sequences[s]
            cam = sample_camera(rng)
            j2d = project_pose(seq.rotations[f], cam, skeleton)
            scene = SceneDescription(
                pose_ref={"dataset": dataset.provenance, "sequence": seq.name, "frame": f},
                camera=cam,
                texture_id=int(rng.integers(0, texture_count)),
                background_id=int(rng.integers(0, background_count)),
                crop=sample_crop(j2d, rng, skeleton),
            )
            fh.write(json.dumps(scene.to_record(), sort_keys=True) + "\n")


def _json_line(line, lineno):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not a JSON record ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("expected a JSON object", lineno)
    return rec


def read_scenes(path):
    """Returns ``(header, records)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty scene file", 1)
    header = _json_line(lines[0], 1)
    if header.get("schema") != "posebert-scenes":
        raise ParseError("not a posebert scene file", 1)
    if header.get("schema_version") != SCENE_SCHEMA_VERSION:
        raise UnsupportedVersion(f"scene schema version {header.get('schema_version')!r}")
    return header, [_json_line(l, i + 2) for i, l in enumerate(lines[1:]) if l.strip()]
