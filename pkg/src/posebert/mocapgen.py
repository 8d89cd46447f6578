"""Procedural motion capture: smooth random pose sequences and their file format.

Each sequence is a chain of random keyposes joined by per-joint geodesic
interpolation with smoothstep timing, plus a slow sinusoidal root drift.
Keyposes are drawn per joint inside anatomical boxes (radians, per axis in
the joint's parent frame; x = body left, y = up, z = forward). Right-side
limits are the mirror image of the left ones.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ParseError, TooShort, UnsupportedVersion
from .rotations import aa_to_mat, mat_to_aa
from .skeleton import JOINT_NAMES, NUM_JOINTS

FORMAT_VERSION = 1

_LEFT_LIMITS = {
    "pelvis": ((-0.3, -1.0, -0.3), (0.3, 1.0, 0.3)),
    "left_hip": ((-1.6, -0.4, -0.2), (0.4, 0.4, 0.6)),
    "spine1": ((-0.3, -0.3, -0.2), (0.5, 0.3, 0.2)),
    "left_knee": ((0.0, -0.05, -0.05), (2.0, 0.05, 0.05)),
    "spine2": ((-0.3, -0.3, -0.2), (0.5, 0.3, 0.2)),
    "left_ankle": ((-0.5, -0.2, -0.2), (0.5, 0.2, 0.2)),
    "spine3": ((-0.3, -0.3, -0.2), (0.5, 0.3, 0.2)),
    "left_foot": ((-0.2, -0.05, -0.05), (0.2, 0.05, 0.05)),
    "neck": ((-0.4, -0.5, -0.3), (0.4, 0.5, 0.3)),
    "left_collar": ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.3)),
    "head": ((-0.4, -0.6, -0.3), (0.4, 0.6, 0.3)),
    "left_shoulder": ((-0.6, -1.2, -1.4), (0.6, 0.8, 0.6)),
    "left_elbow": ((-0.1, -2.2, -0.1), (0.1, 0.0, 0.1)),
    "left_wrist": ((-0.5, -0.3, -0.6), (0.5, 0.3, 0.6)),
    "left_hand": ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2)),
}


def _joint_limits():
    lo = np.zeros((NUM_JOINTS, 3))
    hi = np.zeros((NUM_JOINTS, 3))
    for j, name in enumerate(JOINT_NAMES):
        if name in _LEFT_LIMITS:
            lo[j], hi[j] = _LEFT_LIMITS[name]
        else:
            # mirror across the sagittal plane: (x, y, z) -> (x, -y, -z)
            l, h = (np.array(v) for v in _LEFT_LIMITS[name.replace("right_", "left_")])
            lo[j] = (l[0], -h[1], -h[2])
            hi[j] = (h[0], -l[1], -l[2])
    return lo, hi


JOINT_LIMITS_LO, JOINT_LIMITS_HI = _joint_limits()


def default_joint_ranges():
    """Largest reachable axis-angle magnitude per joint, capped at pi."""
    corner = np.maximum(np.abs(JOINT_LIMITS_LO), np.abs(JOINT_LIMITS_HI))
    return np.minimum(np.linalg.norm(corner, axis=1), np.pi)


@dataclass
class GeneratorConfig:
    n_sequences: int = 64
    frames_per_sequence: int = 96
    fps: float = 30.0
    keyposes_min: int = 4
    keyposes_max: int = 8
    joint_angle_range: list = field(default_factory=lambda: default_joint_ranges().tolist())
    coverage: float = 1.0
    root_drift_amplitude: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 0 or self.frames_per_sequence < 2:
            raise ValueError("n_sequences must be >= 0 and frames_per_sequence >= 2")
        if not 2 <= self.keyposes_min <= self.keyposes_max:
            raise ValueError("need 2 <= keyposes_min <= keyposes_max")
        rng = np.asarray(self.joint_angle_range, dtype=float)
        if rng.shape != (NUM_JOINTS,) or np.any(rng <= 0) or np.any(rng > np.pi):
            raise ValueError("joint_angle_range must hold 24 values in (0, pi]")
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must be in (0, 1]")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PoseSequence:
    """``rotations`` (F, 24, 3) axis-angle; ``translation`` (F, 3) mm or None."""

    name: str
    rotations: np.ndarray
    translation: np.ndarray = None
    fps: float = 30.0
    split: str = ""

    @property
    def n_frames(self):
        return len(self.rotations)


@dataclass
class MotionDataset:
    sequences: list
    fps: float = 30.0
    provenance: str = ""

    def __len__(self):
        return len(self.sequences)

    @property
    def n_frames(self):
        return sum(s.n_frames for s in self.sequences)

    def by_name(self):
        return {s.name: s for s in self.sequences}

    def all_frames(self):
        if not self.sequences:
            return np.zeros((0, NUM_JOINTS, 3))
        return np.concatenate([s.rotations for s in self.sequences])


def sample_keyposes(n, rng, coverage=1.0, ranges=None):
    """``n`` random poses (n, 24, 3) inside the joint boxes scaled by ``coverage``."""
    ranges = default_joint_ranges() if ranges is None else np.asarray(ranges)
    u = rng.uniform(JOINT_LIMITS_LO, JOINT_LIMITS_HI, size=(n, NUM_JOINTS, 3)) * coverage
    mag = np.linalg.norm(u, axis=-1, keepdims=True)
    cap = (ranges * coverage)[:, None]
    return np.where(mag > cap, u * cap / np.maximum(mag, 1e-12), u)


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def interpolate_keyposes(keys, key_frames, n_frames):
    """Per-joint geodesic interpolation between keyposes, eased in and out.

    ``keys`` (K, 24, 3) axis-angle at integer frames ``key_frames``; returns
    (n_frames, 24, 3) canonical axis-angle that hits each keypose exactly.
    """
    R = aa_to_mat(keys)                                  # K, J, 3, 3
    rel = np.swapaxes(R[:-1], -1, -2) @ R[1:]            # K-1, J, 3, 3
    log_rel = mat_to_aa(rel)                             # K-1, J, 3
    f = np.arange(n_frames)
    seg = np.clip(np.searchsorted(key_frames, f, side="right") - 1, 0, len(keys) - 2)
    s = (f - key_frames[seg]) / (key_frames[seg + 1] - key_frames[seg])
    e = _smoothstep(s)
    step = aa_to_mat(log_rel[seg] * e[:, None, None])    # F, J, 3, 3
    mats = R[seg] @ step
    out = mat_to_aa(mats)
    # keypose frames exactly
    out[key_frames] = mat_to_aa(R)
    return out


def generate_sequence(rng, cfg, name="seq"):
    F = cfg.frames_per_sequence
    k = int(rng.integers(cfg.keyposes_min, cfg.keyposes_max + 1))
    k = min(k, F)
    keys = sample_keyposes(k, rng, cfg.coverage, cfg.joint_angle_range)
    key_frames = np.round(np.linspace(0, F - 1, k)).astype(int)
    rot = interpolate_keyposes(keys, key_frames, F)
    t = np.arange(F) / cfg.fps
    freq = rng.uniform(0.1, 0.5, size=(2, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(2, 3))
    amp = cfg.root_drift_amplitude * np.array([1.0, 0.15, 1.0]) / 2
    trans = sum(amp * np.sin(2 * np.pi * freq[i] * t[:, None] + phase[i]) for i in range(2))
    return PoseSequence(name, rot, trans, cfg.fps)


def generate_dataset(cfg, rng=None):
    """Deterministic under ``cfg.seed``: sequence i uses its own derived seed."""
    seqs = []
    for i in range(cfg.n_sequences):
        r = np.random.default_rng([cfg.seed, i]) if rng is None else rng
        seqs.append(generate_sequence(r, cfg, name=f"seq{i:05d}"))
    return MotionDataset(seqs, cfg.fps, provenance=cfg.digest())


def subsample_fps(dataset, factor, min_length=1):
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be a positive integer")
    factor = int(factor)
    out = []
    for s in dataset.sequences:
        rot = s.rotations[::factor]
        if len(rot) < min_length:
            raise TooShort(f"{s.name}: {len(rot)} frames after subsampling, need {min_length}")
        tr = None if s.translation is None else s.translation[::factor]
        out.append(replace(s, rotations=rot, translation=tr, fps=s.fps / factor))
    return MotionDataset(out, dataset.fps / factor, dataset.provenance)


def split(dataset, val_fraction, seed=0):
    """Sequence-level split; membership depends only on names and the seed."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    names = sorted(s.name for s in dataset.sequences)
    perm = np.random.default_rng(seed).permutation(len(names))
    n_val = int(round(val_fraction * len(names)))
    val_names = {names[i] for i in perm[:n_val]}
    train, val = [], []
    for s in dataset.sequences:
        if s.name in val_names:
            val.append(replace(s, split="val"))
        else:
            train.append(replace(s, split="train"))
    return (MotionDataset(train, dataset.fps, dataset.provenance),
            MotionDataset(val, dataset.fps, dataset.provenance))


# ---------------------------------------------------------------------------
# sequence files
# ---------------------------------------------------------------------------
#
# line 1   {"format": "posebert-sequences", "format_version": 1, "fps": 30.0,
#           "joint_count": 24, "rotation_repr": "axis_angle", ...}
# then per sequence one JSON record
#          {"sequence": "seq00000", "frames": 96, "translation": true, "split": "train"}
# followed by one line per frame: 72 axis-angle values (joint-major, x y z),
# then 3 root-translation values in mm when "translation" is true.
# Values are space separated and written with repr(), which round-trips
# float64 exactly.

def write_sequences(dataset, path, extra_header=None):
    header = {
        "format": "posebert-sequences",
        "format_version": FORMAT_VERSION,
        "fps": dataset.fps,
        "joint_count": NUM_JOINTS,
        "rotation_repr": "axis_angle",
        "provenance": dataset.provenance,
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in dataset.sequences:
            has_t = s.translation is not None
            rec = {"sequence": s.name, "frames": s.n_frames, "translation": has_t, "split": s.split}
            fh.write(json.dumps(rec) + "\n")
            rows = s.rotations.reshape(s.n_frames, -1)
            if has_t:
                rows = np.concatenate([rows, s.translation], axis=1)
            for row in rows:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_header(path):
    with open(path) as fh:
        first = fh.readline()
    return _parse_header(first) if first.strip() else {}


def _parse_header(line, lineno=1):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not a JSON record ({exc.msg})", lineno) from None
    if not isinstance(header, dict) or header.get("format") != "posebert-sequences":
        raise ParseError("not a posebert sequence file", lineno)
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"sequence format version {header.get('format_version')!r}")
    if header.get("joint_count") != NUM_JOINTS or header.get("rotation_repr") != "axis_angle":
        raise ParseError("expected 24 joints in axis_angle", lineno)
    return header


def read_sequences(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not any(l.strip() for l in lines):
        return MotionDataset([], 30.0)
    header = _parse_header(lines[0])
    fps = float(header["fps"])
    seqs = []
    i = 1
    while i < len(lines):
        lineno = i + 1
        if not lines[i].strip():
            i += 1
            continue
        try:
            rec = json.loads(lines[i])
            name, n, has_t = rec["sequence"], int(rec["frames"]), bool(rec["translation"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise ParseError("expected a sequence record", lineno) from None
        width = NUM_JOINTS * 3 + (3 if has_t else 0)
        rows = np.empty((n, width))
        for f in range(n):
            i += 1
            if i >= len(lines):
                raise ParseError(f"sequence {name!r} ends after {f} of {n} frames", i)
            parts = lines[i].split()
            if len(parts) != width:
                raise ParseError(f"expected {width} values, found {len(parts)}", i + 1)
            try:
                rows[f] = [float(v) for v in parts]
            except ValueError:
                raise ParseError("malformed number", i + 1) from None
            if not np.all(np.isfinite(rows[f])):
                raise ParseError("non-finite value", i + 1)
        rot = rows[:, : NUM_JOINTS * 3].reshape(n, NUM_JOINTS, 3)
        tr = rows[:, NUM_JOINTS * 3:] if has_t else None
        seqs.append(PoseSequence(name, rot, tr, fps, rec.get("split", "")))
        i += 1
    return MotionDataset(seqs, fps, header.get("provenance", ""))
