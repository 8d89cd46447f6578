"""Masked-modeling training of PoseBERT on pose sequences.

One iteration: sample T-frame windows, corrupt the inputs (Gaussian noise on
axis-angle, random poses or random joints), mask frames, run the model and
compare its output with the clean windows through a 6D pose term and a 3D
keypoint term. Targets are never corrupted or masked.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointIOError, CorruptFile, NumericError, VersionMismatch
from .model import FrameMask, PoseBertConfig, PoseBertModel
from .numerics import ParamStore
from .rotations import aa_to_mat, aa_to_rot6d, mat_to_aa, random_rotations, rot6d_to_mat
from .skeleton import NUM_JOINTS, Skeleton, default_skeleton, forward_kinematics

CORRUPTIONS = ("none", "gaussian", "random_pose", "random_joint")


@dataclass
class TrainConfig:
    batch_size: int = 64
    iterations: int = 14000
    lr: float = 3e-5
    lr_decay_steps: list = field(default_factory=lambda: [10000, 12000])
    lr_decay_factor: float = 10.0
    mask_ratio: float = 0.125
    noise_std: float = 0.05
    corruption: str = "gaussian"
    corruption_p: float = 0.05
    w_pose: float = 1.0
    w_kp: float = 1.0
    seed: int = 0
    fps_subsample: int = 1
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.noise_std < 0 or self.w_pose < 0 or self.w_kp < 0:
            raise ValueError("noise_std and loss weights must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.corruption not in CORRUPTIONS:
            raise ValueError(f"corruption must be one of {CORRUPTIONS}")
        if not 0 <= self.corruption_p <= 1:
            raise ValueError("corruption_p must be in [0, 1]")
        if self.batch_size < 1 or self.iterations < 0 or self.fps_subsample < 1:
            raise ValueError("batch_size >= 1, iterations >= 0 and fps_subsample >= 1 required")

    def lr_at(self, step):
        """Step schedule: divided by ``lr_decay_factor`` at each decay step."""
        n = sum(step >= s for s in self.lr_decay_steps)
        return self.lr / self.lr_decay_factor ** n


# noise preset matching the spread of image-based estimator errors
NOISE_PRESET_WIDE = 0.10


# ---------------------------------------------------------------------------
# masking and corruption
# ---------------------------------------------------------------------------

def sample_mask(T, mask_ratio, rng):
    """Bernoulli(mask_ratio) per frame; an all-masked draw is redrawn."""
    if not 0 <= mask_ratio < 1:
        raise ValueError("mask_ratio must be in [0, 1)")
    while True:
        visible = rng.random(T) >= mask_ratio
        if visible.any():
            return FrameMask(visible)


def add_gaussian_noise(rotations, sigma, rng):
    """i.i.d. N(0, sigma^2) on every axis-angle component, root included."""
    rotations = np.asarray(rotations, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return rotations.copy()
    return rotations + rng.normal(0.0, sigma, size=rotations.shape)


def corrupt_random_poses(rotations, p, pose_pool, rng):
    """Replace each frame of ``(..., 24, 3)`` by a pool pose with probability p.

    Returns the corrupted copy and the boolean replacement map ``(...,)``.
    """
    rotations = np.array(rotations, dtype=np.float64)
    hit = rng.random(rotations.shape[:-2]) < p
    n = int(hit.sum())
    if n:
        rotations[hit] = pose_pool[rng.integers(0, len(pose_pool), n)]
    return rotations, hit


def corrupt_random_joints(rotations, p, rng):
    """Replace each (frame, joint) rotation by a Haar-uniform one with probability p."""
    rotations = np.array(rotations, dtype=np.float64)
    hit = rng.random(rotations.shape[:-1]) < p
    n = int(hit.sum())
    if n:
        rotations[hit] = mat_to_aa(random_rotations(n, rng))
    return rotations, hit


@dataclass
class TrainingBatch:
    clean: torch.Tensor        # B, T, 144
    corrupted: torch.Tensor    # B, T, 144
    visible: torch.Tensor      # B, T bool
    clean_aa: np.ndarray = None
    clean_joints: torch.Tensor = None  # B, T, 24, 3 metres


def to_6d(rotations, dtype=torch.float32):
    """Axis-angle ``(..., 24, 3)`` -> flat 6D ``(..., 144)`` tensor."""
    r6 = aa_to_rot6d(np.asarray(rotations, dtype=np.float64))
    return torch.as_tensor(r6.reshape(r6.shape[:-2] + (NUM_JOINTS * 6,)), dtype=dtype)


def corrupt(clean_aa, cfg, rng, pose_pool=None):
    if cfg.corruption == "gaussian":
        return add_gaussian_noise(clean_aa, cfg.noise_std, rng)
    if cfg.corruption == "random_pose":
        return corrupt_random_poses(clean_aa, cfg.corruption_p, pose_pool, rng)[0]
    if cfg.corruption == "random_joint":
        return corrupt_random_joints(clean_aa, cfg.corruption_p, rng)[0]
    return np.array(clean_aa, dtype=np.float64)


class WindowSampler:
    """Uniform sampling over all (sequence, start) pairs, no wrap-around."""

    def __init__(self, dataset, T):
        self.rotations = [s.rotations for s in dataset.sequences if s.n_frames >= T]
        if not self.rotations:
            raise ValueError(f"no sequence has at least {T} frames")
        self.T = T
        counts = np.array([len(r) - T + 1 for r in self.rotations])
        self.cum = np.concatenate([[0], np.cumsum(counts)])
        self.pool = np.concatenate(self.rotations)

    def __len__(self):
        return int(self.cum[-1])

    def window(self, k):
        s = int(np.searchsorted(self.cum, k, side="right") - 1)
        start = int(k - self.cum[s])
        return self.rotations[s][start:start + self.T]

    def sample(self, n, rng):
        return np.stack([self.window(k) for k in rng.integers(0, len(self), n)])


def make_batch(sampler, cfg, rng, dtype=torch.float32, skeleton=None):
    clean = sampler.sample(cfg.batch_size, rng)
    noisy = corrupt(clean, cfg, rng, sampler.pool)
    vis = np.stack([sample_mask(sampler.T, cfg.mask_ratio, rng).visible for _ in range(cfg.batch_size)])
    target = to_6d(clean, dtype)
    with torch.no_grad():
        joints = joints_from_6d(target, skeleton or default_skeleton()) if cfg.w_kp else None
    return TrainingBatch(target, to_6d(noisy, dtype), torch.as_tensor(vis), clean, joints)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    pose: torch.Tensor
    kp: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {"pose_loss": float(self.pose.detach()), "kp_loss": float(self.kp.detach()),
                "total": float(self.total.detach())}


def joints_from_6d(x, skeleton, translation=None):
    """Flat 6D ``(..., 144)`` -> joint positions in metres ``(..., 24, 3)``."""
    mats = rot6d_to_mat(x.reshape(x.shape[:-1] + (NUM_JOINTS, 6)), check=False)
    return forward_kinematics(skeleton, mats, translation) / 1000.0


def compute_loss(pred, target, skeleton=None, w_pose=1.0, w_kp=1.0,
                 pred_translation=None, target_translation=None, target_joints=None):
    """Mean-square 6D error plus mean squared 3D joint distance (metres).

    Both terms average over every frame, masked or not. Translations (mm)
    only enter the keypoint term.
    """
    skeleton = skeleton or default_skeleton()
    pose = ((pred - target) ** 2).mean()
    if w_kp:
        pj = joints_from_6d(pred, skeleton, pred_translation)
        tj = target_joints if target_joints is not None else joints_from_6d(target, skeleton, target_translation)
        kp = ((pj - tj) ** 2).sum(-1).mean()
    else:
        kp = torch.zeros((), dtype=pred.dtype)
    return LossReport(pose, kp, w_pose * pose + w_kp * kp)


def model_loss(model, batch, cfg, skeleton=None):
    if model.cfg.deep_supervision:
        _, layers = model(batch.corrupted, batch.visible, return_all=True)
        reports = [compute_loss(t, batch.clean, skeleton, cfg.w_pose, cfg.w_kp,
                                target_joints=batch.clean_joints) for t in layers]
        n = len(reports)
        return LossReport(sum(r.pose for r in reports) / n, sum(r.kp for r in reports) / n,
                          sum(r.total for r in reports) / n)
    pred = model(batch.corrupted, batch.visible)
    return compute_loss(pred, batch.clean, skeleton, cfg.w_pose, cfg.w_kp, target_joints=batch.clean_joints)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over the trainable entries of a ParamStore."""

    def __init__(self, params, lr=3e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    @torch.no_grad()
    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.trainable_items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))


def adam_step(params, state, lr=None):
    """Functional alias: one update with the gradients stored on ``params``."""
    state.step(lr)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: PoseBertModel
    log: list
    steps: int


def train(model, dataset, cfg, skeleton=None, log_fn=None, probe=None, start_step=0):
    """Train ``model`` in place; deterministic under ``cfg.seed``.

    ``log_fn`` receives each log record; ``probe`` (a TrainingBatch) adds
    its loss to the record as ``probe_loss``. ``start_step`` continues an
    earlier run: batches and learning rates match the uninterrupted run,
    but Adam moments start from zero.
    """
    skeleton = skeleton or default_skeleton()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.fps_subsample > 1:
        from .mocapgen import subsample_fps

        dataset = subsample_fps(dataset, cfg.fps_subsample, model.cfg.seq_len)
    log = []
    if cfg.iterations <= start_step:
        return TrainResult(model, log, start_step)
    sampler = WindowSampler(dataset, model.cfg.seq_len)
    opt = Adam(model.params, cfg.lr)
    for step in range(start_step, cfg.iterations):
        rng = np.random.default_rng([cfg.seed, step])
        batch = make_batch(sampler, cfg, rng, model.dtype, skeleton)
        lr = cfg.lr_at(step)
        model.params.zero_grad()
        report = model_loss(model, batch, cfg, skeleton)
        if not torch.isfinite(report.total):
            raise NumericError(f"non-finite loss at iteration {step}")
        report.total.backward()
        opt.step(lr)
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            rec = {"step": step, **report.as_floats(), "lr": lr}
            if probe is not None:
                with torch.no_grad():
                    rec["probe_loss"] = float(model_loss(model, probe, cfg, skeleton).total)
            log.append(rec)
            if log_fn:
                log_fn(rec)
    return TrainResult(model, log, cfg.iterations)


LOG_COLUMNS = ("step", "pose_loss", "kp_loss", "total", "lr")


def format_log_line(rec):
    return ",".join(repr(rec[c]) if c != "step" else str(rec[c]) for c in LOG_COLUMNS)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
#   b"PBRT" | u32 format version | u64 metadata length | metadata (UTF-8 JSON)
#   | float32 little-endian arrays in manifest order | 32-byte SHA-256 of all
#   preceding bytes

MAGIC = b"PBRT"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def save_checkpoint(model, path, train_cfg=None, step=0, extra=None):
    manifest, blobs, offset = [], [], 0
    entries = [(n, p, "param", model.params.is_trainable(n)) for n, p in model.params.items()]
    entries += [(n, b, "buffer", False) for n, b in model.params.buffers.items()]
    for name, t, kind, trainable in entries:
        arr = t.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape),
                         "trainable": trainable, "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    meta = {
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "skeleton": default_skeleton().to_dict(),
        "step": step,
        "manifest": manifest,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = _HEAD.pack(MAGIC, CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)
    try:
        Path(path).write_bytes(body + hashlib.sha256(body).digest())
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint_meta(path):
    return _read(path)[0]


def _read(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 4:
        raise CorruptFile("file too short for a checkpoint")
    if raw[:4] != MAGIC:
        raise VersionMismatch("bad magic bytes; not a PoseBERT checkpoint")
    if len(raw) < _HEAD.size + 32:
        raise CorruptFile("truncated checkpoint header")
    _, version, meta_len = _HEAD.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile("checksum mismatch (truncated or modified file)")
    meta = json.loads(body[_HEAD.size:_HEAD.size + meta_len].decode())
    data = np.frombuffer(body[_HEAD.size + meta_len:], dtype="<f4")
    return meta, data


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(model, metadata)``."""
    meta, data = _read(path)
    cfg = PoseBertConfig(**meta["model_config"])
    ps = ParamStore()
    for e in meta["manifest"]:
        arr = data[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.float32)).to(dtype)
        if e["kind"] == "param":
            ps.add(e["name"], t, trainable=e["trainable"])
        else:
            ps.add_buffer(e["name"], t)
    meta["skeleton_obj"] = Skeleton.from_dict(meta["skeleton"])
    return PoseBertModel(cfg, ps), meta
