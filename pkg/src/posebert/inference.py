"""Whole-sequence inference with a fixed-length model.

Windows of length T start every T/2 frames (the last one is aligned to the
sequence end). Overlapping predictions are blended in 6D with triangular
weights that peak at the window centre, then re-orthonormalised. Sequences
no longer than T are processed as a single window.
"""

import numpy as np
import torch

from .errors import AllMasked, ParseError, ShapeMismatch
from .mocapgen import MotionDataset, PoseSequence
from .rotations import mat_to_rot6d, rot6d_to_aa, rot6d_to_mat
from .skeleton import NUM_JOINTS
from .training import to_6d


def window_starts(n_frames, T):
    if n_frames <= T:
        return [0]
    stride = max(T // 2, 1)
    starts = list(range(0, n_frames - T + 1, stride))
    if starts[-1] != n_frames - T:
        starts.append(n_frames - T)
    return starts


def tent_weights(T):
    t = np.arange(T)
    return np.minimum(t + 1, T - t).astype(np.float64)


def parse_mask_spec(spec, n_frames):
    """``"3,7-9"`` -> visible flags with frames 3, 7, 8, 9 masked."""
    visible = np.ones(n_frames, dtype=bool)
    if spec is None or not spec.strip():
        return visible
    for part in spec.split(","):
        part = part.strip()
        try:
            if "-" in part:
                a, b = (int(v) for v in part.split("-", 1))
            else:
                a = b = int(part)
        except ValueError:
            raise ParseError(f"bad mask spec entry {part!r}") from None
        if a < 0 or b < a or b >= n_frames:
            raise ParseError(f"mask spec entry {part!r} outside 0..{n_frames - 1}")
        visible[a:b + 1] = False
    return visible


def infer_rotations(model, rotations, visible=None):
    """Refine an (F, 24, 3) axis-angle sequence; returns (F, 24, 3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.ndim != 3 or rotations.shape[1:] != (NUM_JOINTS, 3):
        raise ShapeMismatch(f"expected (F, {NUM_JOINTS}, 3) rotations, got {rotations.shape}")
    F, T = len(rotations), model.cfg.seq_len
    visible = np.ones(F, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if visible.shape != (F,):
        raise ShapeMismatch(f"visibility has shape {visible.shape}, expected ({F},)")
    x = to_6d(rotations, model.dtype)
    acc = np.zeros((F, NUM_JOINTS * 6))
    wsum = np.zeros(F)
    for s in window_starts(F, T):
        e = min(s + T, F)
        vis = visible[s:e]
        if not vis.any():
            raise AllMasked(f"frames {s}..{e - 1} are all masked; no visible context")
        with torch.no_grad():
            out = model(x[None, s:e], torch.as_tensor(vis)[None])[0].double().numpy()
        w = tent_weights(e - s)
        acc[s:e] += w[:, None] * out
        wsum[s:e] += w
    blended = (acc / wsum[:, None]).reshape(F, NUM_JOINTS, 6)
    return rot6d_to_aa(mat_to_rot6d(rot6d_to_mat(blended)))


def infer_dataset(model, dataset, mask_specs=None):
    """Refine every sequence. ``mask_specs`` maps sequence name -> visible flags."""
    out = []
    for seq in dataset.sequences:
        vis = None if mask_specs is None else mask_specs.get(seq.name)
        rot = infer_rotations(model, seq.rotations, vis)
        out.append(PoseSequence(seq.name, rot, seq.translation, seq.fps, seq.split))
    return MotionDataset(out, dataset.fps, dataset.provenance)
