"""Pose evaluation metrics on joint positions (millimetres).

* MPJPE is computed after centring both skeletons on their root joint.
* PA-MPJPE aligns each predicted frame to the ground truth with the
  least-squares similarity transform (rotation, uniform scale, translation;
  reflections excluded).
* Acceleration error uses unit frame spacing, so it is in mm / frame^2.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, ShapeMismatch, TooShort


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def per_frame_mpjpe(pred, gt, root=0):
    pred, gt = _pair(pred, gt)
    pc = pred - pred[..., root:root + 1, :]
    gc = gt - gt[..., root:root + 1, :]
    return np.linalg.norm(pc - gc, axis=-1).mean(-1)


def mpjpe(pred, gt, root=0):
    """Mean per-joint position error over frames and joints, root-centred."""
    return float(np.mean(per_frame_mpjpe(pred, gt, root)))


def similarity_transform(pred, gt):
    """Umeyama: ``(s, R, t)`` minimising ``||s R pred_i + t - gt_i||^2`` with det R = +1."""
    pred, gt = _pair(pred, gt)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    var_p = (x ** 2).sum() / len(x)
    cov = y.T @ x / len(x)
    U, S, Vt = np.linalg.svd(cov)
    # rank < 2 means collinear or coincident points
    if var_p < 1e-12 or S[1] <= 1e-9 * max(S[0], 1e-300):
        raise DegenerateConfiguration("points are collinear or coincident")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / var_p
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred, gt):
    s, R, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + t


def per_frame_pa_mpjpe(pred_seq, gt_seq):
    pred_seq, gt_seq = _pair(pred_seq, gt_seq)
    pred_f = pred_seq.reshape(-1, pred_seq.shape[-2], 3)
    gt_f = gt_seq.reshape(-1, gt_seq.shape[-2], 3)
    out = np.empty(len(pred_f))
    for i, (p, g) in enumerate(zip(pred_f, gt_f)):
        out[i] = np.linalg.norm(procrustes_align(p, g) - g, axis=-1).mean()
    return out.reshape(pred_seq.shape[:-2])


def pa_mpjpe(pred_seq, gt_seq):
    return float(np.mean(per_frame_pa_mpjpe(pred_seq, gt_seq)))


def accelerations(seq):
    """Second differences ``p[t+1] - 2 p[t] + p[t-1]`` along the frame axis."""
    seq = np.asarray(seq, dtype=np.float64)
    return seq[2:] - 2 * seq[1:-1] + seq[:-2]


def accel_error(pred_seq, gt_seq):
    """Mean norm of the acceleration difference over interior frames and joints."""
    pred_seq, gt_seq = _pair(pred_seq, gt_seq)
    if len(pred_seq) < 3:
        raise TooShort("acceleration error needs at least 3 frames")
    return float(np.linalg.norm(accelerations(pred_seq) - accelerations(gt_seq), axis=-1).mean())


def accel_magnitude(seq):
    return float(np.linalg.norm(accelerations(seq), axis=-1).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SequenceResult:
    name: str
    mpjpe: float
    pa_mpjpe: float
    accel_err: float
    n_frames: int


@dataclass
class EvalReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    accel_err: float
    per_frame_mpjpe: list
    per_frame_pa_mpjpe: list
    n_frames: int
    n_sequences: int
    fps: float = 30.0
    sequences: list = field(default_factory=list)

    def to_json(self, extra=None):
        d = asdict(self)
        if extra:
            d.update(extra)
        return json.dumps(d, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "mpjpe", "pa_mpjpe", "accel_err", "n_frames"])
            for s in self.sequences:
                w.writerow([s.name, repr(s.mpjpe), repr(s.pa_mpjpe), repr(s.accel_err), s.n_frames])


def evaluate(pairs, fps=30.0):
    """``pairs``: iterable of ``(name, pred_joints, gt_joints)`` with shape (F, 24, 3).

    Frame-weighted means over all sequences; acceleration error averages
    over all interior frames (sequences shorter than 3 frames are skipped
    for that metric).
    """
    seqs, pf, ppa = [], [], []
    acc_sum, acc_n = 0.0, 0
    for name, pred, gt in pairs:
        f = per_frame_mpjpe(pred, gt)
        pa = per_frame_pa_mpjpe(pred, gt)
        acc = accel_error(pred, gt) if len(pred) >= 3 else float("nan")
        if len(pred) >= 3:
            acc_sum += acc * (len(pred) - 2)
            acc_n += len(pred) - 2
        seqs.append(SequenceResult(name, float(f.mean()), float(pa.mean()), acc, len(pred)))
        pf.extend(f.tolist())
        ppa.extend(pa.tolist())
    return EvalReport(
        mpjpe_mm=float(np.mean(pf)) if pf else 0.0,
        pa_mpjpe_mm=float(np.mean(ppa)) if ppa else 0.0,
        accel_err=acc_sum / acc_n if acc_n else 0.0,
        per_frame_mpjpe=pf,
        per_frame_pa_mpjpe=ppa,
        n_frames=len(pf),
        n_sequences=len(seqs),
        fps=fps,
        sequences=seqs,
    )


# ---------------------------------------------------------------------------
# gain histogram
# ---------------------------------------------------------------------------

@dataclass
class GainHistogram:
    """Histogram of per-sample gains ``err_a - err_b``.

    Bin k is centred on ``k * bin_width``. ``weighted_contribution`` is the
    in-bin mean gain times the fraction of samples in the bin, so the
    contributions add up to the overall mean gain.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    weighted_contribution: np.ndarray
    mean_gain: float

    @property
    def bin_centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self):
        return {"bin_edges": self.bin_edges.tolist(), "bin_centers": self.bin_centers.tolist(),
                "counts": self.counts.tolist(),
                "weighted_contribution": self.weighted_contribution.tolist(),
                "mean_gain": self.mean_gain}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "bin_center", "count", "weighted_contribution"])
            for lo, hi, c, n, wc in zip(self.bin_edges[:-1], self.bin_edges[1:], self.bin_centers,
                                         self.counts, self.weighted_contribution):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(c)), int(n), repr(float(wc))])


def gain_histogram(err_a, err_b, bin_width=1.0):
    a = np.asarray(err_a, dtype=np.float64).ravel()
    b = np.asarray(err_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    gains = a - b
    if gains.size == 0:
        return GainHistogram(np.zeros(0), np.zeros(0, int), np.zeros(0), 0.0)
    k = np.round(gains / bin_width).astype(np.int64)
    lo, hi = k.min(), k.max()
    idx = k - lo
    nb = int(hi - lo + 1)
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, weights=gains, minlength=nb)
    edges = (np.arange(lo, hi + 2) - 0.5) * bin_width
    return GainHistogram(edges, counts, sums / gains.size, float(gains.mean()))
