"""Batch-norm-only fine-tuning under domain shift, at desk scale.

A small MLP maps noisy 2D keypoints to 6D poses. It is pretrained on a
"real" domain (narrow pose coverage, structured keypoint noise, occlusions,
a fixed detector-style affine distortion) and then fine-tuned on batches
mixing real samples with "synthetic" ones (wide pose coverage, mild i.i.d.
noise). Fine-tuning can update every parameter or a subset; with BNOnly
just the batch-norm affine parameters and running statistics move.
Evaluation is PA-MPJPE on a held-out test domain with wide pose coverage
and the real domain's noise.
"""

import copy
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .alignlosses import AlignConfig, align_loss
from .errors import EmptyDomain
from .metrics import per_frame_mpjpe, per_frame_pa_mpjpe
from .mocapgen import sample_keyposes
from .model import theta_mean
from .numerics import BatchNormState, ParamStore, batch_norm, linear
from .rotations import rot6d_to_mat
from .skeleton import NUM_JOINTS, default_skeleton, forward_kinematics
from .training import Adam, to_6d

SELECTIONS = ("All", "BNOnly", "RegressorHeadOnly", "AllButBN")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ToyRegressor:
    """(B, 48) keypoints -> (B, 144) 6D pose; every hidden layer is Linear-BN-ReLU."""

    def __init__(self, hidden=(256, 256), seed=0, momentum=0.1, dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        self.params = ParamStore()
        self.bn = []
        dims = (NUM_JOINTS * 2,) + tuple(hidden)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (a + b))
            w = (torch.rand((a, b), generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.params.add(f"fc{i}.weight", w.to(dtype))
            self.params.add(f"fc{i}.bias", torch.zeros(b, dtype=dtype))
            g = self.params.add(f"bn{i}.gamma", torch.ones(b, dtype=dtype))
            be = self.params.add(f"bn{i}.beta", torch.zeros(b, dtype=dtype))
            rm = self.params.add_buffer(f"bn{i}.running_mean", torch.zeros(b, dtype=dtype))
            rv = self.params.add_buffer(f"bn{i}.running_var", torch.ones(b, dtype=dtype))
            self.bn.append(BatchNormState(g, be, rm, rv, momentum=momentum))
        self.params.add("head.weight", torch.zeros(dims[-1], NUM_JOINTS * 6, dtype=dtype))
        self.params.add("head.bias", torch.zeros(NUM_JOINTS * 6, dtype=dtype))
        self.params.add_buffer("theta_mean", theta_mean(dtype))
        self.n_hidden = len(hidden)

    def set_bn_mode(self, training):
        for st in self.bn:
            st.training = training

    def _rebind(self):
        for i, st in enumerate(self.bn):
            st.gamma = self.params[f"bn{i}.gamma"]
            st.beta = self.params[f"bn{i}.beta"]
            st.running_mean = self.params.buffers[f"bn{i}.running_mean"]
            st.running_var = self.params.buffers[f"bn{i}.running_var"]

    def clone(self):
        other = copy.deepcopy(self)
        other._rebind()
        return other

    def forward(self, x, return_features=False):
        p = self.params
        z = x
        for i in range(self.n_hidden):
            z = torch.relu(batch_norm(linear(z, p[f"fc{i}.weight"], p[f"fc{i}.bias"]), self.bn[i]))
        out = self.params.buffers["theta_mean"] + linear(z, p["head.weight"], p["head.bias"])
        return (out, z) if return_features else out

    __call__ = forward


def select_trainable(model, selection):
    """Set trainable flags and BN modes; returns ``(mask, trainable_fraction)``.

    BNOnly trains the batch-norm affine parameters and keeps BN in train
    mode so running statistics adapt; RegressorHeadOnly and AllButBN put BN
    in eval mode so its statistics stay frozen.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    mask = {}
    for name in model.params.names():
        is_bn = name.startswith("bn")
        if selection == "All":
            flag = True
        elif selection == "BNOnly":
            flag = is_bn
        elif selection == "RegressorHeadOnly":
            flag = name.startswith("head.")
        else:
            flag = not is_bn
        mask[name] = flag
        model.params.set_trainable(name, flag)
    model.set_bn_mode(selection in ("All", "BNOnly"))
    fraction = model.params.numel(trainable_only=True) / model.params.numel()
    return mask, fraction


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass
class DomainSpec:
    """Keypoint corruption and pose coverage of one domain (lengths in metres)."""

    coverage: float = 1.0
    jitter_std: float = 0.005
    occlusion_prob: float = 0.0
    scale_std: float = 0.0
    bias_std: float = 0.0
    distortion: tuple = (1.0, 1.0, 0.0, 0.0)  # fixed (sx, sy, dx, dy)

    def __post_init__(self):
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must be in (0, 1]")
        if not 0 <= self.occlusion_prob < 1:
            raise ValueError("occlusion_prob must be in [0, 1)")
        if self.jitter_std < 0 or self.scale_std < 0 or self.bias_std < 0:
            raise ValueError("noise scales must be >= 0")


REAL = DomainSpec(coverage=0.4, jitter_std=0.02, occlusion_prob=0.1, scale_std=0.05, bias_std=0.03,
                  distortion=(1.1, 0.95, 0.04, -0.03))
SYNTH = DomainSpec(coverage=1.0, jitter_std=0.005)
TEST = DomainSpec(coverage=0.8, jitter_std=0.02, occlusion_prob=0.1, scale_std=0.05, bias_std=0.03,
                  distortion=(1.1, 0.95, 0.04, -0.03))


def sample_poses(n, coverage, rng):
    """Static poses from the generator's joint boxes, root orientation zeroed."""
    poses = sample_keyposes(n, rng, coverage)
    poses[:, 0] = 0.0
    return poses


def render_keypoints(poses, domain, rng, skeleton=None):
    """Frontal orthographic 2D keypoints in metres, flattened to (N, 48)."""
    skeleton = skeleton or default_skeleton()
    j = forward_kinematics(skeleton, poses)[..., :2] / 1000.0
    n = len(j)
    sx, sy, dx, dy = domain.distortion
    j = j * np.array([sx, sy]) + np.array([dx, dy])
    s = 1.0 + rng.normal(0, domain.scale_std, size=(n, 1, 1)) if domain.scale_std else 1.0
    b = rng.normal(0, domain.bias_std, size=(n, 1, 2)) if domain.bias_std else 0.0
    j = j * s + b + rng.normal(0, domain.jitter_std, size=j.shape)
    if domain.occlusion_prob:
        occ = rng.random((n, NUM_JOINTS)) < domain.occlusion_prob
        j[occ] = 0.0
    return j.reshape(n, NUM_JOINTS * 2)


@dataclass
class DomainData:
    inputs: torch.Tensor     # N, 48
    targets: torch.Tensor    # N, 144
    poses: np.ndarray        # N, 24, 3

    def __len__(self):
        return len(self.inputs)


def make_domain(n, domain, rng, skeleton=None, poses=None):
    poses = sample_poses(n, domain.coverage, rng) if poses is None else poses
    x = render_keypoints(poses, domain, rng, skeleton)
    return DomainData(torch.as_tensor(x, dtype=torch.float32), to_6d(poses), poses)


def mixed_batch(real, synth, rho, batch_size, rng):
    """``round(rho * batch_size)`` synthetic samples, the rest real, shuffled.

    Returns ``(inputs, targets, is_synth, index)``; ``index`` points into
    the source domain of each row.
    """
    if not 0 <= rho <= 1:
        raise ValueError("rho must be in [0, 1]")
    n_s = int(round(rho * batch_size))
    n_r = batch_size - n_s
    if n_s and (synth is None or len(synth) == 0):
        raise EmptyDomain("synthetic domain is empty but rho > 0")
    if n_r and (real is None or len(real) == 0):
        raise EmptyDomain("real domain is empty but rho < 1")
    ir = rng.integers(0, len(real), n_r) if n_r else np.zeros(0, int)
    is_ = rng.integers(0, len(synth), n_s) if n_s else np.zeros(0, int)
    xs = [real.inputs[ir]] if n_r else []
    ys = [real.targets[ir]] if n_r else []
    if n_s:
        xs.append(synth.inputs[is_])
        ys.append(synth.targets[is_])
    flag = np.concatenate([np.zeros(n_r, bool), np.ones(n_s, bool)])
    idx = np.concatenate([ir, is_])
    perm = rng.permutation(batch_size)
    return torch.cat(xs)[perm], torch.cat(ys)[perm], flag[perm], idx[perm]


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    selections: list = field(default_factory=lambda: ["BNOnly", "All"])
    rhos: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    steps: int = 400
    pretrain_steps: int = 1500
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    batch_size: int = 64
    hidden: list = field(default_factory=lambda: [256, 256])
    n_real: int = 4000
    n_synth: int = 4000
    n_test: int = 1000
    seed: int = 0
    align_kind: str = "none"
    align_weight: float = None
    real: dict = field(default_factory=lambda: asdict(REAL))
    synth: dict = field(default_factory=lambda: asdict(SYNTH))
    test: dict = field(default_factory=lambda: asdict(TEST))

    def __post_init__(self):
        for s in self.selections:
            if s not in SELECTIONS:
                raise ValueError(f"unknown selection {s!r}")
        if any(not 0 <= r <= 1 for r in self.rhos):
            raise ValueError("rho values must be in [0, 1]")
        if self.align_kind not in ("none", "mse", "cosine", "contrastive"):
            raise ValueError("align_kind must be none, mse, cosine or contrastive")


def evaluate_regressor(model, data, skeleton=None):
    """``(pa_mpjpe_mm, mpjpe_mm)`` with BN in eval mode."""
    skeleton = skeleton or default_skeleton()
    modes = [st.training for st in model.bn]
    model.set_bn_mode(False)
    with torch.no_grad():
        pred = model(data.inputs).double().numpy()
    for st, m in zip(model.bn, modes):
        st.training = m
    mats = rot6d_to_mat(pred.reshape(-1, NUM_JOINTS, 6))
    pj = forward_kinematics(skeleton, mats)
    gj = forward_kinematics(skeleton, data.poses)
    return float(per_frame_pa_mpjpe(pj, gj).mean()), float(per_frame_mpjpe(pj, gj).mean())


def pretrain(cfg, real, skeleton=None):
    model = ToyRegressor(tuple(cfg.hidden), seed=cfg.seed)
    select_trainable(model, "All")
    opt = Adam(model.params, cfg.pretrain_lr)
    for step in range(cfg.pretrain_steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        x, y, _, _ = mixed_batch(real, None, 0.0, cfg.batch_size, rng)
        model.params.zero_grad()
        ((model(x) - y) ** 2).mean().backward()
        opt.step()
    return model


def finetune(model, cfg, selection, rho, real, synth, paired_real=None, skeleton=None):
    """Fine-tune in place; returns the trainable fraction."""
    _, fraction = select_trainable(model, selection)
    align = AlignConfig(cfg.align_kind, cfg.align_weight) if cfg.align_kind != "none" else None
    opt = Adam(model.params, cfg.lr)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 2, step, int(round(rho * 1000))])
        x, y, is_synth, idx = mixed_batch(real, synth, rho, cfg.batch_size, rng)
        model.params.zero_grad()
        pred, feats = model(x, return_features=True)
        loss = ((pred - y) ** 2).mean()
        if align is not None and paired_real is not None and is_synth.sum() >= 2:
            # the same synthetic poses rendered in the real style
            _, fr = model(paired_real.inputs[idx[is_synth]], return_features=True)
            loss = loss + align_loss(fr, feats[torch.as_tensor(is_synth)], align)
        loss.backward()
        opt.step()
    return fraction


def frozen_intact(before, model, mask):
    """True when every frozen parameter (and, with BN in eval mode, every
    running statistic) is bit-identical to ``before``."""
    for name, flag in mask.items():
        if not flag and not torch.equal(before[name], model.params[name].detach()):
            return False
    if not any(st.training for st in model.bn):
        for name, buf in model.params.buffers.items():
            if not torch.equal(before["buffer:" + name], buf):
                return False
    return True


CSV_COLUMNS = ("selection", "rho", "pa_mpjpe_mm", "mpjpe_mm", "trainable_fraction", "steps", "seed",
               "frozen_intact", "align_kind", "align_weight")


def run_experiment(cfg, skeleton=None):
    """Pretrain once, then fine-tune a copy per (selection, rho) cell.

    The first row is the pretrained model itself (selection "Pretrained",
    zero steps). Rows follow the configured selection order, then rho order.
    """
    skeleton = skeleton or default_skeleton()
    real_d, synth_d, test_d = (DomainSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
                               for d in (cfg.real, cfg.synth, cfg.test))
    real = make_domain(cfg.n_real, real_d, np.random.default_rng([cfg.seed, 10]), skeleton)
    synth = make_domain(cfg.n_synth, synth_d, np.random.default_rng([cfg.seed, 11]), skeleton)
    paired = make_domain(cfg.n_synth, real_d, np.random.default_rng([cfg.seed, 12]), skeleton, synth.poses)
    test = make_domain(cfg.n_test, test_d, np.random.default_rng([cfg.seed, 13]), skeleton)

    base = pretrain(cfg, real, skeleton)
    align_w = "" if cfg.align_kind == "none" else (
        cfg.align_weight if cfg.align_weight is not None else AlignConfig(cfg.align_kind).weight)
    pa, mp = evaluate_regressor(base, test, skeleton)
    rows = [dict(selection="Pretrained", rho=0.0, pa_mpjpe_mm=pa, mpjpe_mm=mp, trainable_fraction=0.0,
                 steps=0, seed=cfg.seed, frozen_intact=True, align_kind=cfg.align_kind, align_weight=align_w)]
    for selection in cfg.selections:
        for rho in cfg.rhos:
            model = base.clone()
            mask, _ = select_trainable(model, selection)
            before = model.params.snapshot()
            fraction = finetune(model, cfg, selection, rho, real, synth, paired, skeleton)
            intact = frozen_intact(before, model, mask)
            pa, mp = evaluate_regressor(model, test, skeleton)
            rows.append(dict(selection=selection, rho=float(rho), pa_mpjpe_mm=pa, mpjpe_mm=mp,
                             trainable_fraction=fraction, steps=cfg.steps, seed=cfg.seed,
                             frozen_intact=intact, align_kind=cfg.align_kind, align_weight=align_w))
    return rows


def write_results(rows, path, config=None):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if config is not None:
        with open(str(path) + ".config.json", "w") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
