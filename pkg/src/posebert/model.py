"""The pose transformer: attention blocks whose feed-forward sublayers are pose regressors.

Each block runs pre-LN multi-head self-attention (masked frames are never
attended to) and then refines the running per-frame pose estimate with an
iterative regressor that consumes the block's features and the current
estimate. The estimate starts at the mean pose.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .numerics import ParamStore, attention, gelu, layer_norm, linear
from .rotations import mat_to_rot6d
from .skeleton import NUM_JOINTS, mean_pose

POSE_DIM = NUM_JOINTS * 6


@dataclass
class PoseBertConfig:
    num_layers: int = 4
    embed_dim: int = 512
    num_heads: int = 8
    seq_len: int = 16
    regressor_iters: int = 1
    regressor_hidden: int = 1024
    input_dim: int = POSE_DIM
    share_regressor: bool = True
    use_positional_encoding: bool = True
    deep_supervision: bool = False

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if min(self.num_layers, self.seq_len, self.regressor_iters, self.num_heads) < 1:
            raise ValueError("num_layers, seq_len, regressor_iters and num_heads must be >= 1")
        if self.input_dim != POSE_DIM:
            raise ValueError(f"input_dim must be {POSE_DIM} (24 joints x 6D)")

    def to_dict(self):
        return asdict(self)


TINY = dict(num_layers=2, embed_dim=64, num_heads=4, regressor_hidden=256)


@dataclass
class FrameMask:
    """Per-frame visibility (False = masked). At least one frame is visible."""

    visible: np.ndarray

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)
        if not self.visible.any():
            raise ValueError("a FrameMask needs at least one visible frame")

    @classmethod
    def all_visible(cls, T):
        return cls(np.ones(T, dtype=bool))


def theta_mean(dtype=torch.float32):
    from .rotations import aa_to_mat

    rot = mat_to_rot6d(aa_to_mat(mean_pose().rotations()))
    return torch.as_tensor(rot.reshape(-1), dtype=dtype)


def _uniform(gen, shape, bound, dtype):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def _xavier(gen, fan_in, fan_out, dtype):
    return _uniform(gen, (fan_in, fan_out), math.sqrt(6.0 / (fan_in + fan_out)), dtype)


class PoseBertModel:
    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @property
    def theta_mean(self):
        return self.params.buffers["theta_mean"]

    @property
    def dtype(self):
        return self.params["proj.weight"].dtype

    def regressor_prefix(self, layer):
        return "regressor" if self.cfg.share_regressor else f"blocks.{layer}.regressor"

    # -- pieces ---------------------------------------------------------

    def embed(self, inputs, visible):
        """Input projection with masked frames replaced by the mask token.

        Masked inputs are zeroed before the projection and then overwritten,
        so their content never enters the computation.
        """
        p = self.params
        inputs, visible = _prepare(inputs, visible, self.cfg, self.dtype)
        vis = visible[..., None]
        x = linear(inputs * vis, p["proj.weight"], p["proj.bias"])
        x = torch.where(vis, x, p["mask_token"].expand_as(x))
        if self.cfg.use_positional_encoding:
            x = x + p["pos_enc"][: inputs.shape[-2]]
        return x

    def self_attention(self, x, visible, layer):
        p, cfg = self.params, self.cfg
        pre = f"blocks.{layer}."
        h = layer_norm(x, p[pre + "ln.gamma"], p[pre + "ln.beta"])
        qkv = linear(h, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"])
        B, T, _ = qkv.shape
        H, d = cfg.num_heads, cfg.embed_dim // cfg.num_heads
        qkv = qkv.view(B, T, 3, H, d).permute(2, 0, 3, 1, 4)
        out, w = attention(qkv[0], qkv[1], qkv[2], key_mask=visible[:, None, :], return_weights=True)
        out = out.transpose(1, 2).reshape(B, T, cfg.embed_dim)
        return linear(out, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"]), w

    def regressor_step(self, feature, theta, layer=0, iters=None):
        """``iters`` residual refinements ``theta += MLP([feature, theta])``."""
        p = self.params
        pre = self.regressor_prefix(layer) + "."
        for _ in range(self.cfg.regressor_iters if iters is None else iters):
            z = torch.cat([feature, theta], dim=-1)
            z = gelu(linear(z, p[pre + "fc1.weight"], p[pre + "fc1.bias"]))
            z = gelu(linear(z, p[pre + "fc2.weight"], p[pre + "fc2.bias"]))
            theta = theta + linear(z, p[pre + "out.weight"], p[pre + "out.bias"])
        return theta

    # -- full pass ------------------------------------------------------

    def forward(self, inputs, visible=None, return_attention=False, return_all=False):
        """Refined 6D poses ``(B, T, 144)`` (or ``(T, 144)`` for unbatched input).

        ``visible`` is a FrameMask, a bool array ``(T,)``/``(B, T)``, or None
        for all visible.
        """
        squeeze = _is_unbatched(inputs)
        inputs_t, vis = _prepare(inputs, visible, self.cfg, self.dtype)
        x = self.embed(inputs_t, vis)
        theta = self.theta_mean.to(x.dtype).expand(x.shape[:-1] + (POSE_DIM,))
        weights, per_layer = [], []
        for layer in range(self.cfg.num_layers):
            a, w = self.self_attention(x, vis, layer)
            x = x + a
            theta = self.regressor_step(x, theta, layer)
            weights.append(w)
            per_layer.append(theta)
        out = theta[0] if squeeze else theta
        extras = []
        if return_all:
            extras.append([t[0] if squeeze else t for t in per_layer])
        if return_attention:
            extras.append([w[0] if squeeze else w for w in weights])
        return (out, *extras) if extras else out

    __call__ = forward
    apply_mask = embed

    def num_parameters(self):
        return self.params.numel()


def _is_unbatched(inputs):
    return (inputs.dim() if isinstance(inputs, torch.Tensor) else np.ndim(inputs)) == 2


def _prepare(inputs, visible, cfg, dtype):
    if isinstance(inputs, torch.Tensor) and isinstance(visible, torch.Tensor) and inputs.dim() == 3:
        return inputs, visible
    x = torch.as_tensor(np.asarray(inputs) if not isinstance(inputs, torch.Tensor) else inputs, dtype=dtype)
    if x.dim() == 2:
        x = x[None]
    if x.dim() != 3 or x.shape[-1] != cfg.input_dim:
        raise ShapeMismatch(f"inputs must be (B, T, {cfg.input_dim}), got {tuple(x.shape)}")
    if x.shape[1] > cfg.seq_len:
        raise ShapeMismatch(f"sequence length {x.shape[1]} exceeds model seq_len {cfg.seq_len}")
    if visible is None:
        vis = torch.ones(x.shape[:2], dtype=torch.bool)
    else:
        if isinstance(visible, FrameMask):
            visible = visible.visible
        vis = torch.as_tensor(np.asarray(visible) if not isinstance(visible, torch.Tensor) else visible,
                              dtype=torch.bool)
        if vis.dim() == 1:
            vis = vis[None].expand(x.shape[0], -1)
        if tuple(vis.shape) != tuple(x.shape[:2]):
            raise ShapeMismatch(f"mask shape {tuple(vis.shape)} does not match inputs {tuple(x.shape[:2])}")
    return x, vis


def init_model(cfg, seed=0, dtype=torch.float32):
    """Xavier-uniform weights, unit layer norms, zero biases, zero regressor output."""
    gen = torch.Generator().manual_seed(int(seed))
    ps = ParamStore()
    D, P = cfg.embed_dim, cfg.input_dim
    ps.add("proj.weight", _xavier(gen, P, D, dtype))
    ps.add("proj.bias", torch.zeros(D, dtype=dtype))
    ps.add("pos_enc", _uniform(gen, (cfg.seq_len, D), 0.02 * math.sqrt(3), dtype),
           trainable=cfg.use_positional_encoding)
    ps.add("mask_token", _uniform(gen, (D,), 0.02 * math.sqrt(3), dtype))

    def add_regressor(prefix):
        hid = cfg.regressor_hidden
        ps.add(prefix + ".fc1.weight", _xavier(gen, D + P, hid, dtype))
        ps.add(prefix + ".fc1.bias", torch.zeros(hid, dtype=dtype))
        ps.add(prefix + ".fc2.weight", _xavier(gen, hid, hid, dtype))
        ps.add(prefix + ".fc2.bias", torch.zeros(hid, dtype=dtype))
        ps.add(prefix + ".out.weight", torch.zeros(hid, P, dtype=dtype))
        ps.add(prefix + ".out.bias", torch.zeros(P, dtype=dtype))

    for layer in range(cfg.num_layers):
        pre = f"blocks.{layer}."
        ps.add(pre + "ln.gamma", torch.ones(D, dtype=dtype))
        ps.add(pre + "ln.beta", torch.zeros(D, dtype=dtype))
        ps.add(pre + "attn.qkv.weight", _xavier(gen, D, 3 * D, dtype))
        ps.add(pre + "attn.qkv.bias", torch.zeros(3 * D, dtype=dtype))
        ps.add(pre + "attn.out.weight", _xavier(gen, D, D, dtype))
        ps.add(pre + "attn.out.bias", torch.zeros(D, dtype=dtype))
        if not cfg.share_regressor:
            add_regressor(pre + "regressor")
    if cfg.share_regressor:
        add_regressor("regressor")
    ps.add_buffer("theta_mean", theta_mean(dtype))
    return PoseBertModel(cfg, ps)
