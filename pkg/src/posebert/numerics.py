"""Dense tensor layer on top of torch autograd.

Torch provides the tensor type and the reverse-mode tape. This module adds
what the models here need on top of it: shape-checked primitives, a
parameter store with trainable/frozen flags, batch normalisation with
explicit running-statistics state, key-masked attention and an independent
central-difference gradient checker.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .errors import AllMasked, DegenerateBatch, ShapeMismatch

Tensor = torch.Tensor


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeMismatch(f"matmul {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _broadcastable(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        return False
    return True


def add(a, b):
    if not _broadcastable(a, b):
        raise ShapeMismatch(f"add {tuple(a.shape)} + {tuple(b.shape)}")
    return a + b


def mul(a, b):
    if not _broadcastable(a, b):
        raise ShapeMismatch(f"mul {tuple(a.shape)} * {tuple(b.shape)}")
    return a * b


def concat(tensors, axis=-1):
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != ax):
            raise ShapeMismatch(f"concat along {axis}: {[tuple(t.shape) for t in tensors]}")
    return torch.cat(list(tensors), dim=axis)


def slice_(x, axis, start, stop):
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for extent {x.shape[axis]}")
    return x.narrow(axis, start, stop - start)


def transpose(x, a=-2, b=-1):
    return x.transpose(a, b)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def softmax(x, axis=-1):
    """Max-subtracted softmax; ``-inf`` entries get exactly zero weight."""
    m = x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(x - m)
    return e / e.sum(dim=axis, keepdim=True)


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def dropout(x, p, generator=None, training=True):
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def layer_norm(x, gamma, beta, eps=1e-5):
    if x.shape[-1] < 2:
        raise ShapeMismatch("layer_norm needs at least 2 features")
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``gamma``/``beta`` are the tensors registered in the owning ParamStore;
    the running statistics are buffers and never receive gradients.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True


def batch_norm(x, state, update_stats=True):
    """Normalise ``(N, C)`` features per channel.

    Train mode uses (biased) batch statistics and, unless ``update_stats`` is
    false, moves the running statistics by ``momentum`` towards them. Eval
    mode uses the running statistics only.
    """
    if state.training:
        if x.shape[0] < 2:
            raise DegenerateBatch("batch_norm in train mode needs at least 2 samples")
        mean = x.mean(0)
        var = x.var(0, unbiased=False)
        if state.eps == 0 and bool((var == 0).any()):
            raise DegenerateBatch("zero batch variance with eps disabled")
        if update_stats:
            with torch.no_grad():
                m = state.momentum
                state.running_mean.mul_(1 - m).add_(m * mean.detach())
                state.running_var.mul_(1 - m).add_(m * var.detach())
    else:
        mean, var = state.running_mean, state.running_var
    return (x - mean) / torch.sqrt(var + state.eps) * state.gamma + state.beta


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q, k, v, key_mask=None, return_weights=False):
    """Scaled dot-product attention over the last two axes.

    ``key_mask`` (broadcastable to ``(..., Tk)``) is true for attendable keys.
    Masked keys get a weight of exactly zero.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = matmul(q, transpose(k)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        if not bool(key_mask.any(-1).all()):
            raise AllMasked("every key is masked for some query")
        scores = scores.masked_fill(~key_mask[..., None, :], float("-inf"))
    w = softmax(scores, axis=-1)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with trainable flags, plus non-trainable buffers.

    Iteration order is insertion order. Trainable tensors are leaves with
    ``requires_grad`` set; frozen ones are never touched by the optimiser.
    """

    def __init__(self):
        self._params = {}
        self._trainable = {}
        self.buffers = {}

    def add(self, name, value, trainable=True):
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.detach().clone().requires_grad_(trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def add_buffer(self, name, value):
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value.detach().clone()
        return self.buffers[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, name, flag):
        self._trainable[name] = bool(flag)
        self._params[name].requires_grad_(bool(flag))
        if not flag:
            self._params[name].grad = None

    def trainable_items(self):
        return [(n, p) for n, p in self._params.items() if self._trainable[n]]

    def numel(self, trainable_only=False):
        return sum(p.numel() for n, p in self._params.items()
                   if self._trainable[n] or not trainable_only)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def snapshot(self):
        """Detached copies of every parameter and buffer."""
        out = {n: p.detach().clone() for n, p in self._params.items()}
        out.update({f"buffer:{n}": b.clone() for n, b in self.buffers.items()})
        return out

    def load(self, values):
        with torch.no_grad():
            for n, v in values.items():
                if n.startswith("buffer:"):
                    self.buffers[n[7:]].copy_(v)
                else:
                    self._params[n].copy_(v)

    @contextmanager
    def substituted(self, values):
        """Temporarily read the given tensors in place of the stored ones."""
        saved = {n: self._params[n] for n in values}
        self._params.update(values)
        try:
            yield self
        finally:
            self._params.update(saved)

    def to(self, dtype):
        with torch.no_grad():
            for n in list(self._params):
                p = self._params[n]
                self._params[n] = p.detach().to(dtype).requires_grad_(self._trainable[n])
            for n in list(self.buffers):
                self.buffers[n] = self.buffers[n].to(dtype)
        return self


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, params, eps=1e-5, tol=None, floor=1e-6, analytic=None):
    """Compare autograd gradients with central differences.

    ``fn()`` returns a scalar tensor built from ``params`` (a list of leaf
    tensors, ideally double precision). Each element of each parameter is
    perturbed by ``+-eps`` in place. The relative error of an element is
    ``|g_a - g_n| / max(|g_a|, |g_n|, floor)``; the worst one is returned.
    ``analytic`` overrides the autograd gradients (used for negative
    controls). If ``tol`` is given, an AssertionError names the offender.
    """
    params = list(params)
    if analytic is None:
        out = fn()
        analytic = torch.autograd.grad(out, params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]
    worst, where = 0.0, None
    with torch.no_grad():
        for pi, (p, ga) in enumerate(zip(params, analytic)):
            flat = p.view(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(fn())
                flat[i] = orig - eps
                fm = float(fn())
                flat[i] = orig
                gn = (fp - fm) / (2 * eps)
                g = float(gflat[i])
                err = abs(g - gn) / max(abs(g), abs(gn), floor)
                if err > worst:
                    worst, where = err, (pi, i, g, gn)
    if tol is not None and worst > tol:
        pi, i, g, gn = where
        raise AssertionError(f"gradient mismatch in param {pi} element {i}: analytic {g} vs numeric {gn}")
    return worst


def grad_check_batched(fn, params, eps=1e-5, tol=None, floor=1e-6, chunk=512):
    """:func:`grad_check` for a pure function ``fn(*params) -> scalar``.

    The same central differences, but the perturbed evaluations are
    vectorised with ``torch.func.vmap``, ``chunk`` elements at a time.
    The step actually taken, ``(p + eps) - (p - eps)`` in floating point,
    is used as the denominator.
    """
    params = [p.detach() for p in params]
    leaves = [p.clone().requires_grad_(True) for p in params]
    analytic = torch.autograd.grad(fn(*leaves), leaves, allow_unused=True)
    worst, where = 0.0, None
    for pi, p in enumerate(params):
        batched = torch.func.vmap(fn, in_dims=tuple(0 if j == pi else None for j in range(len(params))))
        ga = torch.zeros_like(p) if analytic[pi] is None else analytic[pi]
        flat, gflat, n = p.reshape(-1), ga.reshape(-1), p.numel()
        for start in range(0, n, chunk):
            idx = torch.arange(start, min(start + chunk, n))
            rows = torch.arange(len(idx))
            plus = flat.repeat(len(idx), 1)
            minus = plus.clone()
            plus[rows, idx] += eps
            minus[rows, idx] -= eps
            others = list(params)
            others[pi] = plus.view((len(idx),) + p.shape)
            fp = batched(*others)
            others[pi] = minus.view((len(idx),) + p.shape)
            fm = batched(*others)
            gn = (fp - fm) / (plus[rows, idx] - minus[rows, idx])
            g = gflat[idx]
            err = (g - gn).abs() / torch.maximum(torch.maximum(g.abs(), gn.abs()), torch.tensor(floor, dtype=g.dtype))
            k = int(err.argmax())
            if float(err[k]) > worst:
                worst, where = float(err[k]), (pi, int(idx[k]), float(g[k]), float(gn[k]))
    if tol is not None and worst > tol:
        pi, i, g, gn = where
        raise AssertionError(f"gradient mismatch in param {pi} element {i}: analytic {g} vs numeric {gn}")
    return worst
