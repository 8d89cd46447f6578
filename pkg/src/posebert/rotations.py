"""Rotation representations: axis-angle, rotation matrix and the 6D encoding.

Every function is batched over leading dimensions and accepts either numpy
arrays or torch tensors; the result has the same array type as the input.
Torch inputs keep their autograd graph (except ``mat_to_aa``).

Conventions
-----------
* axis-angle ``(..., 3)``: direction is the axis, norm the angle in radians.
* rotation matrix ``(..., 3, 3)`` acting on column vectors.
* 6D ``(..., 6)``: the first two *columns* of the matrix, concatenated.
"""

import numpy as np
import torch

from .errors import DegenerateInput

_SMALL_ANGLE = 1e-4
_NEAR_PI = 1e-3


def _to_torch(x):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
    return torch.from_numpy(arr), True


def _back(t, was_numpy):
    return t.detach().numpy() if was_numpy else t


def skew(v):
    """Cross-product matrix of ``v`` with shape ``(..., 3, 3)``."""
    t, np_in = _to_torch(v)
    x, y, z = t.unbind(-1)
    o = torch.zeros_like(x)
    k = torch.stack([o, -z, y, z, o, -x, -y, x, o], dim=-1)
    return _back(k.reshape(t.shape[:-1] + (3, 3)), np_in)


def aa_to_mat(a):
    """Rodrigues formula, smooth through the zero rotation."""
    t, np_in = _to_torch(a)
    theta2 = (t * t).sum(-1)
    small = theta2 < _SMALL_ANGLE ** 2
    # sqrt of a safe value so the gradient at zero stays finite
    safe = torch.where(small, torch.ones_like(theta2), theta2).sqrt()
    # sin(t)/t and (1-cos t)/t^2 with Taylor branches near zero
    c1 = torch.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, torch.sin(safe) / safe)
    c2 = torch.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                     (1.0 - torch.cos(safe)) / (safe * safe))
    k = skew(t)
    eye = torch.eye(3, dtype=t.dtype).expand(k.shape)
    r = eye + c1[..., None, None] * k + c2[..., None, None] * (k @ k)
    return _back(r, np_in)


def canonical_aa(a):
    """Map an axis-angle vector to its equivalent with angle in ``[0, pi]``."""
    a = np.asarray(a, dtype=np.float64)
    theta = np.linalg.norm(a, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    axis = a / safe
    wrapped = np.mod(theta, 2 * np.pi)
    flip = wrapped > np.pi
    angle = np.where(flip, 2 * np.pi - wrapped, wrapped)
    axis = np.where(flip, -axis, axis)
    out = axis * angle
    # exact half turns: the sign convention of mat_to_aa
    half = np.isclose(angle[..., 0], np.pi, rtol=0, atol=1e-12)
    if np.any(half):
        out[half] = _fix_half_turn_sign(out[half])
    return out


def _fix_half_turn_sign(v):
    """Choose the representative with nonnegative z (then y, then x)."""
    v = np.array(v, dtype=np.float64)
    for row in v.reshape(-1, 3):
        for k in (2, 1, 0):
            if abs(row[k]) > 1e-12:
                if row[k] < 0:
                    row *= -1.0
                break
    return v


def mat_to_aa(R):
    """Inverse Rodrigues map returning the canonical vector (angle in [0, pi]).

    The angle comes from ``atan2(sin, cos)`` so it is accurate at both ends of
    the range. Close to a half turn the axis is read from the symmetric part,
    using the column with the largest diagonal entry.
    """
    is_torch = isinstance(R, torch.Tensor)
    m = R.detach().cpu().numpy() if is_torch else np.asarray(R, dtype=np.float64)
    m = m.astype(np.float64)
    shape = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    w = 0.5 * np.stack([m[:, 2, 1] - m[:, 1, 2],
                        m[:, 0, 2] - m[:, 2, 0],
                        m[:, 1, 0] - m[:, 0, 1]], axis=-1)
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(m, axis1=1, axis2=2) - 1.0)
    angle = np.arctan2(s, c)
    out = np.zeros((m.shape[0], 3))

    regular = (angle > 0) & (angle <= np.pi - _NEAR_PI)
    out[regular] = w[regular] * (angle[regular] / s[regular])[:, None]

    near_pi = angle > np.pi - _NEAR_PI
    for i in np.flatnonzero(near_pi):
        sym = 0.5 * (m[i] + m[i].T) - c[i] * np.eye(3)  # (1 - cos) n n^T
        k = int(np.argmax(np.diag(sym)))
        n = sym[:, k] / np.linalg.norm(sym[:, k])
        if s[i] > 1e-12:
            if np.dot(n, w[i]) < 0:
                n = -n
        else:
            n = _fix_half_turn_sign(n)
        out[i] = n * angle[i]

    out = out.reshape(shape + (3,))
    if is_torch:
        return torch.from_numpy(out).to(R.dtype)
    return out


def rot6d_to_mat(r, check=True):
    """Gram-Schmidt map from 6D to a rotation matrix with columns (b1, b2, b3).

    Raises DegenerateInput when the first vector vanishes or the second is
    parallel to it (both judged at 1e-12). ``check=False`` skips the test,
    which keeps forward passes free of host synchronisation.
    """
    t, np_in = _to_torch(r)
    a1, a2 = t[..., :3], t[..., 3:]
    n1 = a1.norm(dim=-1, keepdim=True)
    if check and bool((n1 < 1e-12).any()):
        raise DegenerateInput("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = u.norm(dim=-1, keepdim=True)
    if check and bool((n2 <= 1e-12 * a2.norm(dim=-1, keepdim=True).clamp_min(1.0)).any()):
        raise DegenerateInput("6D columns are parallel or the second one vanishes")
    b2 = u / n2
    b3 = torch.cross(b1, b2, dim=-1)
    return _back(torch.stack([b1, b2, b3], dim=-1), np_in)


def mat_to_rot6d(R):
    t, np_in = _to_torch(R)
    return _back(torch.cat([t[..., :, 0], t[..., :, 1]], dim=-1), np_in)


def aa_to_rot6d(a):
    return mat_to_rot6d(aa_to_mat(a))


def rot6d_to_aa(r):
    return mat_to_aa(rot6d_to_mat(r))


def geodesic_dist(R1, R2):
    """Angle of the relative rotation ``R1^T R2`` in ``[0, pi]``.

    Equal to ``arccos((tr(R1^T R2) - 1) / 2)`` but evaluated with atan2,
    which stays precise near 0 and pi.
    """
    a, np_a = _to_torch(R1)
    b, _ = _to_torch(R2)
    rel = a.transpose(-1, -2) @ b
    w = torch.stack([rel[..., 2, 1] - rel[..., 1, 2],
                     rel[..., 0, 2] - rel[..., 2, 0],
                     rel[..., 1, 0] - rel[..., 0, 1]], dim=-1)
    s = 0.5 * w.norm(dim=-1)
    c = 0.5 * (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    return _back(torch.atan2(s, c), np_a)


def random_rotations(n, rng):
    """Haar-uniform rotation matrices ``(n, 3, 3)`` from a numpy Generator."""
    from scipy.spatial.transform import Rotation

    return Rotation.random(n, random_state=rng).as_matrix()
