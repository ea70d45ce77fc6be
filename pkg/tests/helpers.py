"""Shared test fixtures: tiny networks, exact-affine fields, central differences."""

from __future__ import annotations

import numpy as np

from velosdf import autodiff as ad
from velosdf.field import FieldConfig, FieldNetworks
from velosdf.motion import MotionNetwork

TINY_FIELD = FieldConfig(hidden=16, layers=2, skip=1, feature_dim=4, color_hidden=8, color_layers=2,
                         x_octaves=2, d_octaves=1, t_octaves=1)


def tiny_field(seed=0, **kw) -> FieldNetworks:
    cfg = FieldConfig(**{**TINY_FIELD.__dict__, **kw})
    return FieldNetworks(cfg, seed=seed)


def constant_motion(omega, vel, hidden=8) -> MotionNetwork:
    """A motion network whose output is exactly ``(omega, vel)`` everywhere."""
    net = MotionNetwork(hidden=hidden, layers=1)
    net.store["motion.b1"][...] = np.r_[omega, vel]
    return net


def random_motion(seed=0, scale=0.3, hidden=16) -> MotionNetwork:
    rng = np.random.default_rng(seed)
    net = MotionNetwork(hidden=hidden, layers=2, seed=seed)
    for k in net.store.names("motion"):
        net.store[k][...] = rng.normal(0.0, scale, net.store[k].shape)
    return net


def affine_field(a=(0.0, 0.0, 1.0), b=0.0, c=0.0, **kw) -> FieldNetworks:
    """A field whose SDF network computes ``a . x_n + b t + c`` exactly.

    Uses ``softplus(z) - softplus(-z) = z`` to carry the affine value through
    the hidden layers; the skip-layer input columns are zeroed.
    """
    f = tiny_field(**kw)
    sh, st = f.sdf_shape, f.store
    lin = np.zeros(sh.in_dim)
    lin[:3] = a
    lin[f.in_dim - encoded_t_dim(f)] = b  # raw t column
    for i, (din, dout) in enumerate(sh.layer_dims()):
        W = np.zeros((din, dout))
        bias = np.zeros(dout)
        if i == 0:
            W[:, 0], W[:, 1] = lin, -lin
            bias[0], bias[1] = c, -c
        elif i < sh.layers:
            scale = np.sqrt(2.0) if sh.skip == i else 1.0  # undo the skip scaling
            W[0, 0], W[1, 0], W[0, 1], W[1, 1] = scale, -scale, -scale, scale
        else:
            W[0, 0], W[1, 0] = 1.0 / f.cfg.scale, -1.0 / f.cfg.scale
        st[f"sdf.W{i}"][...] = W
        st[f"sdf.b{i}"][...] = bias
    return f


def encoded_t_dim(f: FieldNetworks) -> int:
    return 1 + 2 * f.cfg.t_octaves


def fd_gradient(fn, arrays: dict, names_idx, h=1e-6) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. selected ``(name, index)`` entries."""
    out = []
    for name, idx in names_idx:
        arr = arrays[name]
        old = arr[idx]
        arr[idx] = old + h
        fp = fn()
        arr[idx] = old - h
        fm = fn()
        arr[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def pick_entries(store, names, per_name=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for n in names:
        shape = store[n].shape
        for _ in range(per_name):
            out.append((n, tuple(int(rng.integers(s)) for s in shape)))
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def tensor_fn(fn):
    """Wrap a numpy function of ``(M, D)`` points for use with input_gradient_fd."""
    return lambda p: ad.Tensor(fn(p.data))
