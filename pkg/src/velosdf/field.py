"""Time-dependent SDF and color networks with SDF volume rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .nets import MLPShape, encoded_dim, init_mlp, mlp_forward, positional_encoding

PHI_FLOOR = 1e-7


@dataclass(frozen=True)
class FieldConfig:
    hidden: int = 128
    layers: int = 4
    skip: int | None = 2
    feature_dim: int = 64
    color_hidden: int = 64
    color_layers: int = 3
    x_octaves: int = 6
    d_octaves: int = 4
    t_octaves: int = 4
    beta: float = 100.0
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    init_radius: float = 0.5  # normalized units
    gamma_init: float = 10.0
    background: tuple = (0.0, 0.0, 0.0)
    fd_eps: float = 1e-4
    bound_min: tuple = (-np.inf, -np.inf, -np.inf)
    bound_max: tuple = (np.inf, np.inf, np.inf)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    time: float = 0.0
    pixel: tuple = (0, 0)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)


@dataclass
class RaySamples:
    depths: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if len(self.depths) < 2 or np.any(np.diff(self.depths) <= 0):
            raise ValueError("sample depths must be strictly increasing with K >= 2")

    def points(self, ray: Ray) -> np.ndarray:
        return ray.origin + self.depths[:, None] * ray.direction


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    surface_point: np.ndarray
    weights: np.ndarray
    opacity: float


class OutOfBounds(UserWarning):
    pass


def sample_ray_depths(near: float, far: float, K: int, rng: np.random.Generator | None = None,
                      stratified: bool = True, n_rays: int | None = None) -> np.ndarray:
    """One depth per equal bin of ``[near, far]``: a uniform draw, or the bin midpoint.

    Returns ``(K,)``, or ``(n_rays, K)`` when ``n_rays`` is given.
    """
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    if K < 2:
        raise ValueError("need K >= 2")
    edges = near + (far - near) * np.arange(K) / K
    width = (far - near) / K
    shape = (K,) if n_rays is None else (n_rays, K)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random(shape)
    else:
        u = np.full(shape, 0.5)
    return np.minimum(edges + u * width, np.nextafter(far, near))


def sdf_to_density(s, gamma) -> Tensor:
    """Per-interval opacity from consecutive SDF samples along the last axis.

    ``sigma_i = max((Phi(s_i) - Phi(s_{i+1})) / Phi(s_i), 0)`` with the
    logistic ``Phi(s) = 1 / (1 + exp(-gamma s))``; the last sample has no
    successor and gets ``sigma_K = 0``.
    """
    s = ad.tensor(s)
    phi = ad.sigmoid(s * gamma)
    cur, nxt = phi[..., :-1], phi[..., 1:]
    ratio = (cur - nxt) / ad.maximum(cur, PHI_FLOOR)
    sigma = ad.maximum(ratio, 0.0)
    zeros = np.zeros(s.shape[:-1] + (1,))
    return ad.concat([sigma, zeros], axis=-1)


def composite(sigma, colors, depths, points, background=(0.0, 0.0, 0.0)) -> dict:
    """Alpha-composite samples along the second-to-last axis of ``colors``.

    ``sigma``/``depths`` are ``(R, K)``, ``colors``/``points`` ``(R, K, 3)``.
    Returns tensors: color, depth, surface_point, weights, opacity.
    """
    sigma = ad.tensor(sigma)
    trans = ad.cumprod_exclusive(1.0 - sigma)
    w = trans * sigma
    w3 = ad.reshape(w, w.shape + (1,))
    opacity = ad.sum_(w, axis=-1)
    color = ad.sum_(w3 * colors, axis=-2)
    bg = np.asarray(background, dtype=np.float64)
    if np.any(bg != 0):
        color = color + ad.reshape(1.0 - opacity, opacity.shape + (1,)) * bg
    return {
        "color": color,
        "depth": ad.sum_(w * depths, axis=-1),
        "surface_point": ad.sum_(w3 * points, axis=-2),
        "weights": w,
        "opacity": opacity,
    }


class FieldNetworks:
    """SDF network ``(x, t) -> (s, feature)`` and color network ``(x, d, t, feature) -> rgb``.

    Points are normalized as ``(x - center) / scale`` before encoding and the
    SDF output is multiplied back by ``scale``, so values are in scene units.
    """

    def __init__(self, cfg: FieldConfig = FieldConfig(), store: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.center = np.asarray(cfg.center, dtype=np.float64)
        self.in_dim = encoded_dim(3, cfg.x_octaves) + encoded_dim(1, cfg.t_octaves)
        self.sdf_shape = MLPShape(self.in_dim, cfg.hidden, cfg.layers, 1 + cfg.feature_dim, cfg.skip)
        color_in = 3 + encoded_dim(3, cfg.d_octaves) + encoded_dim(1, cfg.t_octaves) + cfg.feature_dim
        self.color_shape = MLPShape(color_in, cfg.color_hidden, cfg.color_layers, 3)
        self.store = store if store is not None else ParameterStore()
        if "sdf.W0" not in self.store:
            rng = np.random.default_rng(seed)
            self._geometric_init(rng)
            init_mlp(self.store, "color", self.color_shape, rng)
            self.store.add("gamma_log", np.array(np.log(cfg.gamma_init)))

    def _geometric_init(self, rng: np.random.Generator) -> None:
        """Weights so that ``s(x, t) ~ |x - center| - init_radius * scale`` at start."""
        sh = self.sdf_shape
        r0 = self.cfg.init_radius
        for i, (din, dout) in enumerate(sh.layer_dims()):
            if i == sh.layers:
                W = rng.normal(np.sqrt(np.pi) / np.sqrt(din), 1e-4, (din, dout))
                b = np.full(dout, -r0)
            else:
                W = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(dout), (din, dout))
                b = np.zeros(dout)
                if i == 0:
                    W[3:, :] = 0.0
                elif sh.skip is not None and i == sh.skip:
                    W[din - sh.in_dim + 3:, :] = 0.0
            self.store.add(f"sdf.W{i}", W)
            self.store.add(f"sdf.b{i}", b)

    # ----------------------------------------------------------------- params

    prefixes = ("sdf.", "color.", "gamma_log")

    def param_names(self) -> list[str]:
        return [k for k in self.store if k.startswith(self.prefixes)]

    def params(self, trainable: bool = False) -> dict:
        return {k: Tensor(self.store[k], requires_grad=trainable, name=k) for k in self.param_names()}

    def gamma(self, params: dict) -> Tensor:
        return ad.exp(params["gamma_log"])

    # --------------------------------------------------------------- forward

    def normalize(self, x):
        return (ad.tensor(x) - self.center) * (1.0 / self.cfg.scale)

    def _encode(self, xt_n) -> Tensor:
        xt_n = ad.tensor(xt_n)
        return ad.concat(
            [positional_encoding(xt_n[:, :3], self.cfg.x_octaves), positional_encoding(xt_n[:, 3:4], self.cfg.t_octaves)],
            axis=-1,
        )

    def _sdf_net(self, params: dict, xt_n, with_features: bool) -> Tensor:
        act = lambda h: ad.softplus(h, self.cfg.beta)
        sh = self.sdf_shape
        x = self._encode(xt_n)
        h = x
        for i in range(sh.layers + 1):
            if sh.skip is not None and i == sh.skip:
                h = ad.concat([h, x], axis=-1) * (1.0 / np.sqrt(2.0))
            W, b = params[f"sdf.W{i}"], params[f"sdf.b{i}"]
            if i == sh.layers and not with_features:
                W, b = W[:, :1], b[:1]
            h = ad.linear(h, W, b)
            if i < sh.layers:
                h = act(h)
        return h

    def sdf_normalized(self, params: dict):
        """``f(xt_n) -> s`` on normalized ``(M, 4)`` inputs, for finite differences."""
        return lambda xt_n: self._sdf_net(params, xt_n, False)[:, 0] * self.cfg.scale

    def xt_input(self, x, t) -> Tensor:
        x = ad.tensor(x)
        t = ad.tensor(t)
        if t.ndim == 0 or t.size == 1:
            t = ad.Tensor(np.full((x.shape[0], 1), float(t.data.reshape(-1)[0])))
        else:
            t = ad.reshape(t, (x.shape[0], 1))
        return ad.concat([self.normalize(x), t], axis=-1)

    def sdf_features(self, params: dict, x, t) -> tuple[Tensor, Tensor]:
        """``(M, 3)`` points at time(s) ``t`` -> SDF ``(M,)`` and features ``(M, F)``."""
        out = self._sdf_net(params, self.xt_input(x, t), True)
        return out[:, 0] * self.cfg.scale, out[:, 1:]

    def sdf(self, params: dict, x, t) -> Tensor:
        return self.sdf_normalized(params)(self.xt_input(x, t))

    def color(self, params: dict, x, d, t, features) -> Tensor:
        x = ad.tensor(x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        inp = ad.concat(
            [
                self.normalize(x),
                positional_encoding(d, self.cfg.d_octaves),
                positional_encoding(t, self.cfg.t_octaves),
                features,
            ],
            axis=-1,
        )
        return mlp_forward(params, "color", self.color_shape, inp, ad.relu, ad.sigmoid)

    def sdf_gradients(self, params: dict, x, t, dims=(0, 1, 2, 3)) -> Tensor:
        """On-tape central differences of the SDF w.r.t. ``(x, y, z, t)``.

        Returns ``(M, len(dims))`` in scene units (spatial) and per unit of
        normalized time. Near the ends of the time range the time difference
        becomes one-sided so that evaluations stay inside [-1, 1].
        """
        eps = self.cfg.fd_eps
        xt = self.xt_input(x, t)
        f = self.sdf_normalized(params)
        dims = list(dims)
        spatial = [k for k in dims if k < 3]
        outs = {}
        if spatial:
            g = ad.input_gradient_fd(f, xt, eps, spatial) * (1.0 / self.cfg.scale)
            for j, k in enumerate(spatial):
                outs[k] = g[:, j]
        if 3 in dims:
            outs[3] = self._time_derivative(f, xt, eps)
        return ad.stack([outs[k] for k in dims], axis=-1)

    @staticmethod
    def _time_derivative(f, xt: Tensor, eps: float) -> Tensor:
        tv = xt.data[:, 3]
        hi = np.minimum(tv + eps, 1.0) - tv
        lo = tv - np.maximum(tv - eps, -1.0)
        n = xt.shape[0]
        plus = np.zeros((n, 4))
        minus = np.zeros((n, 4))
        plus[:, 3] = hi
        minus[:, 3] = -lo
        vals = f(ad.concat([xt + plus, xt + minus], axis=0))
        return (vals[:n] - vals[n:]) * (1.0 / (hi + lo))

    def surface_normal(self, params: dict, x, t) -> Tensor:
        return self.sdf_gradients(params, x, t, dims=(0, 1, 2))

    def sdf_time_derivative(self, params: dict, x, t) -> Tensor:
        return self.sdf_gradients(params, x, t, dims=(3,))[:, 0]

    # ------------------------------------------------------------- rendering

    def render_rays(self, params: dict, origins, dirs, t, depths, background=None) -> dict:
        """Volume-render ``R`` rays with ``(R, K)`` sample depths at time ``t``.

        ``origins``/``dirs`` may be tensors (e.g. during pose registration).
        Returns the :func:`composite` dict plus per-sample ``points`` and ``sdf``.
        """
        origins, dirs = ad.tensor(origins), ad.tensor(dirs)
        h = np.asarray(depths, dtype=np.float64)
        R, K = h.shape
        pts = ad.reshape(origins, (R, 1, 3)) + ad.reshape(dirs, (R, 1, 3)) * h[..., None]
        flat = ad.reshape(pts, (R * K, 3))
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (R, K)).reshape(-1)
        s, feat = self.sdf_features(params, flat, tcol)
        dflat = ad.reshape(ad.broadcast_to(ad.reshape(dirs, (R, 1, 3)), (R, K, 3)), (R * K, 3))
        rgb = ad.reshape(self.color(params, flat, dflat, tcol, feat), (R, K, 3))
        sigma = sdf_to_density(ad.reshape(s, (R, K)), self.gamma(params))
        bg = self.cfg.background if background is None else background
        out = composite(sigma, rgb, h, pts, bg)
        out["points"] = pts
        out["sdf"] = ad.reshape(s, (R, K))
        out["sigma"] = sigma
        return out

    # -------------------------------------------------------- numpy frontends

    def _clamp(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = np.asarray(self.cfg.bound_min), np.asarray(self.cfg.bound_max)
        clamped = np.clip(x, lo, hi)
        return clamped, np.any(clamped != x, axis=-1)

    def query_sdf(self, x, t, params: dict | None = None, return_flag: bool = False):
        """SDF at ``(3,)`` or ``(N, 3)`` points; out-of-box points are clamped and flagged."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xc, flag = self._clamp(x.reshape(-1, 3))
        s = self.sdf(params or self.params(), xc, float(t)).data
        out = s[0] if single else s
        if return_flag:
            return out, (flag[0] if single else flag)
        return out

    def query_color(self, x, d, t, params: dict | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = self._clamp(x.reshape(-1, 3))[0]
        d2 = np.broadcast_to(np.asarray(d, dtype=np.float64).reshape(-1, 3), x2.shape)
        d2 = d2 / np.linalg.norm(d2, axis=-1, keepdims=True)
        p = params or self.params()
        _, feat = self.sdf_features(p, x2, float(t))
        c = self.color(p, x2, d2, float(t), feat).data
        return c[0] if single else c

    def query_normal(self, x, t, params: dict | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = self.surface_normal(params or self.params(), x.reshape(-1, 3), float(t)).data
        return n[0] if x.ndim == 1 else n

    def query_sdf_time_derivative(self, x, t, params: dict | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = self.sdf_time_derivative(params or self.params(), x.reshape(-1, 3), float(t)).data
        return d[0] if x.ndim == 1 else d

    def render_ray(self, ray: Ray, samples: RaySamples, params: dict | None = None, background=None) -> RenderResult:
        h = samples.depths[None, :]
        out = self.render_rays(params or self.params(), ray.origin[None], ray.direction[None], ray.time, h, background)
        return RenderResult(
            color=out["color"].data[0],
            depth=float(out["depth"].data[0]),
            surface_point=out["surface_point"].data[0],
            weights=out["weights"].data[0],
            opacity=float(out["opacity"].data[0]),
        )
