"""A small define-by-run reverse-mode autodiff engine on float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in creation order, so the tape is always topologically sorted.
Outside a tape, operations just compute values.

Input derivatives of recorded functions (normals, time derivatives) are taken
with :func:`input_gradient_fd`, central differences assembled from ordinary
recorded evaluations; parameter gradients flow through them without any
second-order machinery.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarOutput(ValueError):
    pass


class NameMismatch(KeyError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Array value with an optional position on the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "index", "tape", "grad", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.index = -1
        self.tape = None
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of differentiable operations; rebuilt every iteration."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, node: Tensor) -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def backward(self, output: Tensor) -> dict:
        """Reverse sweep from a scalar ``output``.

        Returns ``{id(leaf): adjoint}`` for every leaf reached and also stores
        each leaf's adjoint on ``leaf.grad``.
        """
        if output.size != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
        leaves: dict[int, np.ndarray] = {}
        if output.tape is not self:
            if output.requires_grad and output.tape is None:
                g = np.ones_like(output.data)
                output.grad = g
                leaves[id(output)] = g
            return leaves
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.data)
        leaf_objs: dict[int, Tensor] = {}
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            adj[i] = None
            node = self.nodes[i]
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p.tape is self:
                    cur = adj[p.index]
                    adj[p.index] = pg if cur is None else cur + pg
                else:
                    cur = leaves.get(id(p))
                    leaves[id(p)] = pg if cur is None else cur + pg
                    leaf_objs[id(p)] = p
        for k, g in leaves.items():
            leaf_objs[k].grad = g
        return leaves


def backward(output: Tensor) -> dict:
    if output.tape is None:
        tape = active_tape()
        if tape is None:
            raise ValueError("no tape recorded this value")
        return tape.backward(output)
    return output.tape.backward(output)


def _make(data: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    ps = tuple(p for p in parents)
    if not any(isinstance(p, Tensor) and p.requires_grad for p in ps):
        return out
    out.requires_grad = True
    out.parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in ps)
    out.backward_fn = backward_fn
    tape._add(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "add")
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "sub")
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "mul")
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "div")
    out = av / bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    return _make(-_val(a), (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    av = _val(a)
    return _make(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    av = _val(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sin(a) -> Tensor:
    av = _val(a)
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    av = _val(a)
    return _make(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sqrt(a) -> Tensor:
    out = np.sqrt(_val(a))
    return _make(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def abs_(a) -> Tensor:
    av = _val(a)
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sigmoid(a) -> Tensor:
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    av = _val(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def softplus(a, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta x)) / beta``, stable for large ``|x|``."""
    z = _val(a) * beta
    e = np.exp(-np.abs(z))
    out = (np.maximum(z, 0.0) + np.log1p(e)) / beta

    def bw(g):
        r = 1.0 / (1.0 + e)
        return (g * np.where(z >= 0, r, e * r),)

    return _make(out, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "max")
    mask = av >= bv
    return _make(
        np.where(mask, av, bv),
        (a, b),
        lambda g: (_unbroadcast(g * mask, av.shape), _unbroadcast(g * ~mask, bv.shape)),
    )


def minimum(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "min")
    mask = av <= bv
    return _make(
        np.where(mask, av, bv),
        (a, b),
        lambda g: (_unbroadcast(g * mask, av.shape), _unbroadcast(g * ~mask, bv.shape)),
    )


def where(cond, a, b) -> Tensor:
    c = np.asarray(cond, dtype=bool)
    av, bv = _val(a), _val(b)
    return _make(
        np.where(c, av, bv),
        (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), av.shape), _unbroadcast(np.where(c, 0.0, g), bv.shape)),
    )


def stop_gradient(a) -> Tensor:
    """Same value, cut from the graph."""
    return Tensor(_val(a).copy())


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at exactly zero is taken as zero."""
    av = _val(a)
    out = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (g * np.where(out > 0, av / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


# -------------------------------------------------------------- shape changes


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def broadcast_to(a, shape) -> Tensor:
    av = _val(a)
    try:
        out = np.broadcast_to(av, shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {av.shape} to {shape}") from e
    return _make(out, (a,), lambda g: (_unbroadcast(g, av.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(_val(a), ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    av = _val(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with a numpy array, not a Tensor")

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        out = np.zeros_like(av)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make(av[idx], (a,), bw)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in items]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[v.shape for v in vals]}") from e
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in items]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"stack: {[v.shape for v in vals]}") from e
    n = len(vals)
    return _make(out, tuple(items), lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics for operands of rank >= 1."""
    av, bv = _val(a), _val(b)
    try:
        out = np.matmul(av, bv)
    except ValueError as e:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}") from e

    def bw(g):
        A = av[None, :] if av.ndim == 1 else av
        B = bv[:, None] if bv.ndim == 1 else bv
        G = g
        if av.ndim == 1:
            G = np.expand_dims(G, -2)
        if bv.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        if av.ndim == 1:
            ga = np.squeeze(ga, -2)
        if bv.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """Fused ``x @ W + b`` for a 2-D batch ``x``."""
    xv, Wv = _val(x), _val(W)
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ShapeMismatch(f"linear: {xv.shape} @ {Wv.shape}")
    out = xv @ Wv
    if b is not None:
        out += _val(b)

    def bw(g):
        gx = g @ Wv.T if isinstance(x, Tensor) and x.requires_grad else None
        gW = xv.T @ g if isinstance(W, Tensor) and W.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gW) if b is None else (gx, gW, gb)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw)


def cross(a, b) -> Tensor:
    """Cross product along the last axis."""
    av, bv = _val(a), _val(b)
    return _make(
        np.cross(av, bv),
        (a, b),
        lambda g: (_unbroadcast(np.cross(bv, g), av.shape), _unbroadcast(np.cross(g, av), bv.shape)),
    )


# ------------------------------------------------------------ specialised ops


def cumprod_exclusive(a) -> Tensor:
    """``out[..., i] = prod_{j<i} a[..., j]`` along the last axis, division free."""
    av = _val(a)
    out = np.ones_like(av)
    np.cumprod(av[..., :-1], axis=-1, out=out[..., 1:])

    def bw(g):
        K = av.shape[-1]
        # q_j = sum_{i>j} g_i prod_{j<k<i} a_k, built by a reverse scan
        q = np.zeros_like(av)
        for j in range(K - 2, -1, -1):
            q[..., j] = g[..., j + 1] + av[..., j + 1] * q[..., j + 1]
        return (out * q,)

    return _make(out, (a,), bw)


def bilinear_sample(image: np.ndarray, rows, cols) -> Tensor:
    """Sample a constant ``(H, W, C)`` image at fractional pixel positions.

    Pixel centers sit at integer coordinates. Positions are clamped to the
    image rectangle; the gradient flows to ``rows`` and ``cols``.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    r = np.clip(_val(rows), 0.0, H - 1.0)
    c = np.clip(_val(cols), 0.0, W - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), H - 2)
    c0 = np.minimum(np.floor(c).astype(np.int64), W - 2)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    I00, I01 = img[r0, c0], img[r0, c0 + 1]
    I10, I11 = img[r0 + 1, c0], img[r0 + 1, c0 + 1]
    top = I00 + fc * (I01 - I00)
    bot = I10 + fc * (I11 - I10)
    out = top + fr * (bot - top)
    inside_r = (_val(rows) >= 0) & (_val(rows) <= H - 1)
    inside_c = (_val(cols) >= 0) & (_val(cols) <= W - 1)

    def bw(g):
        d_r = ((bot - top) * g).sum(axis=-1) * inside_r
        d_c = (((I01 - I00) * (1 - fr) + (I11 - I10) * fr) * g).sum(axis=-1) * inside_c
        return d_r, d_c

    return _make(out, (rows, cols), bw)


def sinc_sq(q) -> Tensor:
    """``sin(sqrt(q)) / sqrt(q)`` for ``q >= 0``, smooth at zero."""
    qv = np.maximum(_val(q), 0.0)
    small = qv < 1e-6
    th = np.sqrt(np.where(small, 1.0, qv))
    out = np.where(small, 1.0 - qv / 6.0 + qv**2 / 120.0, np.sin(th) / th)
    d = np.where(small, -1.0 / 6.0 + qv / 60.0, (np.cos(th) - out) / (2.0 * np.where(small, 1.0, qv)))
    return _make(out, (q,), lambda g: (g * d,))


def versin_sq(q) -> Tensor:
    """``(1 - cos(sqrt(q))) / q`` for ``q >= 0``, smooth at zero."""
    qv = np.maximum(_val(q), 0.0)
    small = qv < 1e-6
    qs = np.where(small, 1.0, qv)
    th = np.sqrt(qs)
    out = np.where(small, 0.5 - qv / 24.0 + qv**2 / 720.0, (1.0 - np.cos(th)) / qs)
    d = np.where(small, -1.0 / 24.0 + qv / 360.0, (np.sin(th) / (2.0 * th) - out) / qs)
    return _make(out, (q,), lambda g: (g * d,))


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "matmul": matmul,
    "linear": linear,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "max": maximum,
    "min": minimum,
    "where": where,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "slice": getitem,
    "concat": concat,
    "stack": stack,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "norm": norm,
    "cross": cross,
    "cumprod_exclusive": cumprod_exclusive,
    "bilinear_sample": bilinear_sample,
    "stop_gradient": stop_gradient,
}


def record(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind``; recorded if a tape is active."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------ derived building blocks


def skew_batch(v) -> Tensor:
    """``(..., 3) -> (..., 3, 3)`` skew-symmetric matrices."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = x * 0.0
    rows = [stack([zero, -z, y], -1), stack([z, zero, -x], -1), stack([-y, x, zero], -1)]
    return stack(rows, -2)


def rotvec_to_matrix(theta) -> Tensor:
    """Batched Rodrigues map ``(..., 3) -> (..., 3, 3)`` on the tape."""
    theta = tensor(theta)
    q = sum_(theta * theta, axis=-1, keepdims=True)[..., None]
    K = skew_batch(theta)
    K2 = matmul(K, K)
    return np.eye(3) + sinc_sq(q) * K + versin_sq(q) * K2


def input_gradient_fd(f: Callable[[Tensor], Tensor], p, eps: float = 1e-4, dims: Sequence[int] | None = None) -> Tensor:
    """Central-difference derivative of ``f`` with respect to its input.

    ``p`` has shape ``(N, D)`` (a single point may be given as shape ``(D,)``);
    ``f`` maps ``(M, D)`` inputs to ``M`` scalar outputs. All ``2 * len(dims)``
    perturbed copies are evaluated in one batched call, so everything stays on
    the tape. Returns ``(N, len(dims))``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = tensor(p)
    single = p.ndim == 1
    if single:
        p = reshape(p, (1, -1))
    N, D = p.shape
    dims = list(range(D)) if dims is None else list(dims)
    offsets = []
    for k in dims:
        e = np.zeros(D)
        e[k] = eps
        offsets.extend([e, -e])
    offs = np.repeat(np.asarray(offsets), N, axis=0)
    batch = reshape(broadcast_to(reshape(p, (1, N, D)), (len(offsets), N, D)), (-1, D)) + offs
    vals = reshape(f(batch), (len(dims), 2, N))
    grad = (vals[:, 0, :] - vals[:, 1, :]) * (1.0 / (2.0 * eps))
    out = swapaxes(grad, 0, 1)
    return out[0] if single else out


# ------------------------------------------------------------ parameters/Adam


class ParameterStore:
    """Named float64 parameter arrays plus Adam moment buffers."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for k, a in (params or {}).items():
            self.add(k, a)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise NameMismatch(f"duplicate parameter {name!r}")
        a = np.array(value, dtype=np.float64)
        self.params[name] = a
        self.m[name] = np.zeros_like(a)
        self.v[name] = np.zeros_like(a)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def leaves(self, prefix: str = "", trainable: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors for a forward pass."""
        return {k: Tensor(self.params[k], requires_grad=trainable, name=k) for k in self.names(prefix)}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k in self.params:
            out.params[k] = self.params[k].copy()
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    def reset_optimizer(self) -> None:
        for k in self.params:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
        self.step = 0


def gradients_by_name(leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect ``leaf.grad`` after a backward pass; unreached leaves give zeros."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def adam_step(
    store: ParameterStore,
    gradients: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> ParameterStore:
    """One bias-corrected Adam update, in place. Returns ``store``.

    Only ``names`` (default: all keys of ``gradients``) are updated; every
    such name must exist in the store with a matching shape.
    """
    names = list(gradients) if names is None else list(names)
    for k in names:
        if k not in store.params:
            raise NameMismatch(f"no parameter named {k!r}")
        if k not in gradients:
            raise NameMismatch(f"missing gradient for {k!r}")
        if np.shape(gradients[k]) != store.params[k].shape:
            raise ShapeMismatch(f"{k}: gradient {np.shape(gradients[k])} vs parameter {store.params[k].shape}")
    store.step += 1
    bc1 = 1.0 - beta1**store.step
    bc2 = 1.0 - beta2**store.step
    for k in names:
        g = np.asarray(gradients[k], dtype=np.float64)
        m, v = store.m[k], store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store
