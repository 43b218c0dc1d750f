"""Reverse-mode automatic differentiation over a per-sample tape.

The tape records coarse array-level primitives (whole softmax, whole ZNCC
normalization, whole SVD alignment) rather than scalar operations; each
primitive carries a hand-derived pullback. One tape per training sample;
`backward` walks the record once in reverse index order, which makes
gradient accumulation deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import estimator as _estimator
from .errors import DegenerateGradient, OutOfBounds, ShapeError

Array = np.ndarray


@dataclass
class _Node:
    value: Array
    parents: tuple[int, ...] = ()
    pullback: Callable[[Array], tuple] | None = None
    is_param: bool = False
    name: str | None = None


class Var:
    """Handle to a node on a tape. Supports arithmetic operators; everything
    else lives in module-level functions."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape._nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of primitive operations. Nodes are appended in
    execution order, so the record is topologically sorted by construction."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.param_indices: list[int] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, node: _Node) -> Var:
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def constant(self, value) -> Var:
        return self._push(_Node(np.asarray(value, dtype=float)))

    def param(self, value, name: str | None = None) -> Var:
        v = self._push(_Node(np.asarray(value, dtype=float), is_param=True, name=name))
        self.param_indices.append(v.index)
        return v

    def record(self, value: Array, parents: Sequence[Var], pullback) -> Var:
        idx = tuple(p.index for p in parents)
        return self._push(_Node(np.asarray(value), idx, pullback))


class GradientMap(Mapping):
    """Partial derivatives of a scalar output, keyed by parameter node index."""

    def __init__(self, grads: dict[int, Array]):
        self._grads = grads

    def __getitem__(self, index: int) -> Array:
        return self._grads[index]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple[Tape, Var, Var]:
    tape = a.tape if isinstance(a, Var) else b.tape
    return tape, _as_var(tape, a), _as_var(tape, b)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g).reshape(shape)


def backward(tape: Tape, output: Var) -> GradientMap:
    """Reverse accumulation from a scalar output to every parameter node."""
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    out_val = output.value
    if out_val.shape != ():
        raise ShapeError(f"backward needs a scalar output, got shape {out_val.shape}")

    nodes = tape._nodes
    adjoints: dict[int, Array] = {output.index: np.ones(())}
    for i in range(output.index, -1, -1):
        adj = adjoints.pop(i, None)
        if adj is None:
            continue
        node = nodes[i]
        if node.pullback is None:
            if node.is_param:
                adjoints[i] = adj  # keep parameter grads
            continue
        parent_grads = node.pullback(adj)
        for p, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if p in adjoints:
                adjoints[p] = adjoints[p] + g
            else:
                adjoints[p] = np.asarray(g, dtype=float)

    grads = {
        i: adjoints.get(i, np.zeros_like(nodes[i].value))
        for i in tape.param_indices
    }
    return GradientMap(grads)


def finite_diff(f: Callable[[Array], float], x: Array, h: float | None = None) -> Array:
    """Central-difference gradient estimate of a scalar function.

    With h omitted, uses the per-coordinate step 1e-6 * max(1, |x_i|).
    """
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        step = h if h is not None else 1e-6 * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting supported)


def add(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def pull(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape.record(av + bv, (a, b), pull)


def sub(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def pull(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape.record(av - bv, (a, b), pull)


def mul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def pull(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape.record(av * bv, (a, b), pull)


def div(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def pull(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return tape.record(av / bv, (a, b), pull)


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def sin(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Var) -> Var:
    av = a.value
    out = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                   np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def atan2(y, x) -> Var:
    tape, y, x = _pair(y, x)
    yv, xv = y.value, x.value
    denom = xv * xv + yv * yv

    def pull(g):
        return (
            _unbroadcast(g * xv / denom, yv.shape),
            _unbroadcast(-g * yv / denom, xv.shape),
        )

    return tape.record(np.arctan2(yv, xv), (y, x), pull)


# ---------------------------------------------------------------------------
# reductions and structure


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, av.shape).copy(),)

    return a.tape.record(out, (a,), pull)


def mean_(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value
    n = av.size if axis is None else np.prod(
        [av.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Var, shape) -> Var:
    av = a.value
    return a.tape.record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a: Var, axes=None) -> Var:
    av = a.value
    if axes is None:
        axes = tuple(reversed(range(av.ndim)))
    inv = np.argsort(axes)
    return a.tape.record(
        np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = parts[0].tape
    vals = [p.value for p in parts]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(np.concatenate(vals, axis=axis), tuple(parts), pull)


def take(a: Var, indices, axis: int = 0) -> Var:
    """Gather along an axis; adjoint scatter-adds back."""
    av = a.value
    idx = np.asarray(indices)

    def pull(g):
        out = np.zeros_like(av)
        sl: list = [slice(None)] * av.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return a.tape.record(np.take(av, idx, axis=axis), (a,), pull)


def matmul(a: Var, b: Var) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def pull(g):
        ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        gb = av.T @ g
        return ga, gb

    return tape.record(av @ bv, (a, b), pull)


def softmax(a: Var, axis: int = -1) -> Var:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return a.tape.record(out, (a,), pull)


# ---------------------------------------------------------------------------
# image-shaped primitives


def _im2col(x: Array, kh: int, kw: int) -> Array:
    """(C, H, W) zero-padded 'same' -> (C*kh*kw, H*W)."""
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # windows: (C, H, W, kh, kw)
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h * w)


def _col2im(cols: Array, shape: tuple[int, int, int], kh: int, kw: int) -> Array:
    """Adjoint of _im2col."""
    c, h, w = shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((c, h + 2 * ph, w + 2 * pw))
    cols = cols.reshape(c, kh, kw, h, w)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h, j : j + w] += cols[:, i, j]
    return out[:, ph : ph + h, pw : pw + w]


def conv2d(x: Var, weight: Var, bias: Var) -> Var:
    """'Same' 2D convolution (zero padding, stride 1).

    x: (C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,).
    """
    xv, wv, bv = x.value, weight.value, bias.value
    c_out, c_in, kh, kw = wv.shape
    if xv.ndim != 3 or xv.shape[0] != c_in:
        raise ShapeError(f"conv2d input {xv.shape} incompatible with kernel {wv.shape}")
    _, h, w = xv.shape
    cols = _im2col(xv, kh, kw)
    wmat = wv.reshape(c_out, c_in * kh * kw)
    out = (wmat @ cols).reshape(c_out, h, w) + bv[:, None, None]

    def pull(g):
        gmat = g.reshape(c_out, h * w)
        gx = _col2im(wmat.T @ gmat, xv.shape, kh, kw)
        gw = (gmat @ cols.T).reshape(wv.shape)
        gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    return x.tape.record(out, (x, weight, bias), pull)


def avgpool2(x: Var) -> Var:
    """2x2 average pooling, stride 2. H and W must be even."""
    xv = x.value
    c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {xv.shape}")
    out = xv.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def pull(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return x.tape.record(out, (x,), pull)


def upsample_nearest(x: Var, factor: int = 2) -> Var:
    xv = x.value

    def pull(g):
        c, h, w = xv.shape
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return x.tape.record(
        np.repeat(np.repeat(xv, factor, axis=1), factor, axis=2), (x,), pull
    )


def _linear_weights(n_out: int, n_in: int):
    """Align-corners bilinear resampling weights along one axis."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
    frac = pos - i0
    return i0, frac


def upsample_bilinear(x: Var, out_hw: tuple[int, int]) -> Var:
    """Resize (C, h, w) -> (C, H, W) with align-corners bilinear interpolation."""
    xv = x.value
    c, h, w = xv.shape
    H, W = out_hw
    i0, fy = _linear_weights(H, h)
    j0, fx = _linear_weights(W, w)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fy_ = fy[None, :, None]
    fx_ = fx[None, None, :]
    top = xv[:, i0][:, :, j0] * (1 - fx_) + xv[:, i0][:, :, j1] * fx_
    bot = xv[:, i1][:, :, j0] * (1 - fx_) + xv[:, i1][:, :, j1] * fx_
    out = top * (1 - fy_) + bot * fy_

    def pull(g):
        gx = np.zeros_like(xv)
        for wy, ii in ((1 - fy, i0), (fy, i1)):
            for wx, jj in ((1 - fx, j0), (fx, j1)):
                contrib = g * wy[None, :, None] * wx[None, None, :]
                np.add.at(gx, (slice(None), ii[:, None], jj[None, :]), contrib)
        return (gx,)

    return x.tape.record(out, (x,), pull)


BOUNDS_SLACK = 1e-6  # px; convex combinations can overshoot by rounding


def bilinear_sample(m: Var, pts: Var) -> Var:
    """Sample a (C, H, W) map at (N, 2) sub-pixel (u, v) points -> (N, C).

    Differentiable in both the map and the points; raises OutOfBounds for
    points outside [0, W-1] x [0, H-1] (beyond rounding slack).
    """
    mv, pv = m.value, pts.value
    c, h, w = mv.shape
    u, v = pv[:, 0], pv[:, 1]
    if (
        np.any(u < -BOUNDS_SLACK)
        or np.any(u > w - 1 + BOUNDS_SLACK)
        or np.any(v < -BOUNDS_SLACK)
        or np.any(v > h - 1 + BOUNDS_SLACK)
    ):
        raise OutOfBounds("sample point outside image bounds")
    u = np.clip(u, 0.0, float(w - 1))
    v = np.clip(v, 0.0, float(h - 1))
    x0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    y0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    m00 = mv[:, y0, x0].T
    m01 = mv[:, y0, x0 + 1].T if w > 1 else m00
    m10 = mv[:, y0 + 1, x0].T if h > 1 else m00
    m11 = mv[:, y0 + 1, x0 + 1].T if (h > 1 and w > 1) else m00
    out = (
        m00 * (1 - fx) * (1 - fy)
        + m01 * fx * (1 - fy)
        + m10 * (1 - fx) * fy
        + m11 * fx * fy
    )

    def pull(g):
        gm = np.zeros_like(mv)
        np.add.at(gm, (slice(None), y0, x0), (g * (1 - fx) * (1 - fy)).T)
        np.add.at(gm, (slice(None), y0, x0 + 1), (g * fx * (1 - fy)).T)
        np.add.at(gm, (slice(None), y0 + 1, x0), (g * (1 - fx) * fy).T)
        np.add.at(gm, (slice(None), y0 + 1, x0 + 1), (g * fx * fy).T)
        du = ((m01 - m00) * (1 - fy) + (m11 - m10) * fy) if w > 1 else np.zeros_like(out)
        dv = ((m10 - m00) * (1 - fx) + (m11 - m01) * fx) if h > 1 else np.zeros_like(out)
        gp = np.stack([(g * du).sum(axis=1), (g * dv).sum(axis=1)], axis=1)
        return gm, gp

    return m.tape.record(out, (m, pts), pull)


# ---------------------------------------------------------------------------
# matching and alignment primitives

ZNCC_VARIANCE_FLOOR = 1e-12


def row_znorm(x: Var) -> Var:
    """Zero-normalize each row so that dot products of rows are ZNCC values.

    Rows with (near-)zero variance map to zero, making constant descriptors
    unmatchable rather than undefined.
    """
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    norm = np.sqrt((centered * centered).sum(axis=1, keepdims=True))
    ok = norm > ZNCC_VARIANCE_FLOOR
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, centered / safe, 0.0)

    def pull(g):
        h = np.where(ok, (g - out * (g * out).sum(axis=1, keepdims=True)) / safe, 0.0)
        return (h - h.mean(axis=1, keepdims=True),)

    return x.tape.record(out, (x,), pull)


def rigid_align(p_s: Var, p_t: Var, w: Var) -> Var:
    """Weighted rigid alignment of (N, 3) point sets; returns a flat
    12-vector [C.ravel(), r] with C @ p_s + r ~ p_t.

    Differentiates the closed-form SVD solution; raises DegenerateGradient
    when singular values tie within tolerance (the adjoint would blow up).
    """
    ps, pt, wv = p_s.value, p_t.value, w.value
    C, r, aux = _estimator.align_core(ps, pt, wv)
    U, s, Vt, D = aux.U, aux.s, aux.Vt, aux.D
    gaps = np.array([s[0] - s[1], s[1] - s[2], s[0] - s[2]])
    if gaps.min() < 1e-8 * max(1.0, s[0]):
        raise DegenerateGradient(f"near-tied singular spectrum {s}")

    wsum = wv.sum()
    wn = wv / wsum
    mu_s = wn @ ps
    mu_t = wn @ pt
    a = ps - mu_s
    b = pt - mu_t

    # F[i, j] = 1 / (s_j^2 - s_i^2) off the diagonal
    s2 = s * s
    denom = s2[None, :] - s2[:, None]
    F = np.zeros((3, 3))
    off = ~np.eye(3, dtype=bool)
    F[off] = 1.0 / denom[off]

    def pull(g):
        gC = g[:9].reshape(3, 3)
        gr = g[9:]
        # r = mu_t - C @ mu_s
        gC = gC - np.outer(gr, mu_s)
        gmu_t = gr.copy()
        gmu_s = -C.T @ gr
        # C = U @ D @ Vt: adjoints of the SVD factors
        gU = gC @ Vt.T @ D
        gV = gC.T @ U @ D
        A = U.T @ gU
        B = Vt @ gV
        P = F * ((A - A.T) * s[None, :] + s[:, None] * (B - B.T))
        gW = U @ P @ Vt
        # W = sum_i wn_i * outer(b_i, a_i)
        gb = wn[:, None] * (a @ gW.T)
        ga = wn[:, None] * (b @ gW)
        gwn = np.einsum("ij,ni,nj->n", gW, b, a)
        # centering
        gp_t = gb.copy()
        gmu_t = gmu_t - gb.sum(axis=0)
        gp_s = ga.copy()
        gmu_s = gmu_s - ga.sum(axis=0)
        # weighted centroids
        gp_s += np.outer(wn, gmu_s)
        gp_t += np.outer(wn, gmu_t)
        gwn += ps @ gmu_s + pt @ gmu_t
        # weight normalization
        gw = (gwn - gwn @ wn) / wsum
        return gp_s, gp_t, gw

    return p_s.tape.record(np.concatenate([C.ravel(), r]), (p_s, p_t, w), pull)


def svd_alignment_gradient(
    points_s: Array, points_t: Array, weights: Array, upstream: Array
) -> tuple[Array, Array, Array]:
    """Gradients of the weighted alignment w.r.t. its inputs.

    `upstream` is the 12-vector [dL/dC.ravel(), dL/dr]; returns gradients
    for the source points, target points, and weights.
    """
    tape = Tape()
    ps = tape.param(points_s)
    pt = tape.param(points_t)
    w = tape.param(weights)
    out = rigid_align(ps, pt, w)
    loss = sum_(mul(out, tape.constant(np.asarray(upstream, dtype=float))))
    grads = backward(tape, loss)
    return grads[ps.index], grads[pt.index], grads[w.index]
