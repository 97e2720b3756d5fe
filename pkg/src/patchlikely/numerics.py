"""Deterministic tensor arithmetic with reverse-mode differentiation.

Tensors are plain numpy arrays (float32 by default, float64 supported for
verification work) laid out row-major; image data uses NHWC order.  Every
operation in this module can run in two modes:

* eager - all arguments are numpy arrays, the result is a numpy array;
* recorded - at least one argument is a :class:`Var` bound to a :class:`Tape`,
  the result is a new :class:`Var` and a backward closure is pushed onto the
  tape so :func:`gradient` can replay it in reverse.

The op set is deliberately closed: elementwise add/mul/neg, exp/log/tanh/
sigmoid, matmul, 3x3 same-padding conv2d, sum/mean reductions, channel
slice/concat, 2x2 space-to-depth (and its inverse) and log|det| of a square
matrix.  Anything else fails at record time rather than producing a node the
backward pass cannot handle.

Reductions and accumulations use numpy's fixed (pairwise) summation schedule,
so results are bitwise reproducible for a fixed thread configuration.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NumericsError, ShapeError

Array = np.ndarray


# ---------------------------------------------------------------------------
# recorded computation
# ---------------------------------------------------------------------------

class Tape:
    """Records the operations applied to its :class:`Var` leaves."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def var(self, value: Array | float) -> "Var":
        """Wrap ``value`` as a differentiable leaf on this tape."""
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        node = _Node(arr, parents=(), backward=None)
        self._nodes.append(node)
        return Var(self, node)

    def _record(self, value: Array, parents: tuple["_Node", ...],
                backward: Callable[[Array], Sequence[Array | None]]) -> "Var":
        node = _Node(value, parents, backward)
        self._nodes.append(node)
        return Var(self, node)


class _Node:
    __slots__ = ("value", "parents", "backward", "grad")

    def __init__(self, value, parents, backward):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.grad = None


class Var:
    """Handle to one recorded tensor.  Supports only the closed op set;
    numpy ufuncs applied to a Var raise instead of silently decaying."""

    __array_ufunc__ = None  # reject np.foo(var): unsupported op at record time
    __slots__ = ("tape", "node")

    def __init__(self, tape: Tape, node: _Node) -> None:
        self.tape = tape
        self.node = node

    @property
    def value(self) -> Array:
        return self.node.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.value.shape

    @property
    def dtype(self):
        return self.node.value.dtype

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, dtype={self.dtype})"


def _raw(x):
    if isinstance(x, Var):
        return x.node.value
    # python scalars stay scalars so numpy's weak promotion keeps the
    # operand dtype (a float64 0-d array would silently upcast float32)
    if isinstance(x, (int, float, np.integer, np.floating)):
        return x
    return np.asarray(x)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise GraphError("operands belong to different tapes")
    return tape


def _parent_nodes(tape: Tape, *args) -> tuple:
    out = []
    for a in args:
        out.append(a.node if isinstance(a, Var) else None)
    return tuple(out)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = av + bv
    if tape is None:
        return out
    an, bn = _parent_nodes(tape, a, b)

    def backward(g):
        ga = _unbroadcast(g, av.shape) if an is not None else None
        gb = _unbroadcast(g, bv.shape) if bn is not None else None
        return ga, gb

    return tape._record(out, (an, bn), backward)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = av * bv
    if tape is None:
        return out
    an, bn = _parent_nodes(tape, a, b)

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if an is not None else None
        gb = _unbroadcast(g * av, bv.shape) if bn is not None else None
        return ga, gb

    return tape._record(out, (an, bn), backward)


def neg(a):
    tape = _tape_of(a)
    out = -_raw(a)
    if tape is None:
        return out
    return tape._record(out, (a.node,), lambda g: (-g,))


def _unary(a, fn, dfn):
    tape = _tape_of(a)
    av = _raw(a)
    out = fn(av)
    if tape is None:
        return out
    return tape._record(out, (a.node,), lambda g: (g * dfn(av, out),))


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a):
    def fwd(x):
        # stable in both tails
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda x, y: y * (1.0 - y))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None):
    tape = _tape_of(a)
    av = _raw(a)
    out = av.sum(axis=axis)
    if tape is None:
        return out
    shape = av.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(av.dtype, copy=True),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g, axes)
        return (np.broadcast_to(g_exp, shape).astype(av.dtype, copy=True),)

    return tape._record(out, (a.node,), backward)


def reduce_mean(a, axis=None):
    av = _raw(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= av.shape[ax]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def channel_slice(a, lo: int, hi: int):
    """Slice ``a[..., lo:hi]`` along the channel (last) axis."""
    tape = _tape_of(a)
    av = _raw(a)
    out = np.ascontiguousarray(av[..., lo:hi])
    if tape is None:
        return out
    shape = av.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., lo:hi] = g
        return (full,)

    return tape._record(out, (a.node,), backward)


def channel_concat(a, b):
    """Concatenate along the channel (last) axis."""
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    if av.shape[:-1] != bv.shape[:-1]:
        raise ShapeError(
            f"channel_concat: leading extents differ, {av.shape} vs {bv.shape}")
    out = np.concatenate([av, bv], axis=-1)
    if tape is None:
        return out
    an, bn = _parent_nodes(tape, a, b)
    ca = av.shape[-1]

    def backward(g):
        ga = np.ascontiguousarray(g[..., :ca]) if an is not None else None
        gb = np.ascontiguousarray(g[..., ca:]) if bn is not None else None
        return ga, gb

    return tape._record(out, (an, bn), backward)


def _space_to_depth_fwd(x: Array) -> Array:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth needs even spatial extents, got {x.shape}")
    y = x.reshape(n, h // 2, 2, w // 2, 2, c)
    y = y.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(n, h // 2, w // 2, 4 * c))


def _depth_to_space_fwd(x: Array) -> Array:
    n, h, w, c4 = x.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space needs channels divisible by 4, got {x.shape}")
    c = c4 // 4
    y = x.reshape(n, h, w, 2, 2, c)
    y = y.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(n, 2 * h, 2 * w, c))


def space_to_depth(a):
    """2x2 space-to-depth on NHWC input: (N,H,W,C) -> (N,H/2,W/2,4C)."""
    tape = _tape_of(a)
    out = _space_to_depth_fwd(_raw(a))
    if tape is None:
        return out
    return tape._record(out, (a.node,), lambda g: (_depth_to_space_fwd(g),))


def depth_to_space(a):
    """Exact inverse of :func:`space_to_depth`."""
    tape = _tape_of(a)
    out = _depth_to_space_fwd(_raw(a))
    if tape is None:
        return out
    return tape._record(out, (a.node,), lambda g: (_space_to_depth_fwd(g),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b: bool = False):
    """``a @ b`` where ``b`` is a matrix; ``a`` may be any (..., K) stack."""
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    if bv.ndim != 2:
        raise ShapeError(f"matmul: second operand must be 2-D, got {bv.shape}")
    bm = bv.T if transpose_b else bv
    if av.shape[-1] != bm.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {av.shape} vs {bm.shape}")
    out = av @ bm
    if tape is None:
        return out
    an, bn = _parent_nodes(tape, a, b)

    def backward(g):
        ga = g @ bm.T if an is not None else None
        gb = None
        if bn is not None:
            a2 = av.reshape(-1, av.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
            if transpose_b:
                gb = gb.T
        return ga, gb

    return tape._record(out, (an, bn), backward)


def logabsdet(a):
    """log|det A| of a square matrix; raises when |det| <= 1e-12."""
    tape = _tape_of(a)
    av = _raw(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"logabsdet needs a square matrix, got {av.shape}")
    sign, logdet = np.linalg.slogdet(av)
    if sign == 0 or logdet <= np.log(1e-12):
        raise NumericsError("matrix is singular or near-singular (|det| <= 1e-12)")
    out = np.asarray(logdet, dtype=av.dtype)
    if tape is None:
        return out
    inv_t = np.linalg.inv(av).T.astype(av.dtype)

    def backward(g):
        return (g * inv_t,)

    return tape._record(out, (a.node,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: Array, kh: int, kw: int) -> Array:
    """Sliding 'same' windows of x (N,H,W,C) -> (N*H*W, kh*kw*C)."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (N, H, W, C, kh, kw) -> (N, H, W, kh, kw, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * h * w, kh * kw * c)


def conv2d(x, w, b=None, padding: str = "same"):
    """Cross-correlation of NHWC input with a (kh,kw,Cin,Cout) kernel.

    Stride 1, odd kernel sizes, 'same' zero padding: spatial extents are
    preserved.  Summation runs through one matmul per call, giving a fixed
    reduction order.
    """
    if padding != "same":
        raise GraphError(f"conv2d supports only 'same' padding, got {padding!r}")
    tape = _tape_of(x, w, b)
    xv, wv = _raw(x), _raw(w)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(
            f"conv2d expects NHWC input and (kh,kw,Cin,Cout) kernel, "
            f"got {xv.shape} and {wv.shape}")
    kh, kw, cin, cout = wv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {wv.shape}")
    if xv.shape[-1] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {xv.shape} vs kernel {wv.shape}")
    bv = None
    if b is not None:
        bv = _raw(b)
        if bv.shape != (cout,):
            raise ShapeError(
                f"conv2d bias must have shape ({cout},), got {bv.shape}")

    n, h, wdt, _ = xv.shape
    cols = _im2col(xv, kh, kw)
    wmat = wv.reshape(kh * kw * cin, cout)
    out_mat = cols @ wmat
    if bv is not None:
        out_mat = out_mat + bv
    out = out_mat.reshape(n, h, wdt, cout)
    if tape is None:
        return out
    xn, wn, bn = _parent_nodes(tape, x, w, b)

    def backward(g):
        g_mat = g.reshape(n * h * wdt, cout)
        gx = gw = gb = None
        if wn is not None:
            gw = (cols.T @ g_mat).reshape(kh, kw, cin, cout)
        if xn is not None:
            # full correlation of g with the spatially flipped kernel
            w_flip = wv[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh,kw,Cout,Cin)
            gcols = _im2col(g, kh, kw)
            gx = (gcols @ w_flip.reshape(kh * kw * cout, cin)).reshape(xv.shape)
        if bn is not None:
            gb = g_mat.sum(axis=0)
        return gx, gw, gb

    return tape._record(out, (xn, wn, bn), backward)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def gradient(loss: Var, params: Sequence[Var]) -> list[Array]:
    """Reverse-mode gradients of a recorded scalar ``loss`` w.r.t. ``params``.

    Accumulation replays the tape in strict reverse record order, so repeated
    runs produce bitwise-identical gradients.
    """
    if not isinstance(loss, Var):
        raise GraphError("loss is not a recorded value")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    for p in params:
        if not isinstance(p, Var) or p.tape is not tape:
            raise GraphError("every parameter must be a Var on the loss tape")

    for node in tape._nodes:
        node.grad = None
    loss.node.grad = np.ones_like(loss.node.value)

    for node in reversed(tape._nodes):
        if node.grad is None or node.backward is None:
            continue
        parent_grads = node.backward(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if parent is None or g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g

    grads = []
    for p in params:
        g = p.node.grad
        if g is None:
            g = np.zeros_like(p.node.value)
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient encountered")
        grads.append(g)
    return grads


def finite_diff_gradient(f: Callable[[list[Array]], float],
                         params: Sequence[Array],
                         eps: float = 1e-3) -> list[Array]:
    """Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps).

    Perturbs one coordinate at a time; ``f`` receives the full parameter list
    and returns a scalar.  Intended for verification, so ``params`` are
    usually float64.
    """
    if eps <= 0:
        raise NumericsError(f"finite_diff_gradient needs eps > 0, got {eps}")
    params = [np.array(p, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in params]
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params))
            flat[i] = orig - eps
            fm = float(f(params))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grads


# ---------------------------------------------------------------------------
# random sampling
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic counter-based generator (Philox).

    The (seed, stream) pair fully determines the output sequence on every
    platform, which is what checkpoint resume and the reproducibility
    contracts rely on.
    """

    MASK64 = (1 << 64) - 1

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = int(seed) & self.MASK64
        self.stream = int(stream) & self.MASK64
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream],
                                               dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def random01(self, shape, dtype=np.float32) -> Array:
        """Uniform[0, 1) draws in the requested dtype."""
        return self._gen.random(size=tuple(shape), dtype=dtype)


def gaussian_sample(rng: Rng, shape, dtype=np.float32) -> Array:
    """I.i.d. standard-normal draws."""
    return rng._gen.standard_normal(size=tuple(shape)).astype(dtype)


def uniform_sample(rng: Rng, shape, lo: float, hi: float,
                   dtype=np.float32) -> Array:
    """I.i.d. Uniform[lo, hi) draws; a degenerate lo == hi interval is the
    constant lo, while lo > hi is rejected."""
    if lo > hi:
        raise NumericsError(f"uniform_sample needs lo <= hi, got [{lo}, {hi})")
    if lo == hi:
        return np.full(tuple(shape), lo, dtype=dtype)
    u = rng._gen.random(size=tuple(shape))
    return (lo + (hi - lo) * u).astype(dtype)
