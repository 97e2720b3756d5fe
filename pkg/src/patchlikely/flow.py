"""Invertible patch-density model.

A patch (16x16x3 by default, values normalized to [-0.5, 0.5)) is squeezed
once to 8x8x12 and pushed through K steps of (actnorm, invertible 1x1
convolution, affine coupling).  The composition is exactly invertible and its
log-determinant is accumulated in closed form, so the model assigns every
patch an exact log-likelihood under a standard-normal latent prior.

All layer functions accept a single patch (H,W,C) or a batch (N,H,W,C) and
run both eagerly on numpy arrays and on recorded :class:`~.numerics.Var`
values, which is how training differentiates through the forward pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import NumericsError, ShapeError
from .numerics import Rng, Var

LOG_2PI = math.log(2.0 * math.pi)

# final-conv bias value that saturates sigmoid to exactly 1.0 in float32/64,
# used to build identity couplings for tests and reference points
_SAT_BIAS = 40.0


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ActNormParams:
    """Per-channel affine layer, y = scale * (x + bias).

    The learned array is ``log_scale``, which keeps the scale strictly
    positive by construction.
    """

    log_scale: np.ndarray
    bias: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return nx.exp(self.log_scale)

    @classmethod
    def from_scale(cls, scale, bias) -> "ActNormParams":
        scale = np.asarray(scale, dtype=np.float32)
        if np.any(scale <= 0):
            raise NumericsError("actnorm scale must be strictly positive")
        return cls(np.log(scale), np.asarray(bias, dtype=np.float32))

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "ActNormParams":
        return cls(np.zeros(channels, dtype), np.zeros(channels, dtype))


@dataclass
class InvConvParams:
    """Channel-mixing matrix applied per pixel; must stay invertible."""

    w: np.ndarray

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "InvConvParams":
        return cls(np.eye(channels, dtype=dtype))

    @classmethod
    def random_orthogonal(cls, channels: int, rng: Rng) -> "InvConvParams":
        a = nx.gaussian_sample(rng, (channels, channels), dtype=np.float64)
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))  # fix signs so the draw is unique
        return cls(q.astype(np.float32))


@dataclass
class CouplingParams:
    """Three-layer conv net predicting (raw log-scale, shift) from the
    passthrough channel half.  Output channels: first half raw_s, second
    half t; the effective scale is sigmoid(raw_s + 2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


@dataclass
class FlowStepParams:
    actnorm: ActNormParams
    invconv: InvConvParams
    coupling: CouplingParams


@dataclass
class FlowParams:
    """All learned parameters plus the hyperparameters that fix shapes."""

    patch_size: int
    hidden_width: int
    steps: list[FlowStepParams] = field(default_factory=list)
    actnorm_initialized: bool = False

    IN_CHANNELS = 3

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def channels(self) -> int:
        """Channel count after the 2x2 squeeze."""
        return 4 * self.IN_CHANNELS

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.patch_size // 2, self.patch_size // 2, self.channels)

    @property
    def dim(self) -> int:
        """Total dimensionality D of a patch."""
        return self.patch_size * self.patch_size * self.IN_CHANNELS

    def param_arrays(self) -> list[np.ndarray]:
        """All learnable tensors in the canonical (checkpoint) order."""
        out = []
        for s in self.steps:
            out.extend([s.actnorm.log_scale, s.actnorm.bias, s.invconv.w,
                        s.coupling.w1, s.coupling.b1, s.coupling.w2,
                        s.coupling.b2, s.coupling.w3, s.coupling.b3])
        return out

    def with_param_arrays(self, arrays) -> "FlowParams":
        """Rebuild the parameter tree from a flat list in canonical order."""
        arrays = list(arrays)
        if len(arrays) != 9 * len(self.steps):
            raise ShapeError(
                f"expected {9 * len(self.steps)} arrays, got {len(arrays)}")
        steps = []
        for i in range(len(self.steps)):
            a = arrays[9 * i:9 * (i + 1)]
            steps.append(FlowStepParams(
                actnorm=ActNormParams(a[0], a[1]),
                invconv=InvConvParams(a[2]),
                coupling=CouplingParams(a[3], a[4], a[5], a[6], a[7], a[8]),
            ))
        return replace(self, steps=steps)

    def astype(self, dtype) -> "FlowParams":
        arrays = [np.asarray(a, dtype=dtype) for a in self.param_arrays()]
        return self.with_param_arrays(arrays)


def init_flow_params(patch_size: int = 16, num_steps: int = 32,
                     hidden_width: int = 128, rng: Rng | None = None) -> FlowParams:
    """Random initialization: identity actnorm, random-orthogonal channel
    mixing and zero-initialized final coupling layers, so the initial flow is
    close to the identity and the step-0 NLL is tame."""
    if patch_size % 2:
        raise ShapeError(f"patch_size must be even, got {patch_size}")
    if num_steps < 1:
        raise NumericsError(f"need at least one flow step, got {num_steps}")
    rng = rng if rng is not None else Rng(0)
    c = 4 * FlowParams.IN_CHANNELS
    half = c // 2
    steps = []
    for _ in range(num_steps):
        w1 = 0.05 * nx.gaussian_sample(rng, (3, 3, half, hidden_width))
        w2 = 0.05 * nx.gaussian_sample(rng, (3, 3, hidden_width, hidden_width))
        coupling = CouplingParams(
            w1=w1, b1=np.zeros(hidden_width, np.float32),
            w2=w2, b2=np.zeros(hidden_width, np.float32),
            w3=np.zeros((3, 3, hidden_width, c), np.float32),
            b3=np.zeros(c, np.float32),
        )
        steps.append(FlowStepParams(
            actnorm=ActNormParams.identity(c),
            invconv=InvConvParams.random_orthogonal(c, rng),
            coupling=coupling,
        ))
    return FlowParams(patch_size=patch_size, hidden_width=hidden_width,
                      steps=steps)


def identity_flow_params(patch_size: int = 16, num_steps: int = 2,
                         hidden_width: int = 8, dtype=np.float32) -> FlowParams:
    """A flow that is exactly the identity modulo the squeeze: unit actnorm,
    identity mixing, and couplings saturated to scale 1 / shift 0."""
    c = 4 * FlowParams.IN_CHANNELS
    half = c // 2
    steps = []
    for _ in range(num_steps):
        b3 = np.zeros(c, dtype)
        b3[:half] = _SAT_BIAS  # sigmoid(_SAT_BIAS + 2) == 1.0 exactly
        coupling = CouplingParams(
            w1=np.zeros((3, 3, half, hidden_width), dtype),
            b1=np.zeros(hidden_width, dtype),
            w2=np.zeros((3, 3, hidden_width, hidden_width), dtype),
            b2=np.zeros(hidden_width, dtype),
            w3=np.zeros((3, 3, hidden_width, c), dtype),
            b3=b3,
        )
        steps.append(FlowStepParams(
            actnorm=ActNormParams.identity(c, dtype),
            invconv=InvConvParams(np.eye(c, dtype=dtype)),
            coupling=coupling,
        ))
    return FlowParams(patch_size=patch_size, hidden_width=hidden_width,
                      steps=steps)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _as_batch(x):
    arr = x.value if isinstance(x, Var) else np.asarray(x)
    if arr.ndim == 3:
        if isinstance(x, Var):
            raise ShapeError("recorded inputs must already be batched")
        return x[None, ...], True
    if arr.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H,W,C) or (N,H,W,C) input, got {arr.shape}")


def _raw(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _check_finite(*arrays) -> None:
    for a in arrays:
        v = _raw(a)
        if not np.all(np.isfinite(v)):
            raise NumericsError("non-finite values in flow output")


def _check_finite_batch(arr: np.ndarray) -> None:
    finite = np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    bad = np.flatnonzero(~finite)
    if bad.size:
        raise NumericsError(
            f"non-finite values in flow output at batch index {int(bad[0])}")


def squeeze(x, direction: str = "fwd"):
    """2x2 space-to-depth (fwd) / depth-to-space (inv); volume preserving."""
    xb, single = _as_batch(x)
    if direction == "fwd":
        y = nx.space_to_depth(xb)
    elif direction == "inv":
        y = nx.depth_to_space(xb)
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    return _raw(y)[0] if single else y


def _actnorm_logdet(p: ActNormParams, hw: int):
    return nx.mul(nx.reduce_sum(p.log_scale), float(hw))


def _actnorm_fwd(x, p: ActNormParams):
    y = nx.mul(nx.add(x, p.bias), p.scale)
    hw = _raw(x).shape[1] * _raw(x).shape[2]
    return y, _actnorm_logdet(p, hw)


def _actnorm_inv(y: np.ndarray, p: ActNormParams) -> np.ndarray:
    return y / np.exp(p.log_scale) - p.bias


def actnorm_apply(x, p: ActNormParams, direction: str = "fwd"):
    """Per-channel affine; returns (y, logdet).  logdet is a float for a
    single patch and carries the opposite sign for the inverse direction."""
    xb, single = _as_batch(x)
    c = _raw(xb).shape[-1]
    if _raw(p.log_scale).shape != (c,):
        raise ShapeError(
            f"actnorm has {_raw(p.log_scale).shape} channels, input has {c}")
    if direction == "fwd":
        y, logdet = _actnorm_fwd(xb, p)
    elif direction == "inv":
        y = _actnorm_inv(_raw(xb), p)
        hw = y.shape[1] * y.shape[2]
        logdet = -_actnorm_logdet(p, hw)  # exact negation of the fwd value
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    if single:
        return _raw(y)[0], float(_raw(logdet))
    return y, logdet


def _invconv_logdet(p: InvConvParams, hw: int):
    return nx.mul(nx.logabsdet(p.w), float(hw))


def _invconv_fwd(x, p: InvConvParams):
    y = nx.matmul(x, p.w, transpose_b=True)
    hw = _raw(x).shape[1] * _raw(x).shape[2]
    return y, _invconv_logdet(p, hw)


def _invconv_inv(y: np.ndarray, p: InvConvParams) -> np.ndarray:
    w = np.asarray(p.w, dtype=np.float64)
    sign, logdet = np.linalg.slogdet(w)
    if sign == 0 or logdet <= np.log(1e-12):
        raise NumericsError("invconv matrix is near-singular (|det| <= 1e-12)")
    w_inv = np.linalg.inv(w).astype(y.dtype)
    return y @ w_inv.T


def invconv_apply(x, p: InvConvParams, direction: str = "fwd"):
    """Per-pixel channel mixing by a learned invertible matrix."""
    xb, single = _as_batch(x)
    c = _raw(xb).shape[-1]
    if _raw(p.w).shape != (c, c):
        raise ShapeError(f"invconv matrix {_raw(p.w).shape} does not match "
                         f"channel count {c}")
    if direction == "fwd":
        y, logdet = _invconv_fwd(xb, p)
    elif direction == "inv":
        y = _invconv_inv(_raw(xb), p)
        hw = y.shape[1] * y.shape[2]
        logdet = -_invconv_logdet(p, hw)  # exact negation of the fwd value
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    if single:
        return _raw(y)[0], float(_raw(logdet))
    return y, logdet


def _coupling_net(x1, p: CouplingParams):
    h = nx.tanh(nx.conv2d(x1, p.w1, p.b1))
    h = nx.tanh(nx.conv2d(h, p.w2, p.b2))
    out = nx.conv2d(h, p.w3, p.b3)
    c = _raw(out).shape[-1]
    raw_s = nx.channel_slice(out, 0, c // 2)
    t = nx.channel_slice(out, c // 2, c)
    s = nx.sigmoid(nx.add(raw_s, 2.0))
    return s, t


def _coupling_fwd(x, p: CouplingParams):
    c = _raw(x).shape[-1]
    x1 = nx.channel_slice(x, 0, c // 2)
    x2 = nx.channel_slice(x, c // 2, c)
    s, t = _coupling_net(x1, p)
    y2 = nx.add(nx.mul(x2, s), t)
    y = nx.channel_concat(x1, y2)
    logdet = nx.reduce_sum(nx.log(s), axis=(1, 2, 3))
    return y, logdet


def _coupling_inv(y: np.ndarray, p: CouplingParams) -> tuple[np.ndarray, np.ndarray]:
    c = y.shape[-1]
    y1, y2 = y[..., :c // 2], y[..., c // 2:]
    s, t = _coupling_net(y1, p)
    x2 = (y2 - t) / s
    return np.concatenate([y1, x2], axis=-1), s


def coupling_apply(x, p: CouplingParams, direction: str = "fwd"):
    """Affine coupling: first channel half passes through and parameterizes
    the scale/shift applied to the second half."""
    xb, single = _as_batch(x)
    if _raw(xb).shape[-1] % 2:
        raise ShapeError(
            f"coupling needs an even channel count, got {_raw(xb).shape}")
    if direction == "fwd":
        y, logdet = _coupling_fwd(xb, p)
    elif direction == "inv":
        y, s = _coupling_inv(_raw(xb), p)
        logdet = -np.log(s).sum(axis=(1, 2, 3))
    else:
        raise ValueError(f"direction must be 'fwd' or 'inv', got {direction!r}")
    if single:
        return _raw(y)[0], float(_raw(logdet)[0])
    return y, logdet


# ---------------------------------------------------------------------------
# full flow
# ---------------------------------------------------------------------------

def _check_input_shape(x, params: FlowParams) -> None:
    shape = _raw(x).shape
    want = (params.patch_size, params.patch_size, params.IN_CHANNELS)
    if shape[-3:] != want:
        raise ShapeError(f"input shape {shape} does not match model patch "
                         f"shape {want}")


def flow_forward(x, params: FlowParams):
    """Map patch x to latent z; returns (z, logdet) where logdet sums every
    step's log|det| contribution (the squeeze itself contributes zero)."""
    _check_input_shape(x, params)
    xb, single = _as_batch(x)
    h = squeeze(xb, "fwd")
    logdet = None
    for step in params.steps:
        h, ld = _actnorm_fwd(h, step.actnorm)
        logdet = ld if logdet is None else nx.add(logdet, ld)
        h, ld = _invconv_fwd(h, step.invconv)
        logdet = nx.add(logdet, ld)
        h, ld = _coupling_fwd(h, step.coupling)
        logdet = nx.add(logdet, ld)
    if single:
        z = _raw(h)[0]
        _check_finite(z)
        return z, float(_raw(logdet)[0])
    if not isinstance(h, Var):
        _check_finite_batch(h)
    return h, logdet


def flow_inverse(z, params: FlowParams) -> np.ndarray:
    """Exact inverse of :func:`flow_forward` (eager only).

    Runs in the dtype of ``z``: for float32 round trips this makes the
    coupling nets see bit-identical passthrough halves in both directions,
    which is what keeps reconstruction error at the rounding floor.
    """
    zb, single = _as_batch(np.asarray(z))
    if zb.shape[-3:] != params.latent_shape:
        raise ShapeError(f"latent shape {zb.shape} does not match model "
                         f"latent shape {params.latent_shape}")
    h = zb
    for step in reversed(params.steps):
        h, _ = _coupling_inv(h, step.coupling)
        h = _invconv_inv(h, step.invconv)
        h = _actnorm_inv(h, step.actnorm)
    x = squeeze(h, "inv")
    _check_finite(x)
    return x[0] if single else x


def gaussian_logp(z):
    """Standard-normal log-density, summed over all but the batch axis."""
    zb, single = _as_batch(z)
    d = 1
    for n in _raw(zb).shape[1:]:
        d *= n
    ss = nx.reduce_sum(nx.mul(zb, zb), axis=(1, 2, 3))
    logp = nx.add(nx.mul(ss, -0.5), -0.5 * d * LOG_2PI)
    if single:
        return float(_raw(logp)[0])
    return logp


def log_likelihood(x, params: FlowParams):
    """Exact model log-density of a patch (nats): prior log-density of the
    latent plus the accumulated log-determinant.

    Returns a float for a single patch, a float64 array for a batch, and a
    recorded scalar-per-sample value when the parameters are recorded.
    """
    single = _raw(x).ndim == 3
    z, logdet = flow_forward(x, params)
    logp = nx.add(gaussian_logp(z), logdet)
    if isinstance(logp, Var):
        return logp
    if single:
        return float(logp)
    return np.asarray(logp, dtype=np.float64)


def bits_per_dim(nll_nats: float, dim: int, levels: int = 256) -> float:
    """NLL rescaled to bits per pixel-channel, including the dequantization
    offset log2(levels)."""
    if dim <= 0:
        raise NumericsError(f"dimension must be positive, got {dim}")
    return nll_nats / (dim * math.log(2.0)) + math.log2(levels)


def sample_patch(params: FlowParams, rng: Rng,
                 temperature: float = 0.7) -> np.ndarray:
    """Draw z ~ temperature * N(0, I) and decode it to patch space."""
    if temperature < 0:
        raise NumericsError(f"temperature must be >= 0, got {temperature}")
    eps = nx.gaussian_sample(rng, params.latent_shape)
    return flow_inverse(temperature * eps, params)


# ---------------------------------------------------------------------------
# data-dependent initialization
# ---------------------------------------------------------------------------

def actnorm_initialize(batch: np.ndarray, params: FlowParams) -> FlowParams:
    """Set each step's actnorm so its output on ``batch`` has zero mean and
    unit variance per channel, visiting steps in flow order."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[0] < 2:
        raise NumericsError("actnorm initialization needs a batch of >= 2 patches")
    _check_input_shape(batch, params)
    h = squeeze(batch, "fwd")
    new_steps = []
    for step in params.steps:
        mean = h.mean(axis=(0, 1, 2))
        std = h.std(axis=(0, 1, 2))
        degenerate = std < 1e-6
        if np.any(degenerate):
            warnings.warn("actnorm init: zero-variance channel, scale clamped to 1")
        safe_std = np.where(degenerate, 1.0, std)
        actnorm = ActNormParams(
            log_scale=(-np.log(safe_std)).astype(np.float32),
            bias=(-mean).astype(np.float32),
        )
        new_step = FlowStepParams(actnorm=actnorm, invconv=step.invconv,
                                  coupling=step.coupling)
        h, _ = _actnorm_fwd(h, actnorm)
        h, _ = _invconv_fwd(h, new_step.invconv)
        h, _ = _coupling_fwd(h, new_step.coupling)
        new_steps.append(new_step)
    return replace(params, steps=new_steps, actnorm_initialized=True)
