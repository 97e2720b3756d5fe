"""Self-verification oracles: analytic gradients against central finite
differences, and the flow's analytic log-determinant against a brute-force
Jacobian.  Everything runs in float64 so the finite-difference side is
trustworthy at the stated tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .flow import FlowParams, flow_forward, init_flow_params
from .numerics import Rng, Tape, finite_diff_gradient, gaussian_sample, gradient
from .training import nll_loss

GRAD_TOL = 1e-4
LOGDET_TOL = 1e-3
FD_EPS = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(analytic, oracle) -> float:
    worst = 0.0
    for a, o in zip(analytic, oracle):
        num = float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(o, np.float64)))
        den = max(float(np.linalg.norm(np.asarray(o, np.float64))), 1e-12)
        worst = max(worst, num / den)
    return worst


def _check(name: str, build, params: list[np.ndarray],
           tolerance: float = GRAD_TOL) -> CheckResult:
    """Compare tape gradients of ``build`` (params -> scalar graph) against
    the finite-difference oracle."""
    tape = Tape()
    leaves = [tape.var(p) for p in params]
    loss = build(leaves)
    analytic = gradient(loss, leaves)

    def f(ps):
        return float(nx._raw(build(ps)))

    oracle = finite_diff_gradient(f, params, eps=FD_EPS)
    return CheckResult(name, _rel_err(analytic, oracle), tolerance)


def check_primitive_gradients(seed: int = 0) -> list[CheckResult]:
    """One finite-difference check per supported primitive."""
    rng = Rng(seed, stream=100)

    def randn(*shape):
        return gaussian_sample(rng, shape, dtype=np.float64)

    results = []

    c1 = randn(2, 4, 4, 3)
    results.append(_check(
        "conv2d",
        lambda p: nx.reduce_sum(nx.mul(nx.conv2d(p[0], p[1], p[2]), c1)),
        [randn(2, 4, 4, 2), 0.3 * randn(3, 3, 2, 3), randn(3)]))

    c2 = randn(3, 5)
    results.append(_check(
        "matmul",
        lambda p: nx.reduce_sum(nx.mul(nx.matmul(p[0], p[1]), c2)),
        [randn(3, 4), randn(4, 5)]))

    c2b = randn(2, 3, 3, 5)
    results.append(_check(
        "matmul_stack_transposed",
        lambda p: nx.reduce_sum(nx.mul(nx.matmul(p[0], p[1], transpose_b=True),
                                       c2b)),
        [randn(2, 3, 3, 4), randn(5, 4)]))

    y = randn(4)
    results.append(_check(
        "add_mul_broadcast",
        lambda p: nx.reduce_sum(nx.mul(nx.add(p[0], p[1]), p[1])),
        [randn(2, 3, 4), y]))

    x_pos = np.abs(randn(3, 3)) + 0.5
    for name, op in [("exp", nx.exp), ("tanh", nx.tanh),
                     ("sigmoid", nx.sigmoid)]:
        c = randn(3, 3)
        results.append(_check(
            name, lambda p, op=op, c=c: nx.reduce_sum(nx.mul(op(p[0]), c)),
            [randn(3, 3)]))
    c3 = randn(3, 3)
    results.append(_check(
        "log", lambda p: nx.reduce_sum(nx.mul(nx.log(p[0]), c3)), [x_pos]))

    c4 = randn(2)
    results.append(_check(
        "reduce_sum_axis",
        lambda p: nx.reduce_sum(nx.mul(nx.reduce_sum(p[0], axis=(1, 2)), c4)),
        [randn(2, 3, 4)]))
    results.append(_check(
        "reduce_mean",
        lambda p: nx.reduce_mean(nx.mul(p[0], p[0])),
        [randn(2, 3, 4)]))

    c5 = randn(2, 2, 2, 3)
    results.append(_check(
        "channel_slice_concat",
        lambda p: nx.reduce_sum(nx.mul(nx.channel_concat(
            nx.channel_slice(p[0], 0, 1), nx.channel_slice(p[0], 2, 4)), c5)),
        [randn(2, 2, 2, 4)]))

    c6 = randn(1, 2, 2, 8)
    results.append(_check(
        "space_to_depth",
        lambda p: nx.reduce_sum(nx.mul(nx.space_to_depth(p[0]), c6)),
        [randn(1, 4, 4, 2)]))

    w_sq = np.eye(5) + 0.2 * randn(5, 5)
    results.append(_check(
        "logabsdet", lambda p: nx.logabsdet(p[0]), [w_sq]))

    c7 = randn(2, 4, 4, 2)
    results.append(_check(
        "conv2d_two_layer",
        lambda p: nx.reduce_sum(nx.mul(nx.tanh(nx.conv2d(
            nx.tanh(nx.conv2d(p[0], p[1], p[2])), p[3], p[4])), c7)),
        [randn(2, 4, 4, 2), 0.3 * randn(3, 3, 2, 4), randn(4),
         0.3 * randn(3, 3, 4, 2), randn(2)]))

    return results


def _random_tiny_flow(seed: int, patch_size: int = 2, num_steps: int = 2,
                      hidden_width: int = 4) -> FlowParams:
    """Small float64 flow with every parameter group non-trivial."""
    rng = Rng(seed, stream=200)
    params = init_flow_params(patch_size=patch_size, num_steps=num_steps,
                              hidden_width=hidden_width, rng=rng).astype(np.float64)
    arrays = []
    for a in params.param_arrays():
        arrays.append(a + 0.3 * gaussian_sample(rng, a.shape, dtype=np.float64))
    out = params.with_param_arrays(arrays)
    out.actnorm_initialized = True
    return out


def check_flow_logdet(seed: int = 0, draws: int = 20) -> CheckResult:
    """Analytic logdet vs log|det| of the finite-difference Jacobian on the
    2x2x3 / K=2 configuration."""
    worst = 0.0
    for draw in range(draws):
        params = _random_tiny_flow(seed + draw)
        rng = Rng(seed, stream=300 + draw)
        x = 0.4 * gaussian_sample(rng, (2, 2, 3), dtype=np.float64)
        _, logdet = flow_forward(x, params)

        d = x.size
        jac = np.empty((d, d))
        flat = x.reshape(-1)
        for i in range(d):
            bump = np.zeros(d)
            bump[i] = FD_EPS
            zp, _ = flow_forward((flat + bump).reshape(x.shape), params)
            zm, _ = flow_forward((flat - bump).reshape(x.shape), params)
            jac[:, i] = (zp - zm).reshape(-1) / (2 * FD_EPS)
        _, logdet_fd = np.linalg.slogdet(jac)
        worst = max(worst, abs(logdet - logdet_fd) / max(abs(logdet_fd), 1e-12))
    return CheckResult("flow_logdet_vs_jacobian", worst, LOGDET_TOL)


def check_loss_gradient(seed: int = 0) -> CheckResult:
    """Gradient of the mean-NLL training loss on the tiny flow against the
    finite-difference oracle, over every parameter."""
    params = _random_tiny_flow(seed)
    rng = Rng(seed, stream=400)
    batch = 0.4 * gaussian_sample(rng, (2, 2, 2, 3), dtype=np.float64)

    tape = Tape()
    leaves = [tape.var(a) for a in params.param_arrays()]
    loss = nll_loss(batch, params.with_param_arrays(leaves))
    analytic = gradient(loss, leaves)

    def f(arrays):
        return nll_loss(batch, params.with_param_arrays(arrays))

    oracle = finite_diff_gradient(f, params.param_arrays(), eps=FD_EPS)
    return CheckResult("nll_loss_gradient", _rel_err(analytic, oracle), GRAD_TOL)


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = check_primitive_gradients(seed)
    results.append(check_flow_logdet(seed))
    results.append(check_loss_gradient(seed))
    return results
