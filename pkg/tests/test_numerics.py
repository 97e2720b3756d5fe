"""Oracle-first tests for the tensor/autodiff engine."""

import numpy as np
import pytest

from patchlikely import numerics as nx
from patchlikely.errors import GraphError, NumericsError, ShapeError
from patchlikely.numerics import (Rng, Tape, finite_diff_gradient,
                                  gaussian_sample, gradient, uniform_sample)


def naive_conv2d(x, w, b):
    """Independent quadruple-loop cross-correlation oracle ('same' padding)."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, h, wd, cout), dtype=np.float64)
    for ni in range(n):
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = float(b[co])
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < h and 0 <= jj < wd:
                                for ci in range(cin):
                                    acc += float(x[ni, ii, jj, ci]) * float(w[di, dj, ci, co])
                    out[ni, i, j, co] = acc
    return out


class TestConv2d:
    def test_zero_input(self):
        x = np.zeros((1, 4, 4, 2), np.float32)
        w = np.ones((3, 3, 2, 3), np.float32)
        out = nx.conv2d(x, w, np.zeros(3, np.float32))
        assert np.array_equal(out, np.zeros((1, 4, 4, 3), np.float32))

    def test_identity_kernel(self):
        rng = Rng(1)
        x = gaussian_sample(rng, (2, 5, 5, 3))
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[1, 1, c, c] = 1.0
        out = nx.conv2d(x, w, np.zeros(3, np.float32))
        assert np.allclose(out, x, atol=0)

    def test_matches_naive_oracle(self):
        rng = Rng(42)
        x = gaussian_sample(rng, (1, 4, 4, 2), dtype=np.float64)
        w = gaussian_sample(rng, (3, 3, 2, 3), dtype=np.float64)
        b = gaussian_sample(rng, (3,), dtype=np.float64)
        got = nx.conv2d(x, w, b)
        want = naive_conv2d(x, w, b)
        assert np.abs(got - want).max() / np.abs(want).max() < 1e-6

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_on_random_shapes(self, seed):
        rng = Rng(seed, stream=5)
        h = int(rng.integers(3, 9))
        wd = int(rng.integers(3, 9))
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 4))
        x = gaussian_sample(rng, (2, h, wd, cin), dtype=np.float64)
        w = gaussian_sample(rng, (3, 3, cin, cout), dtype=np.float64)
        b = gaussian_sample(rng, (cout,), dtype=np.float64)
        got = nx.conv2d(x, w, b)
        want = naive_conv2d(x, w, b)
        assert np.abs(got - want).max() / np.abs(want).max() < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        x = np.zeros((1, 4, 4, 2), np.float32)
        w = np.zeros((3, 3, 5, 3), np.float32)
        with pytest.raises(ShapeError) as err:
            nx.conv2d(x, w)
        assert "(1, 4, 4, 2)" in str(err.value) and "(3, 3, 5, 3)" in str(err.value)


class TestGradient:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.var(gaussian_sample(Rng(0), (3, 4)))
        (g,) = gradient(nx.reduce_sum(x), [x])
        assert np.array_equal(g, np.ones((3, 4), np.float32))

    def test_quadratic_gradient_is_x(self):
        tape = Tape()
        val = gaussian_sample(Rng(1), (5,))
        x = tape.var(val)
        loss = nx.mul(nx.reduce_sum(nx.mul(x, x)), 0.5)
        (g,) = gradient(loss, [x])
        assert np.allclose(g, val, rtol=1e-6)

    def test_two_layer_conv_matches_finite_differences(self):
        rng = Rng(7)
        arrays = [gaussian_sample(rng, s, dtype=np.float64) for s in
                  [(1, 4, 4, 2), (3, 3, 2, 3), (3,), (3, 3, 3, 2), (2,)]]
        c = gaussian_sample(rng, (1, 4, 4, 2), dtype=np.float64)

        def build(p):
            h = nx.tanh(nx.conv2d(p[0], p[1], p[2]))
            return nx.reduce_sum(nx.mul(nx.conv2d(h, p[3], p[4]), c))

        tape = Tape()
        leaves = [tape.var(a) for a in arrays]
        analytic = gradient(build(leaves), leaves)
        oracle = finite_diff_gradient(lambda p: float(build(p)), arrays, eps=1e-3)
        for a, o in zip(analytic, oracle):
            assert np.linalg.norm(a - o) / np.linalg.norm(o) < 1e-4

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.var(np.ones((3,), np.float32))
        with pytest.raises(GraphError):
            gradient(nx.mul(x, 2.0), [x])

    def test_unsupported_op_rejected_at_record_time(self):
        tape = Tape()
        x = tape.var(np.ones((3,), np.float32))
        with pytest.raises(TypeError):
            np.sin(x)
        with pytest.raises(TypeError):
            x / x

    def test_mixed_tapes_rejected(self):
        a = Tape().var(np.ones(2, np.float32))
        b = Tape().var(np.ones(2, np.float32))
        with pytest.raises(GraphError):
            nx.add(a, b)

    @pytest.mark.parametrize("seed", range(100))
    def test_primitive_gradients_match_finite_differences(self, seed):
        """Property: every primitive's gradient matches central differences
        (eps=1e-3) to rel. err < 1e-4 on random small tensors."""
        rng = Rng(seed, stream=9)
        x = gaussian_sample(rng, (2, 3, 4), dtype=np.float64)
        y = gaussian_sample(rng, (4,), dtype=np.float64)
        c = gaussian_sample(rng, (2, 3, 4), dtype=np.float64)
        ops = [
            lambda p: nx.reduce_sum(nx.mul(nx.exp(nx.mul(p[0], 0.3)), c)),
            lambda p: nx.reduce_sum(nx.mul(nx.tanh(p[0]), c)),
            lambda p: nx.reduce_sum(nx.mul(nx.sigmoid(p[0]), c)),
            lambda p: nx.reduce_mean(nx.mul(nx.add(p[0], p[1]), p[1])),
            lambda p: nx.reduce_sum(nx.mul(nx.reduce_sum(p[0], axis=(0, 2)),
                                           gaussian_sample(Rng(seed, 10), (3,), dtype=np.float64))),
        ]
        build = ops[seed % len(ops)]
        arrays = [x, y]
        tape = Tape()
        leaves = [tape.var(a) for a in arrays]
        analytic = gradient(build(leaves), leaves)
        oracle = finite_diff_gradient(lambda p: float(build(p)), arrays, eps=1e-3)
        for a, o in zip(analytic, oracle):
            denom = max(np.linalg.norm(o), 1e-12)
            assert np.linalg.norm(a - o) / denom < 1e-4


class TestFiniteDiff:
    def test_constant_function_gives_zeros(self):
        grads = finite_diff_gradient(lambda p: 3.5, [np.ones(4)], eps=1e-3)
        assert np.array_equal(grads[0], np.zeros(4))

    def test_projection_gives_one_hot(self):
        grads = finite_diff_gradient(lambda p: float(p[0][0]), [np.zeros(4)], eps=1e-3)
        assert np.allclose(grads[0], [1, 0, 0, 0], atol=1e-9)

    def test_eps_must_be_positive(self):
        with pytest.raises(NumericsError):
            finite_diff_gradient(lambda p: 0.0, [np.zeros(2)], eps=0.0)


class TestMisc:
    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_logabsdet_rejects_singular(self):
        with pytest.raises(NumericsError):
            nx.logabsdet(np.zeros((3, 3)))

    def test_space_to_depth_roundtrip_bitwise(self):
        x = gaussian_sample(Rng(3), (2, 6, 8, 3))
        assert np.array_equal(nx.depth_to_space(nx.space_to_depth(x)), x)

    def test_space_to_depth_rejects_odd(self):
        with pytest.raises(ShapeError):
            nx.space_to_depth(np.zeros((1, 5, 4, 3), np.float32))


class TestRng:
    def test_fixed_seed_reproducible(self):
        a = gaussian_sample(Rng(42), (4,))
        b = gaussian_sample(Rng(42), (4,))
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = gaussian_sample(Rng(42, stream=0), (4,))
        b = gaussian_sample(Rng(42, stream=1), (4,))
        assert not np.array_equal(a, b)

    def test_uniform_degenerate_interval(self):
        assert np.array_equal(uniform_sample(Rng(0), (3,), 0.0, 0.0), np.zeros(3))

    def test_uniform_rejects_inverted_interval(self):
        with pytest.raises(NumericsError):
            uniform_sample(Rng(0), (3,), 1.0, 0.0)

    def test_gaussian_moments(self):
        draws = gaussian_sample(Rng(123), (1_000_000,))
        assert abs(float(draws.mean())) < 0.01
        assert 0.99 < float(draws.var()) < 1.01

    def test_uniform_range(self):
        draws = uniform_sample(Rng(5), (100_000,), -2.0, 3.0)
        assert draws.min() >= -2.0 and draws.max() < 3.0
        assert abs(float(draws.mean()) - 0.5) < 0.02
