"""Primitive operations: exact values, gradients against central
differences, and the optimizer update."""

import numpy as np
import pytest

from ntfa import diffcore as dc

from helpers import FD_RTOL, fd_error, gradcheck_scalar

LOG_ROOT_2PI = 0.9189385332046727


class TestMatmul:
    def test_identity(self):
        b = np.arange(12.0).reshape(3, 4)
        out = dc.matmul(dc.constant(np.eye(3)), dc.constant(b))
        np.testing.assert_array_equal(out.data, b)

    def test_scalar_cells(self):
        out = dc.matmul(dc.constant([[2.0]]), dc.constant([[3.0]]))
        assert out.data.tolist() == [[6.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(4, 5))
            b = rng.normal(size=(5, 3))
            expect = np.zeros((4, 3))
            for i in range(4):
                for j in range(3):
                    for r in range(5):
                        expect[i, j] += a[i, r] * b[r, j]
            got = dc.matmul(dc.constant(a), dc.constant(b)).data
            np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a = dc.parameter(rng.normal(size=(4, 5)))
        b = dc.parameter(rng.normal(size=(5, 3)))
        worst = gradcheck_scalar(
            lambda: dc.matmul(a, b).sum(), [a, b], rng, n_probes=10
        )
        assert worst < FD_RTOL


class TestPrelu:
    def test_values(self):
        slope = dc.constant(0.25)
        out = dc.prelu(dc.constant([2.0, -2.0]), slope)
        np.testing.assert_allclose(out.data, [2.0, -0.5])

    def test_gradient_negative_branch(self):
        x = dc.parameter([-3.0])
        slope = dc.parameter(0.25)
        out = dc.prelu(x, slope).sum()
        out.backward()
        assert x.gradient()[0] == 0.25
        # slope gradient collects x over negative entries
        assert slope.gradient() == -3.0
        err = fd_error(
            lambda: dc.prelu(x, dc.constant(0.25)).sum().item(), x, 0, 0.25
        )
        assert err < FD_RTOL

    def test_slope_gradient_fd(self):
        rng = np.random.default_rng(2)
        x_data = rng.normal(size=(4, 5))
        x_data[np.abs(x_data) < 0.1] = 0.5  # keep probes away from the kink
        x = dc.constant(x_data)
        slope = dc.parameter(0.3)
        out = dc.prelu(x, slope).sum()
        out.backward()
        err = fd_error(
            lambda: dc.prelu(x, slope).sum().item(), slope, 0, slope.gradient()[()]
        )
        assert err < FD_RTOL


class TestGaussianLogpdf:
    def test_at_mean(self):
        out = dc.gaussian_logpdf(dc.constant(1.5), dc.constant(1.5), dc.constant(0.0))
        assert out.item() == pytest.approx(-LOG_ROOT_2PI, abs=1e-7)

    def test_unit_offset(self):
        out = dc.gaussian_logpdf(dc.constant(1.0), dc.constant(0.0), dc.constant(0.0))
        assert out.item() == pytest.approx(-1.4189385, abs=1e-7)

    def test_vector_matches_elementwise_sum(self):
        rng = np.random.default_rng(3)
        x, mu, ls = rng.normal(size=(3, 7))
        total = dc.gaussian_logpdf(
            dc.constant(x), dc.constant(mu), dc.constant(ls)
        ).item()
        manual = 0.0
        for i in range(7):
            sigma = np.exp(ls[i])
            manual += (
                -0.5 * np.log(2 * np.pi)
                - ls[i]
                - (x[i] - mu[i]) ** 2 / (2 * sigma ** 2)
            )
        assert total == pytest.approx(manual, rel=1e-12)

    def test_gradients_with_broadcast(self):
        rng = np.random.default_rng(4)
        x = dc.constant(rng.normal(size=(4, 5)))
        mu = dc.parameter(rng.normal(size=(1, 5)))
        ls = dc.parameter(rng.normal(size=()))
        worst = gradcheck_scalar(
            lambda: dc.gaussian_logpdf(x, mu, ls), [mu, ls], rng, n_probes=10
        )
        assert worst < FD_RTOL

    def test_log_sigma_clamped(self):
        # far outside the window the density uses the clamped scale
        big = dc.gaussian_logpdf(dc.constant(0.0), dc.constant(0.0), dc.constant(40.0))
        ref = dc.gaussian_logpdf(dc.constant(0.0), dc.constant(0.0), dc.constant(8.0))
        assert big.item() == ref.item()


class TestReparamSample:
    def test_zero_noise_returns_mean(self):
        mu = dc.constant([1.0, -2.0])
        out = dc.reparam_sample(mu, dc.constant([0.3, 0.3]), np.zeros(2))
        np.testing.assert_array_equal(out.data, mu.data)

    def test_unit_case(self):
        out = dc.reparam_sample(dc.constant(0.0), dc.constant(0.0), np.array(1.5))
        assert out.item() == 1.5

    def test_log_sigma_gradient(self):
        eps = np.array([0.7, -1.2])
        mu = dc.constant([0.0, 0.0])
        ls = dc.parameter([0.4, -0.3])
        out = dc.reparam_sample(mu, ls, eps).sum()
        out.backward()
        np.testing.assert_allclose(ls.gradient(), np.exp(ls.data) * eps)
        for j in range(2):
            err = fd_error(
                lambda: dc.reparam_sample(mu, ls, eps).sum().item(),
                ls,
                j,
                ls.gradient()[j],
            )
            assert err < FD_RTOL


class TestBackward:
    def test_square(self):
        x = dc.parameter(3.0)
        y = dc.mul(x, x)
        y.backward()
        assert x.gradient()[()] == 6.0

    def test_exp_of_sum_matches_fd(self):
        rng = np.random.default_rng(5)
        x = dc.parameter(rng.normal(size=5) * 0.3)
        out = dc.exp(x.sum())
        out.backward()
        for j in range(5):
            err = fd_error(
                lambda: dc.exp(x.sum()).item(), x, j, x.gradient()[j]
            )
            assert err < 1e-6

    def test_unused_leaf_gets_zero(self):
        x = dc.parameter([1.0, 2.0])
        unused = dc.parameter([5.0])
        out = x.sum()
        out.backward()
        np.testing.assert_array_equal(unused.gradient(), [0.0])

    def test_non_scalar_root_rejected(self):
        x = dc.parameter([1.0, 2.0])
        with pytest.raises(dc.ShapeError):
            dc.add(x, x).backward()

    def test_fanout_accumulates(self):
        x = dc.parameter(2.0)
        y = dc.add(dc.mul(x, x), dc.mul(x, dc.constant(3.0)))
        y.backward()
        assert x.gradient()[()] == pytest.approx(2 * 2.0 + 3.0)


class TestShapePlumbing:
    def test_take_rows_repeated_indices(self):
        x = dc.parameter(np.arange(6.0).reshape(3, 2))
        out = dc.take_rows(x, [1, 1, 0]).sum()
        out.backward()
        np.testing.assert_array_equal(x.gradient(), [[1, 1], [2, 2], [0, 0]])

    def test_take_slice(self):
        x = dc.parameter(np.arange(12.0).reshape(3, 4))
        out = dc.take(x, (slice(0, 2), 1)).sum()
        out.backward()
        expect = np.zeros((3, 4))
        expect[0:2, 1] = 1.0
        np.testing.assert_array_equal(x.gradient(), expect)

    def test_concat_roundtrip(self):
        a = dc.parameter(np.ones((2, 3)))
        b = dc.parameter(np.ones((1, 3)))
        out = dc.concat([a, b], axis=0)
        assert out.shape == (3, 3)
        out.sum().backward()
        np.testing.assert_array_equal(a.gradient(), np.ones((2, 3)))
        np.testing.assert_array_equal(b.gradient(), np.ones((1, 3)))

    def test_clamp_gradient_mask(self):
        x = dc.parameter([-9.0, 0.0, 9.0])
        dc.clamp(x).sum().backward()
        np.testing.assert_array_equal(x.gradient(), [0.0, 1.0, 0.0])


class TestLogMeanExp:
    def test_single_term_identity(self):
        x = dc.parameter(3.7)
        out = dc.logmeanexp([x])
        assert out.item() == pytest.approx(3.7)

    def test_matches_numpy(self):
        rng = np.random.default_rng(6)
        vals = rng.normal(size=4) * 10
        parts = [dc.parameter(v) for v in vals]
        out = dc.logmeanexp(parts)
        expect = np.log(np.mean(np.exp(vals)))
        assert out.item() == pytest.approx(expect, rel=1e-12)

    def test_gradient_is_softmax(self):
        rng = np.random.default_rng(7)
        vals = rng.normal(size=3)
        parts = [dc.parameter(v) for v in vals]
        dc.logmeanexp(parts).backward()
        soft = np.exp(vals) / np.exp(vals).sum()
        got = np.array([p.gradient()[()] for p in parts])
        np.testing.assert_allclose(got, soft, rtol=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = dc.parameter([1.0, 2.0])
        opt = dc.Adam([p], lr=0.01)
        opt.step()  # no gradient accumulated
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_first_step_magnitude(self):
        p = dc.parameter([0.5])
        p.grad = np.array([1.0])
        opt = dc.Adam([p], lr=0.01)
        opt.step()
        # bias correction makes the first update exactly lr / (1 + eps)
        assert p.data[0] == pytest.approx(0.5 - 0.01, abs=1e-9)

    def test_two_steps_match_scalar_oracle(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        p = dc.parameter([2.0])
        opt = dc.Adam([p], lr=lr)
        grads = [0.7, -0.3]

        x = 2.0
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            x -= lr * mhat / (np.sqrt(vhat) + eps)

        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert p.data[0] == pytest.approx(x, abs=1e-12)

    def test_rejects_nonpositive_lr(self):
        state = dc.AdamState([(1,)])
        with pytest.raises(ValueError):
            dc.adam_step([np.zeros(1)], [np.zeros(1)], state, 0.0)


class TestDeterminismAndFiniteness:
    def test_same_seed_bit_identical(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            a = dc.parameter(rng.normal(size=(3, 3)))
            b = dc.parameter(rng.normal(size=(3, 3)))
            out = dc.gaussian_logpdf(
                dc.matmul(a, b), dc.constant(0.0), dc.constant(0.1)
            )
            out.backward()
            return out.item(), a.gradient().copy()

        v1, g1 = run(42)
        v2, g2 = run(42)
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)

    def test_finite_outputs_with_clamped_scales(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            x = dc.constant(rng.normal(size=(3, 4)) * 100)
            mu = dc.constant(rng.normal(size=(3, 4)) * 100)
            ls = dc.constant(rng.uniform(-20, 20, size=(3, 4)))
            out = dc.gaussian_logpdf(x, mu, ls)
            assert np.isfinite(out.item())
            s = dc.reparam_sample(mu, ls, rng.normal(size=(3, 4)))
            assert np.all(np.isfinite(s.data))

    def test_finite_check_flag(self):
        dc.CHECK_FINITE = True
        try:
            with pytest.raises(dc.NumericalError):
                dc.exp(dc.constant(1e6))
        finally:
            dc.CHECK_FINITE = False
