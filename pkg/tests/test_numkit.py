import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffclab.errors import InvalidArgumentError
from ffclab.numkit import (
    OptimizerState,
    Rng,
    adamw_step,
    chi2_sf,
    cosine,
    cross_entropy_with_grad,
    kl_div,
    softmax,
)
from oracles import chi2_sf_quadrature, fd_gradient


class TestSoftmax:
    def test_equal_scores_uniform(self):
        for tau in (0.07, 1.0, 50.0):
            np.testing.assert_allclose(softmax([3.0, 3.0, 3.0], tau), [1 / 3] * 3, atol=1e-15)

    def test_two_logit_closed_form(self):
        expected = [math.e / (math.e + 1), 1 / (math.e + 1)]
        np.testing.assert_allclose(softmax([1.0, 0.0], 1.0), expected, rtol=1e-12)

    def test_high_temperature_limit(self):
        np.testing.assert_allclose(softmax([1.0, 0.0], 1e6), [0.5, 0.5], atol=1e-6)

    def test_large_magnitude_stable(self):
        p = softmax([1e3, -1e3, 0.0], 1.0)
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-9

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            softmax([np.inf, 0.0], 1.0)
        with pytest.raises(InvalidArgumentError):
            softmax([1.0, 0.0], 0.0)
        with pytest.raises(InvalidArgumentError):
            softmax([1.0, 0.0], -2.0)


class TestKLDiv:
    def test_identity_zero(self):
        rng = Rng(1)
        for _ in range(20):
            p = rng.dirichlet([1.0] * 4)
            assert kl_div(p, p) == 0.0

    def test_closed_forms(self):
        assert abs(kl_div([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-12
        expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        assert abs(kl_div([0.9, 0.1], [0.5, 0.5]) - expected) < 1e-12

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            kl_div([0.5, 0.5], [1.0])
        with pytest.raises(InvalidArgumentError):
            kl_div([0.5, 0.5], [1.0, 0.0])

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, raw):
        p = np.asarray(raw) / np.sum(raw)
        u = np.full(len(p), 1.0 / len(p))
        val = kl_div(p, u)
        assert val >= -1e-12
        if np.max(np.abs(p - u)) > 1e-6:
            assert val > 0.0


class TestCosine:
    def test_trivial_cases(self):
        u = np.array([1.0, 2.0, -3.0])
        assert abs(cosine(u, u) - 1.0) < 1e-12
        assert abs(cosine(u, -u) + 1.0) < 1e-12
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_zero_vector_error(self):
        with pytest.raises(InvalidArgumentError):
            cosine([0.0, 0.0], [1.0, 0.0])


class TestCrossEntropy:
    def test_symmetric_logits(self):
        loss, grad = cross_entropy_with_grad([0.0, 0.0], 0)
        assert abs(loss - math.log(2)) < 1e-12
        np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-12)

    def test_saturated_correct(self):
        loss, grad = cross_entropy_with_grad([10.0, -10.0], 0)
        assert loss < 1e-8
        np.testing.assert_allclose(grad, [0.0, 0.0], atol=1e-8)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            cross_entropy_with_grad([0.0, 1.0], 2)

    def test_gradient_matches_finite_differences(self):
        rng = Rng(7)
        worst = 0.0
        for _ in range(100):
            logits = rng.normal(size=4, scale=2.0)
            label = int(rng.integers(0, 4))
            _, grad = cross_entropy_with_grad(logits, label)
            fd = fd_gradient(lambda x: cross_entropy_with_grad(x, label)[0], logits)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-5


class TestAdamW:
    def test_zero_grads_no_decay(self):
        params = np.array([1.0, -2.0, 3.0])
        state = OptimizerState.fresh(3, weight_decay=0.0)
        new_params, new_state = adamw_step(params, np.zeros(3), state)
        np.testing.assert_array_equal(new_params, params)
        assert new_state.step == 1

    def test_first_step_sign_update(self):
        params = np.zeros(4)
        grads = np.array([3.0, -0.5, 1e-3, -2.0])
        state = OptimizerState.fresh(4, lr=1e-2, weight_decay=0.0)
        new_params, _ = adamw_step(params, grads, state)
        expected = -1e-2 * grads / (np.abs(grads) + state.eps)
        np.testing.assert_allclose(new_params, expected, rtol=1e-12)

    def test_decay_scales_params(self):
        params = np.array([2.0, -4.0])
        state = OptimizerState.fresh(2, lr=1e-3, weight_decay=0.5)
        new_params, _ = adamw_step(params, np.zeros(2), state)
        np.testing.assert_allclose(new_params, params * (1 - 1e-3 * 0.5), rtol=1e-15)

    def test_deterministic(self):
        rng = Rng(3)
        params = rng.normal(size=10)
        grads = rng.normal(size=10)
        state = OptimizerState.fresh(10)
        out1 = adamw_step(params, grads, state)
        out2 = adamw_step(params, grads, state)
        assert np.array_equal(out1[0], out2[0])
        assert np.array_equal(out1[1].m, out2[1].m)

    def test_per_parameter_learning_rates(self):
        params = np.zeros(2)
        grads = np.array([1.0, 1.0])
        state = OptimizerState.fresh(2, lr=np.array([1e-2, 1e-4]), weight_decay=0.0)
        new_params, _ = adamw_step(params, grads, state)
        assert abs(new_params[0] / new_params[1] - 100.0) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adamw_step(np.zeros(3), np.zeros(2), OptimizerState.fresh(3))


class TestChi2Sf:
    def test_at_zero(self):
        for df in (1, 2, 5, 30):
            assert chi2_sf(0.0, df) == 1.0

    def test_df2_closed_form(self):
        for x in (0.1, 1.0, 3.5, 10.0, 40.0):
            assert abs(chi2_sf(x, 2) - math.exp(-x / 2)) < 1e-10

    def test_standard_quantile_vs_quadrature(self):
        val = chi2_sf(3.841, 1)
        assert abs(val - 0.0500) < 5e-4
        assert abs(val - chi2_sf_quadrature(3.841, 1)) < 1e-8
        for x, df in ((2.3, 3), (11.07, 5), (0.5, 1)):
            assert abs(chi2_sf(x, df) - chi2_sf_quadrature(x, df)) < 1e-8

    def test_monotone_decreasing(self):
        xs = np.linspace(0, 30, 50)
        vals = [chi2_sf(x, 4) for x in xs]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_x(self):
        with pytest.raises(InvalidArgumentError):
            chi2_sf(-0.1, 1)


class TestRng:
    def test_same_seed_stream_identical(self):
        a = Rng(12345, 6).uniform(size=1_000_000)
        b = Rng(12345, 6).uniform(size=1_000_000)
        assert np.array_equal(a, b)

    def test_streams_distinct(self):
        a = Rng(12345, 0).uniform(size=1000)
        b = Rng(12345, 1).uniform(size=1000)
        assert not np.array_equal(a, b)

    def test_derive_matches_fresh(self):
        base = Rng(9, 0)
        base.uniform(size=10)  # advancing the base must not affect derived streams
        d = base.derive(4)
        assert np.array_equal(d.uniform(size=5), Rng(9, 4).uniform(size=5))

    def test_bernoulli_probability(self):
        draws = Rng(5, 2).bernoulli(0.3, size=200_000)
        assert set(np.unique(draws)) <= {0, 1}
        assert abs(draws.mean() - 0.3) < 0.005
