import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigquant.core import (
    PRESETS,
    QuantLevels,
    QuantParams,
    ideal_quantize,
    quantize_codes,
    relaxation_gap,
    sigmoid,
    soft_quantize,
    soft_quantize_backward,
)
from sigquant.exceptions import ConfigurationError, ContractError, DiagnosticError, NumericError

B3 = (-3.0, -1.5, -0.5, 0.5, 1.5, 3.0)


def step_sum(x, levels, alpha, beta, biases):
    """Scalar reference: enumerate each unit step by hand."""
    s = [b - a for a, b in zip(levels, levels[1:])]
    o = -levels[0]
    total = sum(si * (1.0 if beta * x - bi >= 0 else 0.0) for si, bi in zip(s, biases))
    return alpha * (total - o)


def sigmoid_sum(x, levels, alpha, beta, biases, t):
    s = [b - a for a, b in zip(levels, levels[1:])]
    total = 0.0
    for si, bi in zip(s, biases):
        z = t * (beta * x - bi)
        total += si * (1 / (1 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z)))
    return alpha * (total + levels[0])


def sorted_biases(n):
    return st.lists(st.floats(-4, 4, allow_nan=False), min_size=n, max_size=n, unique=True).map(sorted).filter(
        lambda b: all(y - x > 1e-6 for x, y in zip(b, b[1:])))


class TestLevels:
    def test_presets(self):
        assert PRESETS["ternary"].levels == (-1, 0, 1)
        assert PRESETS["3bit±4"].levels == (-4, -2, -1, 0, 1, 2, 4)
        assert PRESETS["5bit"].levels == tuple(range(-15, 16))

    def test_3bit_constants(self):
        lv = PRESETS["3bit±4"]
        assert lv.n == 6
        assert lv.step_scales == (2, 1, 1, 1, 1, 2)
        assert lv.offset == 4.0

    def test_binary_constants(self):
        lv = PRESETS["binary"]
        assert (lv.n, lv.step_scales, lv.offset) == (1, (2,), 1.0)

    def test_activation_offset_zero(self):
        assert PRESETS["act1bit"].offset == 0.0
        assert PRESETS["act1bit"].step_scales == (1,)
        assert PRESETS["act2bit"].offset == 0.0

    @pytest.mark.parametrize("text", ["3bit+-4", "3bit_pm4", "{-4,-2,-1,0,1,2,4}", "-4,-2,-1,0,1,2,4"])
    def test_from_spec_spellings(self, text):
        assert QuantLevels.from_spec(text).levels == (-4, -2, -1, 0, 1, 2, 4)

    @pytest.mark.parametrize("bad", [(1,), (0, 0), (1, 0), (0.5, 1)])
    def test_invalid_levels(self, bad):
        with pytest.raises(ConfigurationError):
            QuantLevels(bad)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            QuantLevels.from_spec("seven-bit")

    @given(st.lists(st.integers(-20, 20), min_size=2, max_size=8, unique=True))
    def test_all_steps_on_reaches_top(self, values):
        lv = QuantLevels(tuple(sorted(values)))
        assert sum(lv.step_scales) - lv.offset == lv.levels[-1]
        assert -lv.offset == lv.levels[0]


class TestParams:
    @pytest.mark.parametrize("kw", [dict(alpha=0), dict(beta=-1), dict(temperature=0)])
    def test_positive_scalars(self, kw):
        base = dict(alpha=1.0, beta=1.0, biases=[0.0], temperature=1.0)
        with pytest.raises(ConfigurationError):
            QuantParams(**{**base, **kw})

    def test_biases_strict(self):
        with pytest.raises(ConfigurationError):
            QuantParams(1.0, 1.0, [0.5, 0.5])

    def test_bias_count_checked(self):
        with pytest.raises(ConfigurationError):
            ideal_quantize(np.zeros(2), PRESETS["ternary"], QuantParams(1.0, 1.0, [0.0]))

    def test_nonfinite_input_named(self):
        with pytest.raises(NumericError, match=r"index \(1,\)"):
            ideal_quantize(np.array([0.0, np.nan]), PRESETS["binary"], QuantParams(1.0, 1.0, [0.0]))


class TestIdeal:
    def test_binary_sign(self):
        p = QuantParams(1.0, 1.0, [0.0])
        assert ideal_quantize(0.3, PRESETS["binary"], p) == 1
        assert ideal_quantize(-0.3, PRESETS["binary"], p) == -1

    def test_step_at_zero_is_one(self):
        assert ideal_quantize(0.0, PRESETS["binary"], QuantParams(1.0, 1.0, [0.0])) == 1

    def test_3bit_example(self):
        assert ideal_quantize(2.0, PRESETS["3bit±4"], QuantParams(1.0, 1.0, B3)) == 2

    @given(st.sampled_from(list(PRESETS)), st.data())
    def test_matches_step_enumeration(self, name, data):
        lv = PRESETS[name]
        biases = data.draw(sorted_biases(lv.n))
        alpha = data.draw(st.floats(0.1, 3))
        beta = data.draw(st.floats(0.2, 3))
        xs = data.draw(st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=10))
        p = QuantParams(alpha, beta, biases)
        got = ideal_quantize(np.array(xs), lv, p)
        want = [step_sum(x, lv.levels, alpha, beta, biases) for x in xs]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
        assert set(quantize_codes(np.array(xs), lv, p)) <= set(map(float, lv.levels))


class TestSoft:
    def test_binary_midpoint(self):
        for t in (0.5, 1.0, 37.0):
            assert soft_quantize(0.0, PRESETS["binary"], QuantParams(1.0, 1.0, [0.0], t)) == 0.0

    def test_binary_saturation(self):
        assert abs(soft_quantize(1.0, PRESETS["binary"], QuantParams(1.0, 1.0, [0.0], 100.0)) - 1) < 1e-4

    def test_3bit_high_temperature(self):
        assert abs(soft_quantize(2.0, PRESETS["3bit±4"], QuantParams(1.0, 1.0, B3, 1201.0)) - 2.0) < 1e-2

    def test_sigmoid_extremes_finite(self):
        z = np.array([-1e6, -800.0, 0.0, 800.0, 1e6])
        s = sigmoid(z)
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s + sigmoid(-z), 1.0)

    @given(st.sampled_from(list(PRESETS)), st.data())
    def test_matches_scalar_reference(self, name, data):
        lv = PRESETS[name]
        biases = data.draw(sorted_biases(lv.n))
        alpha, beta = data.draw(st.floats(0.1, 3)), data.draw(st.floats(0.2, 3))
        t = data.draw(st.floats(0.1, 500))
        xs = data.draw(st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=8))
        got = soft_quantize(np.array(xs), lv, QuantParams(alpha, beta, biases, t))
        want = [sigmoid_sum(x, lv.levels, alpha, beta, biases, t) for x in xs]
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    @given(st.data())
    def test_output_within_level_range(self, data):
        lv = PRESETS["3bit±4"]
        p = QuantParams(data.draw(st.floats(0.1, 3)), 1.0, data.draw(sorted_biases(6)), data.draw(st.floats(0.1, 1e4)))
        y = soft_quantize(np.linspace(-50, 50, 101), lv, p)
        assert np.all(y >= -4 * p.alpha - 1e-12) and np.all(y <= 4 * p.alpha + 1e-12)
        assert np.all(np.diff(y) >= -1e-12)


class TestBackward:
    def test_binary_hand_value(self):
        g = soft_quantize_backward(np.array([0.0]), np.array([1.0]), PRESETS["binary"], QuantParams(1.0, 1.0, [0.0]))
        assert g.d_input[0] == pytest.approx(0.5, abs=1e-15)

    def test_saturation_vanishes(self):
        p = QuantParams(1.0, 1.0, B3, 20.0)
        x = np.array([-6.0, 6.0])
        g = soft_quantize_backward(x, np.ones(2), PRESETS["3bit±4"], p)
        assert np.abs(g.d_input).max() < 1e-12
        assert abs(g.d_beta) < 1e-12
        assert np.abs(g.d_biases).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            soft_quantize_backward(np.zeros(3), np.zeros(2), PRESETS["binary"], QuantParams(1.0, 1.0, [0.0]))

    @given(st.sampled_from(list(PRESETS)), st.data())
    def test_finite_differences(self, name, data):
        lv = PRESETS[name]
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
        biases = np.sort(rng.uniform(-2, 2, lv.n)) + np.arange(lv.n) * 0.3
        p = QuantParams(float(rng.uniform(0.3, 2)), float(rng.uniform(0.3, 2)), biases, float(rng.uniform(0.5, 10)))
        x = rng.uniform(-3, 3, 5)
        up = rng.normal(size=5)
        g = soft_quantize_backward(x, up, lv, p)
        h = 1e-5

        def f(xx=x, **kw):
            return float(np.sum(up * soft_quantize(xx, lv, p.replace(**kw))))

        num_x = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(g.d_input, num_x, rtol=1e-5, atol=1e-7)
        assert g.d_alpha == pytest.approx((f(alpha=p.alpha + h) - f(alpha=p.alpha - h)) / (2 * h), rel=1e-5, abs=1e-7)
        assert g.d_beta == pytest.approx((f(beta=p.beta + h) - f(beta=p.beta - h)) / (2 * h), rel=1e-5, abs=1e-7)
        num_b = [(f(biases=biases + h * e) - f(biases=biases - h * e)) / (2 * h) for e in np.eye(lv.n)]
        np.testing.assert_allclose(g.d_biases, num_b, rtol=1e-5, atol=1e-7)


class TestRelaxationGap:
    def test_monotone_in_temperature(self):
        lv, gaps = PRESETS["3bit±4"], []
        for t in (1, 11, 121):
            gaps.append(relaxation_gap(lv, QuantParams(1.0, 1.0, B3, t)))
        assert gaps[0] > gaps[1] > gaps[2]

    def test_huge_temperature(self):
        assert relaxation_gap(PRESETS["3bit±4"], QuantParams(1.0, 1.0, B3, 1e6)) < 1e-6

    def test_exclusion_covering_domain(self):
        with pytest.raises(DiagnosticError):
            relaxation_gap(PRESETS["3bit±4"], QuantParams(1.0, 1.0, B3), exclusion_radius=10.0)

    def test_grid_too_small(self):
        with pytest.raises(DiagnosticError):
            relaxation_gap(PRESETS["binary"], QuantParams(1.0, 1.0, [0.0]), grid_points=1)
