"""Adam update rule and the step-indexed learning-rate schedule."""

import numpy as np
import pytest

from pim.autodiff import Tensor
from pim.optim import AdamState, adam_step, learning_rate


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Tensor([1.0, -2.0, 3.0])
        before = p.data.copy()
        state = AdamState([p])
        adam_step([p], [np.zeros(3, dtype=np.float32)], state, lr=1e-3)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_is_lr_times_sign(self):
        # hand evaluation at t=1: m_hat = g, v_hat = g^2, update = lr*g/(|g|+eps)
        p = Tensor([0.0, 0.0], dtype=np.float64)
        g = np.array([0.5, -3.0])
        state = AdamState([p])
        adam_step([p], [g], state, lr=1e-3)
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-6)

    def test_matches_reference_formulas_over_steps(self, rng):
        p = Tensor(rng.standard_normal(4), dtype=np.float64)
        ref = p.data.copy()
        state = AdamState([p])
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            adam_step([p], [g], state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            ref = ref - 0.01 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-10)

    def test_shape_mismatch_rejected(self):
        p = Tensor([1.0, 2.0])
        state = AdamState([p])
        with pytest.raises(ValueError, match="shape"):
            adam_step([p], [np.zeros(3, dtype=np.float32)], state, lr=1e-3)

    def test_nonpositive_lr_rejected(self):
        p = Tensor([1.0])
        state = AdamState([p])
        with pytest.raises(ValueError, match="positive"):
            adam_step([p], [np.ones(1, dtype=np.float32)], state, lr=0.0)

    def test_step_counter_increases(self):
        p = Tensor([1.0])
        state = AdamState([p])
        for expected in (1, 2, 3):
            adam_step([p], [np.ones(1, dtype=np.float32)], state, lr=1e-3)
            assert state.step_count == expected


class TestSchedule:
    def test_lookup_values(self):
        assert learning_rate(0) == 1e-3
        assert learning_rate(49_999) == 1e-3
        assert learning_rate(50_000) == pytest.approx(1e-4)
        assert learning_rate(79_999) == pytest.approx(1e-4)
        assert learning_rate(80_000) == pytest.approx(1e-5)
        assert learning_rate(150_000) == pytest.approx(1e-5)

    def test_scales_with_base(self):
        assert learning_rate(60_000, base=2e-3) == pytest.approx(2e-4)
