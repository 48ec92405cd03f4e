import numpy as np
import pytest

from src.ircam_nav import tensor as T
from src.ircam_nav.errors import ContractError
from src.ircam_nav.optim import AdamState, adam_step, clip_grad_norm, grad_norm


class TestAdam:
    """Bias-corrected Adam on named parameters."""

    def test_first_step_moves_by_learning_rate(self):
        """With bias correction the first step is lr * sign(grad)."""
        p = T.parameter([1.0, -1.0])
        p.grad = np.array([0.5, -2.0], dtype=np.float32)
        adam_step({"p": p}, AdamState(learning_rate=0.1))
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_gradients_zeroed_after_step(self):
        p = T.parameter([1.0])
        p.grad = np.array([1.0], dtype=np.float32)
        adam_step({"p": p}, AdamState(learning_rate=0.1))
        np.testing.assert_allclose(p.grad, [0.0])

    def test_missing_gradient(self):
        """Stepping a parameter that never received a gradient is an error."""
        with pytest.raises(ContractError):
            adam_step({"p": T.parameter([1.0])}, AdamState(learning_rate=0.1))

    def test_minimizes_quadratic(self):
        """Repeated steps drive (x - 3)^2 towards 3."""
        x = T.parameter([0.0])
        state = AdamState(learning_rate=0.1)
        target = T.constant([3.0])
        for _ in range(300):
            diff = T.sub(x, target)
            T.backward(T.sum(T.mul(diff, diff)))
            adam_step({"x": x}, state)
        assert abs(float(x.data[0]) - 3.0) < 0.05
        assert state.step == 300


class TestGradClipping:
    """Global-norm clipping."""

    def test_clip_rescales_to_max_norm(self):
        """A [3, 4] gradient (norm 5) is scaled to norm 0.5."""
        p = T.parameter([0.0, 0.0])
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        before = clip_grad_norm({"p": p}, 0.5)
        assert before == pytest.approx(5.0)
        assert grad_norm({"p": p}) == pytest.approx(0.5, rel=1e-4)

    def test_small_gradient_untouched(self):
        p = T.parameter([0.0])
        p.grad = np.array([0.1], dtype=np.float32)
        clip_grad_norm({"p": p}, 0.5)
        np.testing.assert_allclose(p.grad, [0.1])
