"""
Adam Optimizer Tests
====================

Test Coverage:
- First step equals lr * sign(g) (bias-corrected)
- Zero gradients never move parameters
- Presets for classifier and GAN training
- Shape and non-finite gradient errors, with no partial update
- Convergence on a quadratic
"""

import unittest
import sys
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from errors import NonFiniteError, ShapeError
from optimizer import AdamState, adam_step


class TestAdamStep(unittest.TestCase):
    """Single-step behaviour."""

    def setUp(self):
        self.params = {'w': np.array([1.0, -2.0, 3.0], dtype=np.float32)}

    def test_first_step_is_lr_sign(self):
        """After bias correction the first update is lr * g / |g|."""
        state = AdamState(lr=0.1)
        adam_step(state, self.params, {'w': np.array([0.5, -4.0, 2.0], dtype=np.float32)})
        np.testing.assert_allclose(self.params['w'], [0.9, -1.9, 2.9], rtol=1e-5)
        self.assertEqual(state.t, 1)

    def test_zero_gradient_leaves_parameters(self):
        """An all-zero gradient leaves the parameter and its moments untouched."""
        state = AdamState()
        adam_step(state, self.params, {'w': np.zeros(3, dtype=np.float32)})
        np.testing.assert_array_equal(self.params['w'], [1.0, -2.0, 3.0])
        self.assertNotIn('w', state.m)
        self.assertEqual(state.t, 1)

    def test_unknown_gradient_ignored(self):
        """Gradients for names not in params are skipped."""
        adam_step(AdamState(), self.params, {'other': np.ones(2, dtype=np.float32)})
        np.testing.assert_array_equal(self.params['w'], [1.0, -2.0, 3.0])

    def test_shape_mismatch(self):
        """A gradient of the wrong shape raises ShapeError."""
        with self.assertRaises(ShapeError):
            adam_step(AdamState(), self.params, {'w': np.ones(2, dtype=np.float32)})

    def test_non_finite_gradient(self):
        """NaN in a gradient raises NonFiniteError naming the parameter."""
        with self.assertRaises(NonFiniteError) as ctx:
            adam_step(AdamState(), self.params, {'w': np.array([np.nan, 0, 0], dtype=np.float32)})
        self.assertEqual(ctx.exception.where, 'w')

    def test_rejected_step_changes_nothing(self):
        """A bad gradient late in the dict leaves earlier parameters, moments and t unchanged."""
        params = {'a': np.zeros(2, dtype=np.float32), 'b': np.zeros(2, dtype=np.float32)}
        state = AdamState()
        grads = {'a': np.ones(2, dtype=np.float32), 'b': np.array([np.nan, 1], dtype=np.float32)}
        with self.assertRaises(NonFiniteError) as ctx:
            adam_step(state, params, grads)
        self.assertEqual(ctx.exception.where, 'b')
        np.testing.assert_array_equal(params['a'], [0.0, 0.0])
        self.assertEqual(state.t, 0)
        self.assertEqual(state.m, {})


class TestAdamPresets(unittest.TestCase):
    """Laboratory defaults."""

    def test_classifier_preset(self):
        """Classifier: lr 1e-3, beta1 0.9."""
        state = AdamState.for_classifier()
        self.assertEqual((state.lr, state.beta1, state.beta2), (1e-3, 0.9, 0.999))

    def test_gan_preset(self):
        """GAN and detector: lr 2e-4, beta1 0.5."""
        state = AdamState.for_gan()
        self.assertEqual((state.lr, state.beta1), (2e-4, 0.5))


class TestAdamConvergence(unittest.TestCase):
    """Minimising a quadratic."""

    def test_quadratic(self):
        """Adam drives (w - 3)^2 to its minimum."""
        params = {'w': np.array([0.0], dtype=np.float32)}
        state = AdamState(lr=0.01)
        for _ in range(3000):
            adam_step(state, params, {'w': 2 * (params['w'] - 3.0)})
        self.assertAlmostEqual(float(params['w'][0]), 3.0, delta=1e-2)


if __name__ == '__main__':
    unittest.main(verbosity=2)
