"""
Loss Function Tests
===================

Losses and gradients against scalar-loop oracles.

Test Coverage:
- mse / bce / categorical_ce values
- Gradients against the closed forms and finite differences
- Clamping, label broadcasting and error handling
"""

import math
import unittest
import sys
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from errors import ShapeError
from losses import PROB_EPS, bce, bce_grad, categorical_ce, categorical_ce_grad, mse, mse_grad


def loop_mse(pred, target):
    total = 0.0
    for p, t in zip(np.ravel(pred), np.ravel(target)):
        total += (float(p) - float(t)) ** 2
    return total / np.size(pred)


def loop_bce(pred, label):
    total = 0.0
    for p, y in zip(np.ravel(pred), np.ravel(label)):
        p = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
        total += -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    return total / np.size(pred)


def loop_ce(probs, labels):
    total = 0.0
    for row, y in zip(probs, labels):
        total += -math.log(max(float(row[y]), PROB_EPS))
    return total / len(labels)


class TestMse(unittest.TestCase):
    """Mean squared error."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.pred = rng.normal(size=(4, 3))
        self.target = rng.normal(size=(4, 3))

    def test_matches_loop(self):
        """mse equals the scalar loop to 1e-6."""
        self.assertAlmostEqual(mse(self.pred, self.target), loop_mse(self.pred, self.target), places=6)

    def test_known_value(self):
        """mse([1,2],[0,0]) = 2.5."""
        self.assertAlmostEqual(mse([1.0, 2.0], [0.0, 0.0]), 2.5)

    def test_gradient(self):
        """mse_grad equals 2 (p - t) / n."""
        np.testing.assert_allclose(mse_grad(self.pred, self.target), 2 * (self.pred - self.target) / 12)

    def test_shape_mismatch(self):
        """Different shapes raise ShapeError."""
        with self.assertRaises(ShapeError):
            mse(np.zeros(3), np.zeros(4))


class TestBce(unittest.TestCase):
    """Binary cross-entropy."""

    def test_matches_loop(self):
        """bce equals the scalar loop for mixed labels."""
        pred = np.array([0.1, 0.6, 0.9, 0.3])
        label = np.array([0.0, 1.0, 1.0, 0.0])
        self.assertAlmostEqual(bce(pred, label), loop_bce(pred, label), places=6)

    def test_scalar_label_broadcasts(self):
        """A scalar label applies to every prediction."""
        pred = np.array([0.2, 0.7])
        self.assertAlmostEqual(bce(pred, 1.0), loop_bce(pred, np.ones(2)), places=6)

    def test_clamped_at_zero(self):
        """p = 0 with label 1 gives -log(1e-7), not infinity."""
        self.assertAlmostEqual(bce(np.array([0.0]), 1.0), -math.log(PROB_EPS), places=4)

    def test_gradient_finite_difference(self):
        """bce_grad matches central differences."""
        pred = np.array([0.2, 0.5, 0.8])
        label = np.array([1.0, 0.0, 1.0])
        grad = bce_grad(pred, label)
        h = 1e-6
        for i in range(3):
            up, down = pred.copy(), pred.copy()
            up[i] += h
            down[i] -= h
            self.assertAlmostEqual(grad[i], (bce(up, label) - bce(down, label)) / (2 * h), places=5)


class TestCategoricalCe(unittest.TestCase):
    """Categorical cross-entropy from probabilities and from logits."""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.logits = rng.normal(size=(5, 4))
        e = np.exp(self.logits - self.logits.max(axis=1, keepdims=True))
        self.probs = e / e.sum(axis=1, keepdims=True)
        self.labels = np.array([0, 3, 1, 2, 3])

    def test_probabilities_match_loop(self):
        """CE over probabilities equals the scalar loop."""
        self.assertAlmostEqual(categorical_ce(self.probs, self.labels), loop_ce(self.probs, self.labels), places=6)

    def test_logits_equal_probabilities(self):
        """from_logits=True gives the same value as applying softmax first."""
        self.assertAlmostEqual(categorical_ce(self.logits, self.labels, from_logits=True),
                               categorical_ce(self.probs, self.labels), places=6)

    def test_single_row(self):
        """A 1-D score vector with a scalar label is accepted."""
        self.assertAlmostEqual(categorical_ce(np.array([0.25, 0.75]), 1), -math.log(0.75), places=6)

    def test_logit_gradient(self):
        """Gradient from logits is (softmax - onehot) / N."""
        onehot = np.eye(4)[self.labels]
        np.testing.assert_allclose(categorical_ce_grad(self.logits, self.labels, from_logits=True),
                                   (self.probs - onehot) / 5, atol=1e-10)

    def test_probability_gradient(self):
        """Gradient from probabilities is -1 / (p_y N) on the true class only."""
        grad = categorical_ce_grad(self.probs, self.labels)
        for i, y in enumerate(self.labels):
            self.assertAlmostEqual(grad[i, y], -1.0 / (self.probs[i, y] * 5))
            self.assertEqual(np.count_nonzero(grad[i]), 1)

    def test_label_out_of_range(self):
        """Class index >= K raises IndexError."""
        with self.assertRaises(IndexError):
            categorical_ce(self.probs, np.array([0, 1, 2, 3, 4]))

    def test_label_count_mismatch(self):
        """Fewer labels than rows raises ShapeError."""
        with self.assertRaises(ShapeError):
            categorical_ce(self.probs, np.array([0, 1]))


if __name__ == '__main__':
    unittest.main(verbosity=2)
