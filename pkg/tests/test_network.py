"""
Network Module Tests
====================

Tests for layer stacking, modes and reverse-mode gradients.

Test Coverage:
- Shape checking at build time and at forward time
- grad_check over random small networks covering every layer kind
- Train vs infer mode, frozen networks
- Backward without a recorded forward
- state_dict round trip and structural config
"""

import unittest
import sys
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from errors import BackwardError, NonFiniteError, ShapeError
from layers import LayerSpec
from network import Gradients, Network, grad_check


def weighted_sum_loss(seed=0):
    """Loss = sum(out * w) for a fixed random w; gradient is w."""
    cache = {}

    def loss(out):
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(seed).normal(size=out.shape)
        w = cache[out.shape].astype(out.dtype)
        return float(np.sum(out * w)), w
    return loss


class TestNetworkBuild(unittest.TestCase):
    """Construction and shape propagation."""

    def test_output_shape(self):
        """conv -> pool -> flatten -> dense gives the expected shapes."""
        net = Network([LayerSpec.conv2d(4, 3), LayerSpec.maxpool(2), LayerSpec.flatten(), LayerSpec.dense(5)],
                      (8, 8, 1))
        self.assertEqual(net.output_shape, (5,))
        self.assertEqual([s for _, s in net.layer_shapes()], [(6, 6, 4), (3, 3, 4), (36,), (5,)])

    def test_incompatible_stack(self):
        """Dense straight after a conv (no flatten) fails at build time."""
        with self.assertRaises(ShapeError):
            Network([LayerSpec.conv2d(2, 3), LayerSpec.dense(4)], (5, 5, 1))

    def test_forward_shape_mismatch(self):
        """A batch with the wrong per-sample shape raises ShapeError naming the input."""
        net = Network([LayerSpec.dense(3)], (4,))
        with self.assertRaises(ShapeError) as ctx:
            net.forward(np.zeros((2, 5)))
        self.assertIn('input', ctx.exception.layer)

    def test_same_seed_same_weights(self):
        """Initialisation is deterministic under the seed."""
        a = Network([LayerSpec.dense(3)], (4,), seed=5)
        b = Network([LayerSpec.dense(3)], (4,), seed=5)
        np.testing.assert_array_equal(a.all_parameters()['0.weight'], b.all_parameters()['0.weight'])

    def test_non_finite_activation(self):
        """Inf input propagating to the output raises NonFiniteError."""
        net = Network([LayerSpec.dense(2)], (2,))
        with self.assertRaises(NonFiniteError):
            net.forward(np.array([[np.inf, 0.0]]))


class TestGradCheck(unittest.TestCase):
    """Analytic vs numeric gradients on small random networks."""

    SMOOTH_STACKS = [
        ([LayerSpec.dense(5), LayerSpec.act('tanh'), LayerSpec.dense(3)], (4,)),
        ([LayerSpec.dense(6), LayerSpec.act('sigmoid'), LayerSpec.dense(2), LayerSpec.act('softmax')], (3,)),
        ([LayerSpec.dense(4), LayerSpec.act('leakyrelu'), LayerSpec.dense(1)], (3,)),
        ([LayerSpec.dense(4), LayerSpec.act('linear'), LayerSpec.dense(2), LayerSpec.act('tanh')], (5,)),
        ([LayerSpec.conv2d(2, 3), LayerSpec.act('tanh'), LayerSpec.flatten(), LayerSpec.dense(3)], (5, 5, 1)),
        ([LayerSpec.conv2d(3, 2, stride=2), LayerSpec.flatten(), LayerSpec.dense(2)], (5, 5, 2)),
        ([LayerSpec.dense(4), LayerSpec.batchnorm(), LayerSpec.act('tanh'), LayerSpec.dense(2)], (3,)),
        ([LayerSpec.conv2d(2, 2), LayerSpec.batchnorm(), LayerSpec.flatten(), LayerSpec.dense(2)], (4, 4, 1)),
    ]

    def test_infer_mode_stacks(self):
        """Every smooth stack in infer mode matches central differences to 1e-4."""
        for i, (specs, shape) in enumerate(self.SMOOTH_STACKS):
            net = Network(specs, shape, seed=i)
            x = np.random.default_rng(100 + i).normal(size=(3,) + shape)
            err = grad_check(net, x, weighted_sum_loss(i))
            self.assertLess(err, 1e-4, msg=f"stack {i}: relative error {err}")

    def test_relu_and_maxpool(self):
        """ReLU and max pooling (piecewise linear) pass with a small step."""
        specs = [LayerSpec.conv2d(2, 3), LayerSpec.act('relu'), LayerSpec.maxpool(2), LayerSpec.flatten(),
                 LayerSpec.dense(3), LayerSpec.act('relu'), LayerSpec.dense(2)]
        net = Network(specs, (6, 6, 1), seed=11)
        x = np.random.default_rng(12).normal(size=(2, 6, 6, 1))
        self.assertLess(grad_check(net, x, weighted_sum_loss(3), h=1e-5), 1e-4)

    def test_train_mode_dropout(self):
        """Train-mode dropout is replayed exactly, so gradients still check."""
        specs = [LayerSpec.dense(6), LayerSpec.act('tanh'), LayerSpec.dropout(0.5), LayerSpec.dense(2)]
        net = Network(specs, (3,), seed=2).train()
        x = np.random.default_rng(4).normal(size=(4, 3))
        self.assertLess(grad_check(net, x, weighted_sum_loss(1), seed=9), 1e-4)

    def test_train_mode_batchnorm(self):
        """Train-mode batchnorm gradients hold to 1e-3."""
        specs = [LayerSpec.dense(4), LayerSpec.batchnorm(0.8), LayerSpec.act('tanh'), LayerSpec.dense(2)]
        net = Network(specs, (3,), seed=6).train()
        x = np.random.default_rng(7).normal(size=(8, 3))
        self.assertLess(grad_check(net, x, weighted_sum_loss(2)), 1e-3)

    def test_grad_check_leaves_network_untouched(self):
        """grad_check works on a copy: parameters and running stats are unchanged."""
        specs = [LayerSpec.dense(4), LayerSpec.batchnorm(), LayerSpec.dense(1)]
        net = Network(specs, (3,), seed=1).train()
        before = {k: v.copy() for k, v in net.state_dict().items()}
        grad_check(net, np.random.default_rng(0).normal(size=(5, 3)), weighted_sum_loss())
        for k, v in net.state_dict().items():
            np.testing.assert_array_equal(v, before[k])


class TestModes(unittest.TestCase):
    """Train/infer switching and freezing."""

    def setUp(self):
        self.specs = [LayerSpec.dense(8), LayerSpec.act('relu'), LayerSpec.dropout(0.5),
                      LayerSpec.batchnorm(), LayerSpec.dense(2)]
        self.x = np.random.default_rng(0).normal(size=(16, 4)).astype(np.float32)

    def test_infer_is_deterministic(self):
        """Two infer forwards give identical outputs."""
        net = Network(self.specs, (4,))
        np.testing.assert_array_equal(net.infer(self.x), net.infer(self.x))

    def test_train_forward_updates_running_stats(self):
        """Train-mode forwards move the batchnorm running mean."""
        net = Network(self.specs, (4,)).train()
        before = net.buffers()['3.running_mean'].copy()
        net.forward(self.x)
        self.assertFalse(np.array_equal(before, net.buffers()['3.running_mean']))

    def test_frozen_network_gives_only_input_gradient(self):
        """A frozen network reports no parameter gradients but still an input gradient."""
        net = Network(self.specs, (4,)).freeze()
        out = net.forward(self.x, record=True)
        grads = net.backward(np.ones_like(out))
        self.assertEqual(grads.params, {})
        self.assertEqual(grads.input.shape, self.x.shape)
        self.assertEqual(net.parameters(), {})

    def test_backward_without_record(self):
        """backward() after an infer forward raises BackwardError."""
        net = Network(self.specs, (4,))
        out = net.forward(self.x)
        with self.assertRaises(BackwardError):
            net.backward(np.ones_like(out))

    def test_empty_batch_infer(self):
        """infer on zero rows returns an empty output with the right trailing shape."""
        net = Network(self.specs, (4,))
        self.assertEqual(net.infer(np.zeros((0, 4), dtype=np.float32)).shape, (0, 2))


class TestState(unittest.TestCase):
    """Parameter and buffer persistence helpers."""

    def test_load_state_dict_round_trip(self):
        """Loading another network's state makes outputs identical."""
        specs = [LayerSpec.dense(5), LayerSpec.batchnorm(), LayerSpec.dense(2)]
        a = Network(specs, (3,), seed=1)
        b = Network(specs, (3,), seed=2)
        b.load_state_dict(a.state_dict())
        x = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_array_equal(a.infer(x), b.infer(x))

    def test_load_state_dict_rejects_shape(self):
        """A state entry with the wrong shape raises ShapeError."""
        net = Network([LayerSpec.dense(2)], (3,))
        state = net.state_dict()
        state['0.weight'] = np.zeros((4, 2), dtype=np.float32)
        with self.assertRaises(ShapeError):
            net.load_state_dict(state)

    def test_config_round_trip(self):
        """from_config(config()) rebuilds the same structure and initial weights."""
        net = Network([LayerSpec.conv2d(2, 3), LayerSpec.flatten(), LayerSpec.dense(2)], (5, 5, 1), seed=3, name='x')
        clone = Network.from_config(net.config())
        self.assertEqual(clone.layer_shapes(), net.layer_shapes())
        np.testing.assert_array_equal(clone.all_parameters()['0.kernel'], net.all_parameters()['0.kernel'])

    def test_gradients_add(self):
        """Gradients add per parameter and on the input."""
        a = Gradients({'w': np.ones(2)}, np.ones(3))
        b = Gradients({'w': np.ones(2), 'v': np.zeros(1)}, None)
        total = a + b
        np.testing.assert_array_equal(total.params['w'], [2, 2])
        self.assertIn('v', total.params)
        np.testing.assert_array_equal(total.input, np.ones(3))


if __name__ == '__main__':
    unittest.main(verbosity=2)
