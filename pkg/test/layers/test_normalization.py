import unittest

import numpy as np

from se2net import tensor
from se2net.errors import ConfigurationError
from se2net.layers import normalization


def float64_state(channels):
    with tensor.precision('float64'):
        return normalization.BatchNormState(channels, name='block1.bn')

class TestBatchNorm(unittest.TestCase):
    def test_training_normalizes_per_channel(self):
        state = float64_state(3)
        F = np.random.default_rng(0).normal(5.0, 2.0, size=(4, 8, 5, 5, 3))
        out, _ = normalization.se2_batchnorm(F, state, training=True)
        axes = (0, 1, 2, 3)
        np.testing.assert_allclose(out.mean(axis=axes), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=axes), 1.0, atol=1e-4)

    def test_running_statistics(self):
        state = float64_state(2)
        F = np.random.default_rng(1).standard_normal((3, 4, 2, 2, 2))
        normalization.se2_batchnorm(F, state, training=True)
        count = F.size // 2
        mean = F.reshape(-1, 2).mean(axis=0)
        unbiased = F.reshape(-1, 2).var(axis=0) * count / (count - 1)
        np.testing.assert_allclose(state.running_mean, 0.1 * mean)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * unbiased)

    def test_frozen_statistics(self):
        state = float64_state(2)
        state.frozen = True
        F = np.random.default_rng(2).normal(3.0, 2.0, size=(3, 4, 2, 2, 2))
        out, _ = normalization.se2_batchnorm(F, state, training=True)
        np.testing.assert_allclose(out.reshape(-1, 2).mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_array_equal(state.running_mean, [0.0, 0.0])
        np.testing.assert_array_equal(state.running_var, [1.0, 1.0])

    def test_inference_uses_running_statistics(self):
        state = float64_state(2)
        state.running_mean[...] = [1.0, -1.0]
        state.running_var[...] = [4.0, 1.0]
        state.gamma.value[...] = [2.0, 1.0]
        state.beta.value[...] = [0.5, 0.0]
        F = np.ones((1, 2, 1, 1, 2))
        out, _ = normalization.se2_batchnorm(F, state, training=False)
        np.testing.assert_allclose(out[0, 0, 0, 0], [0.5, 2.0 / np.sqrt(1 + 1e-5)], rtol=1e-6)
        self.assertEqual(state.running_var[0], 4.0)

    def test_two_dimensional_maps(self):
        state = float64_state(2)
        F = np.random.default_rng(2).standard_normal((4, 3, 3, 2))
        out, _ = normalization.se2_batchnorm(F, state, training=True)
        self.assertEqual(out.shape, F.shape)
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)

    def test_orientation_shift_commutes(self):
        state = float64_state(2)
        F = np.random.default_rng(3).standard_normal((2, 4, 3, 3, 2))
        out, _ = normalization.se2_batchnorm(F, state, training=True)
        shifted, _ = normalization.se2_batchnorm(np.roll(F, 1, axis=1), state, training=True)
        np.testing.assert_allclose(shifted, np.roll(out, 1, axis=1), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        F = rng.standard_normal((3, 2, 3, 3, 2))
        gamma, beta = rng.uniform(0.5, 1.5, size=2), rng.standard_normal(2)
        for training in (True, False):
            state = float64_state(2)
            state.running_var[...] = [0.5, 2.0]

            def forward(F, gamma, beta):
                state.gamma.value[...] = gamma
                state.beta.value[...] = beta
                return normalization.se2_batchnorm(F, state, training)[0]

            def backward(F, gamma, beta, grad):
                state.gamma.value[...] = gamma
                state.beta.value[...] = beta
                _, cache = normalization.se2_batchnorm(F, state, training)
                return normalization.se2_batchnorm_backward(state, cache, grad)

            self.assertLess(tensor.grad_check(forward, backward, [F, gamma, beta]), 1e-6)

    def test_errors(self):
        state = float64_state(2)
        with self.assertRaisesRegex(ConfigurationError, 'at least 2'):
            normalization.se2_batchnorm(np.ones((1, 4, 3, 3, 2)), state, training=True)
        with self.assertRaisesRegex(ConfigurationError, 'Channel axis'):
            normalization.se2_batchnorm(np.ones((2, 4, 3, 3, 3)), state, training=True)
        normalization.se2_batchnorm(np.ones((1, 4, 3, 3, 2)), state, training=False)

    def test_layer(self):
        layer = normalization.SE2BatchNorm(4, name='block2.bn')
        self.assertEqual(layer.parameter_count(), 8)
        self.assertEqual([p.name for p in layer.parameters()],
            ['block2.bn.gamma', 'block2.bn.beta'])
        self.assertFalse(any(p.decay for p in layer.parameters()))
        F = np.random.default_rng(5).standard_normal((2, 4, 3, 3, 4)).astype(np.float32)
        out = layer.forward(F, training=True)
        grad = layer.backward(np.ones_like(out))
        self.assertEqual(grad.shape, F.shape)
        np.testing.assert_allclose(layer.state.beta.grad, F[..., 0].size, rtol=1e-6)
