import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from se2net import kernels, tensor
from se2net.errors import ConfigurationError
from se2net.utils import serialize


# Mean absolute bank difference between rotating a random unit-norm base by
# 2*pi/8 and shifting its bank by one orientation
OFF_GRID_CONSISTENCY_BOUND = 0.1


def float64_kernel(kind, cin, cout, N, n=5, seed=0):
    with tensor.precision('float64'):
        kernel = kernels.KernelBase(kind, cin, cout, N, n=n)
        kernel.initialize(np.random.default_rng(seed))
    return kernel

class TestCircularMask(unittest.TestCase):
    def test_active_count(self):
        self.assertEqual(kernels.CircularMask(5, 2.5).count, 21)
        self.assertEqual(kernels.CircularMask(5).count, 21)
        self.assertEqual(kernels.CircularMask(3, 1.5).count, 9)
        self.assertEqual(kernels.CircularMask(1).count, 1)

    def test_corners_are_masked(self):
        active = kernels.CircularMask(5).active
        for i, j in ((0, 0), (0, 4), (4, 0), (4, 4)):
            self.assertFalse(active[i, j])
        self.assertTrue(active[2, 2])
        self.assertTrue(active[0, 2])

class TestRotationOperator(unittest.TestCase):
    def test_identity(self):
        op = kernels.build_rotation_operator(5, 0.0)
        mask = op.mask.active.ravel()
        np.testing.assert_array_equal(op.toarray(), np.diag(mask.astype(float)))

    def test_quarter_turn_is_a_permutation(self):
        op = kernels.build_rotation_operator(5, math.pi / 2)
        for (i, j), sources in op.entries.items():
            self.assertEqual(sources, [((j, 4 - i), 1.0)])
        self.assertEqual(len(op.entries), 21)

    def test_quarter_turn_matches_rot90(self):
        base = np.random.default_rng(0).standard_normal((5, 5, 2)) * kernels.CircularMask(
            5).active[..., np.newaxis]
        for k in range(4):
            op = kernels.build_rotation_operator(5, k * math.pi / 2)
            np.testing.assert_array_equal(op.apply(base), np.rot90(base, k, axes=(0, 1)))

    def test_bilinear_weights(self):
        op = kernels.build_rotation_operator(3, math.pi / 4, kernels.CircularMask(3, 1.5))
        weights = dict(op.entries[(0, 1)])
        self.assertEqual(set(weights), set([(0, 1), (0, 2), (1, 1), (1, 2)]))
        self.assertAlmostEqual(weights[(1, 1)], 0.0858, places=4)
        self.assertAlmostEqual(weights[(0, 1)], 0.2071, places=4)
        self.assertAlmostEqual(weights[(1, 2)], 0.2071, places=4)
        self.assertAlmostEqual(weights[(0, 2)], 0.5, places=4)

    def test_partition_of_unity(self):
        for theta in np.linspace(0, 2 * math.pi, 37):
            op = kernels.build_rotation_operator(5, theta)
            supported = [target for target in op.entries if op.is_supported(target)]
            self.assertIn((2, 2), supported)
            for target in supported:
                self.assertAlmostEqual(op.row_sum(target), 1.0, delta=1e-6)
            for target in op.entries:
                self.assertLessEqual(op.row_sum(target), 1.0 + 1e-9)

    def test_transpose(self):
        rng = np.random.default_rng(1)
        op = kernels.build_rotation_operator(5, 0.7)
        x, y = rng.standard_normal((5, 5, 3)), rng.standard_normal((5, 5, 3))
        self.assertAlmostEqual(np.sum(op.apply(x) * y), np.sum(x * op.apply_transpose(y)))

    def test_even_size(self):
        with self.assertRaises(ConfigurationError):
            kernels.build_rotation_operator(4, 0.0)

    def test_operators_are_cached(self):
        self.assertIs(kernels.rotation_operators(5, 8), kernels.rotation_operators(5, 8))

class TestKernelBase(unittest.TestCase):
    def test_shapes_and_counts(self):
        lifting = kernels.KernelBase('lifting', 3, 8, 8)
        self.assertEqual(lifting.base.value.shape, (5, 5, 3, 8))
        self.assertEqual(lifting.derived_bank.shape, (8, 5, 5, 3, 8))
        self.assertEqual(lifting.parameter_count(), 21 * 3 * 8)
        group_kernel = kernels.KernelBase('group', 8, 8, 8)
        self.assertEqual(group_kernel.derived_bank.shape, (8, 5, 5, 8, 8, 8))
        self.assertEqual(group_kernel.parameter_count(), 10752)
        self.assertEqual(kernels.KernelBase('group', 8, 16, 8, n=1).parameter_count(), 1024)
        with self.assertRaises(ConfigurationError):
            kernels.KernelBase('projection', 1, 1, 4)

    def test_masked_positions_stay_zero(self):
        kernel = float64_kernel('group', 2, 3, 8)
        inactive = ~kernel.mask.active
        self.assertTrue(np.all(kernel.base.value[inactive] == 0))
        self.assertTrue(np.all(kernel.derived_bank[:, inactive] == 0))
        self.assertTrue(np.any(kernel.base.value != 0))

    def test_first_orientation_is_the_base(self):
        kernel = float64_kernel('lifting', 2, 3, 8)
        np.testing.assert_array_equal(kernel.derived_bank[0], kernel.base.value)

    def test_single_orientation(self):
        kernel = float64_kernel('lifting', 2, 3, 1)
        np.testing.assert_array_equal(kernel.derived_bank, kernel.base.value[np.newaxis])
        grad = np.random.default_rng(0).standard_normal((1, 5, 5, 2, 3))
        np.testing.assert_allclose(kernels.backprop_bank_to_base(kernel, grad),
            grad[0] * kernel.mask_array)

    def test_symmetric_base(self):
        kernel = float64_kernel('lifting', 1, 1, 4)
        symmetric = np.zeros((5, 5, 1, 1))
        symmetric[2, 2] = 1.0
        symmetric[1, 2] = symmetric[2, 1] = symmetric[3, 2] = symmetric[2, 3] = 0.5
        kernel.set_base(symmetric)
        for i in range(4):
            np.testing.assert_array_equal(kernel.derived_bank[i], symmetric)

    def test_lifting_quarter_turn(self):
        kernel = float64_kernel('lifting', 2, 3, 8)
        np.testing.assert_allclose(kernel.derived_bank[2],
            np.rot90(kernel.base.value, 1, axes=(0, 1)), atol=1e-12)

    def test_group_shift_twist(self):
        kernel = float64_kernel('group', 1, 1, 4)
        base = np.zeros((5, 5, 4, 1, 1))
        base[..., 0, :, :] = np.random.default_rng(3).standard_normal((5, 5, 1, 1))
        kernel.set_base(base)
        bank = kernel.derived_bank[1]
        for m in (0, 2, 3):
            self.assertFalse(np.any(bank[:, :, m]))
        np.testing.assert_array_equal(bank[:, :, 1],
            np.rot90(kernel.base.value[:, :, 0], 1, axes=(0, 1)))

    def test_group_bank_matches_loop(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            N = int(rng.choice([2, 4, 8]))
            cin, cout = rng.integers(1, 3, size=2)
            kernel = float64_kernel('group', int(cin), int(cout), N, n=int(rng.choice([3, 5])),
                seed=int(rng.integers(1 << 30)))
            for j, op in enumerate(kernels.rotation_operators(kernel.n, N)):
                shifted = np.roll(kernel.base.value, j, axis=2)
                expected = np.zeros_like(shifted)
                for target, sources in op.entries.items():
                    for source, weight in sources:
                        expected[target] += weight * shifted[source]
                np.testing.assert_allclose(kernel.derived_bank[j], expected, atol=1e-12)

    def test_single_entry_backprop(self):
        kernel = float64_kernel('group', 1, 1, 4)
        grad = np.zeros((4, 5, 5, 4, 1, 1))
        grad[0, 1, 2, 3, 0, 0] = 1.0
        grad_base = kernels.backprop_bank_to_base(kernel, grad)
        self.assertEqual(grad_base[1, 2, 3, 0, 0], 1.0)
        self.assertEqual(np.count_nonzero(grad_base), 1)
        with self.assertRaises(ConfigurationError):
            kernels.backprop_bank_to_base(kernel, grad[:2])

    def test_backprop_gradients(self):
        for kind, N in (('lifting', 8), ('group', 4)):
            kernel = float64_kernel(kind, 2, 2, N, seed=7)

            def forward(base):
                kernel.set_base(base)
                return kernel.derived_bank

            def backward(base, grad):
                kernel.set_base(base)
                return kernels.backprop_bank_to_base(kernel, grad)

            error = tensor.grad_check(forward, backward, [kernel.base.value.copy()])
            self.assertLess(error, 1e-6)

    def test_export_bank(self):
        directory = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, directory)
        kernel = float64_kernel('lifting', 3, 2, 4)
        path = os.path.join(directory, 'bank.se2t')
        kernels.export_bank(kernel, path)
        np.testing.assert_allclose(serialize.load(path), kernel.derived_bank, rtol=1e-6,
            atol=1e-7)

class TestOffGridConsistency(unittest.TestCase):
    """Rotating the base by ``theta_j`` against shifting the bank by ``j``."""

    def setUp(self):
        self.x, self.y = np.meshgrid(np.arange(5) - 2.0, 2.0 - np.arange(5))

    def test_gaussian_round_trip(self):
        x, y = self.x, self.y
        gaussian = (np.exp(-(x ** 2 + y ** 2) / (2 * 1.5 ** 2)) *
            kernels.CircularMask(5).active)[..., np.newaxis]
        forward = kernels.build_rotation_operator(5, math.pi / 4)
        back = kernels.build_rotation_operator(5, -math.pi / 4)
        error = np.abs(back.apply(forward.apply(gaussian)) - gaussian)[..., 0]
        self.assertEqual(error[2, 2], 0.0)
        self.assertLessEqual(error[x ** 2 + y ** 2 <= 1.5 ** 2].max(), 0.15)

    def test_linear_base_is_exact_near_the_centre(self):
        x, y = self.x, self.y
        N = 8
        kernel = float64_kernel('lifting', 1, 1, N)
        rotated = float64_kernel('lifting', 1, 1, N)
        kernel.set_base((0.3 * x - 0.7 * y + 0.2)[..., np.newaxis, np.newaxis])
        centre = x ** 2 + y ** 2 <= 1.0
        for j in range(N):
            theta = 2 * math.pi * j / N
            u = math.cos(theta) * x + math.sin(theta) * y
            v = -math.sin(theta) * x + math.cos(theta) * y
            rotated.set_base((0.3 * u - 0.7 * v + 0.2)[..., np.newaxis, np.newaxis])
            for i in range(N):
                np.testing.assert_allclose(rotated.derived_bank[i][centre],
                    kernel.derived_bank[(i + j) % N][centre], atol=1e-12)

    def test_random_base_stays_within_bound(self):
        errors = []
        for seed in range(100):
            kernel = float64_kernel('lifting', 1, 1, 8)
            base = np.random.default_rng(seed).standard_normal((5, 5, 1, 1)) * kernel.mask_array
            kernel.set_base(base / np.linalg.norm(base))
            rotated = float64_kernel('lifting', 1, 1, 8)
            rotated.set_base(kernel.operators[1].apply(kernel.base.value))
            errors.append(np.abs(rotated.derived_bank - np.roll(kernel.derived_bank, -1,
                axis=0)).mean())
        self.assertGreater(np.mean(errors), 0.0)
        self.assertLessEqual(np.mean(errors), OFF_GRID_CONSISTENCY_BOUND)

