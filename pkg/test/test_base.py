import unittest

import numpy as np

import se2net
from se2net import base, blocks, tensor
from se2net.errors import ConfigurationError

from test import models


class TestPresetUtilities(unittest.TestCase):
    def setUp(self):
        # Ensure the preset metaclass' catalog only holds what the test declares
        self._old_preset_catalog = base.PresetMeta.preset_catalog
        base.PresetMeta.preset_catalog = []

    def tearDown(self):
        # Restore the original preset catalog
        base.PresetMeta.preset_catalog = self._old_preset_catalog

    def test_get_code_name(self):
        self.assertEqual(base.get_code_name('SynthClsPreset'), 'synth-cls')
        self.assertEqual(base.get_code_name('MitosisPreset'), 'mitosis')

    def test_get_preset_by_task(self):
        # Couple presets to test with
        class StupidTestPreset(base.Preset):
            input_shape = (14, 14, 3)
            widths = {4: (2, 2)}
        class NamedStupidPreset(base.Preset):
            task = 'even-more-stupid'
            input_shape = (14, 14, 3)
            widths = {4: (2, 2)}
        class AbstractPreset(base.Preset):
            pass

        self.assertEqual(None, se2net.get_preset_by_task('nonexistent'))
        self.assertEqual(None, se2net.get_preset_by_task(None))
        self.assertEqual(StupidTestPreset, se2net.get_preset_by_task('stupid-test'))
        self.assertEqual(NamedStupidPreset, se2net.get_preset_by_task('even-more-stupid'))
        self.assertEqual(set(se2net.get_presets()), set(['stupid-test', 'even-more-stupid']))

class TestPresets(unittest.TestCase):
    def test_catalog(self):
        self.assertEqual(set(se2net.get_presets()),
            set(['mitosis', 'nuclei', 'tumor', 'synth-cls']))
        for preset in se2net.get_presets().values():
            self.assertEqual(preset.orientation_counts(), [1, 4, 8, 16])

    def test_table_totals(self):
        for task in ('mitosis', 'nuclei', 'tumor'):
            preset = se2net.get_preset_by_task(task)
            for N, published in sorted(preset.table_totals.items()):
                strict = base.build_model(preset.config(N, strict_table_counts=True))
                self.assertEqual(strict.count_params()[0], published, '%s N=%d' % (task, N))
                model = base.build_model(preset.config(N))
                expected = published - 3 if task == 'nuclei' else published
                self.assertEqual(base.count_params(model)[0], expected, '%s N=%d' % (task, N))

    def test_mitosis_breakdown(self):
        model = base.build_model(se2net.get_preset_by_task('mitosis').config(8))
        total, breakdown = model.count_params()
        self.assertEqual(total, 33897)
        self.assertEqual(breakdown, [('block1', 520), ('block2', 10768), ('block3', 10768),
            ('block4', 10768), ('block5', 1056), ('head', 17)])

    def test_nuclei_skip_widths(self):
        model = base.build_model(se2net.get_preset_by_task('nuclei').config(8))
        breakdown = dict(model.count_params()[1])
        self.assertEqual(breakdown['block4'], 21520)
        self.assertEqual(breakdown['block5'], 21520)
        self.assertEqual(breakdown['head'], 51)

    def test_shapes(self):
        mitosis = base.build_model(se2net.get_preset_by_task('mitosis').config(8))
        self.assertEqual(mitosis.shapes, [(8, 32, 32, 8), (8, 14, 14, 8), (8, 5, 5, 8),
            (8, 1, 1, 8), (8, 1, 1, 16), (1, 1, 16), (1, 1, 1)])
        nuclei = base.build_model(se2net.get_preset_by_task('nuclei').config(8))
        self.assertEqual(nuclei.shapes, [(8, 28, 28, 8), (8, 12, 12, 8), (8, 8, 8, 8),
            (8, 12, 12, 8), (8, 20, 20, 8), (8, 20, 20, 16), (20, 20, 16), (20, 20, 3)])
        tumor = base.build_model(se2net.get_preset_by_task('tumor').config(16))
        self.assertEqual(tumor.shapes, [(16, 42, 42, 10), (16, 19, 19, 10), (16, 5, 5, 10),
            (16, 1, 1, 4), (16, 1, 1, 16), (1, 1, 16), (1, 1, 1)])
        baseline = base.build_model(se2net.get_preset_by_task('mitosis').config(1))
        self.assertEqual(len(baseline.count_params()[1]), 6)
        self.assertEqual(baseline.minimum_input_size(), 68)

    def test_minimum_input_size(self):
        mitosis = base.build_model(se2net.get_preset_by_task('mitosis').config(4))
        self.assertEqual(mitosis.minimum_input_size(), 68)
        with self.assertRaisesRegex(ConfigurationError, '68x68'):
            mitosis.forward(np.zeros((1, 60, 60, 3)))
        self.assertEqual(base.build_model(models.tiny_classifier()).minimum_input_size(), 14)

    def test_unknown_orientation_count(self):
        with self.assertRaises(ConfigurationError):
            se2net.get_preset_by_task('tumor').config(2)

class TestModelConfig(unittest.TestCase):
    def config(self, layers):
        return base.ModelConfig('custom', 4, layers, input_shape=(20, 20, 3))

    def test_valid(self):
        config = models.tiny_classifier()
        self.assertEqual(config.names, ['block1', 'block2', 'projection', 'head'])

    def test_group_before_lifting(self):
        with self.assertRaisesRegex(ConfigurationError, 'before any lifting block'):
            self.config([
                ('block1', blocks.GroupConv(2)),
                ('block2', blocks.Lifting(2)),
                ('projection', blocks.Projection('max')),
                ('head', blocks.Head(1, 'sigmoid')),
            ])

    def test_missing_projection(self):
        with self.assertRaisesRegex(ConfigurationError, 'No projection'):
            self.config([
                ('block1', blocks.Lifting(2)),
                ('head', blocks.Head(1, 'sigmoid')),
            ])

    def test_head_before_projection(self):
        with self.assertRaisesRegex(ConfigurationError, 'before the projection'):
            self.config([
                ('block1', blocks.Lifting(2)),
                ('head', blocks.Head(1, 'sigmoid')),
                ('projection', blocks.Projection('max')),
            ])

    def test_other_violations(self):
        layouts = [
            # Two projections
            [('block1', blocks.Lifting(2)), ('p1', blocks.Projection('max')),
                ('p2', blocks.Projection('max')), ('head', blocks.Head(1, 'sigmoid'))],
            # A second lifting block
            [('block1', blocks.Lifting(2)), ('block2', blocks.Lifting(2)),
                ('projection', blocks.Projection('max')), ('head', blocks.Head(1, 'sigmoid'))],
            # No head
            [('block1', blocks.Lifting(2)), ('projection', blocks.Projection('max'))],
            # Skip to a later block
            [('block1', blocks.Lifting(2)), ('block2', blocks.GroupConv(2, skip='block3')),
                ('block3', blocks.GroupConv(2)), ('projection', blocks.Projection('max')),
                ('head', blocks.Head(1, 'sigmoid'))],
            # Duplicate names
            [('block1', blocks.Lifting(2)), ('block1', blocks.GroupConv(2)),
                ('projection', blocks.Projection('max')), ('head', blocks.Head(1, 'sigmoid'))],
        ]
        for layers in layouts:
            with self.assertRaises(ConfigurationError):
                self.config(layers)
        with self.assertRaises(ConfigurationError):
            base.ModelConfig('custom', 0, models.tiny_classifier().layers, (14, 14, 3))

    def test_projection_mode(self):
        with self.assertRaises(ConfigurationError):
            base.build_model(models.tiny_classifier(projection='sum'))

class TestModel(unittest.TestCase):
    def test_deterministic_initialization(self):
        a = base.build_model(models.tiny_classifier(), rng_seed=3)
        b = base.build_model(models.tiny_classifier(), rng_seed=3)
        c = base.build_model(models.tiny_classifier(), rng_seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)
        self.assertFalse(np.array_equal(a.parameters()[0].value, c.parameters()[0].value))

    def test_forward_prefix_and_trace(self):
        model = base.build_model(models.tiny_classifier())
        x = np.random.default_rng(0).random((2, 14, 14, 3))
        self.assertEqual(model.forward(x, upto='block1').shape, (2, 4, 5, 5, 2))
        self.assertEqual(model.forward(x, upto=2).shape, (2, 4, 1, 1, 2))
        self.assertEqual(model.forward(x, upto='block1', pooling=False).shape, (2, 4, 10, 10, 2))
        trace = model.trace(x)
        self.assertEqual([image.provenance for image in trace], model.config.names)
        self.assertEqual(trace[-1].N, 1)
        with self.assertRaises(ConfigurationError):
            model.forward(x, upto='block9')
        with self.assertRaises(ConfigurationError):
            model.forward(x[0])

    def test_frozen_statistics(self):
        model = base.build_model(models.tiny_classifier())
        x = np.random.default_rng(5).random((2, 14, 14, 3))
        with model.frozen_statistics():
            model.forward(x, training=True)
            self.assertTrue(all(state.frozen for _, state in model.batchnorm_states()))
        for _, state in model.batchnorm_states():
            self.assertFalse(state.frozen)
            np.testing.assert_array_equal(state.running_mean, 0.0)
        model.forward(x, training=True)
        self.assertTrue(any(np.any(state.running_mean != 0)
            for _, state in model.batchnorm_states()))

    def test_inference_is_deterministic(self):
        model = base.build_model(models.tiny_classifier())
        x = np.random.default_rng(1).random((2, 14, 14, 3))
        np.testing.assert_array_equal(base.forward(model, x), base.forward(model, x))

    def test_nuclei_output(self):
        model = base.build_model(se2net.get_preset_by_task('nuclei').config(4))
        pred = model.forward(np.random.default_rng(2).random((1, 60, 60, 3)))
        self.assertEqual(pred.shape, (1, 20, 20, 3))
        np.testing.assert_allclose(pred.sum(axis=-1), 1.0, atol=1e-5)

    def test_mitosis_quarter_turn_invariance(self):
        model = models.build64(se2net.get_preset_by_task('mitosis').config(4))
        x = np.random.default_rng(3).random((1, 68, 68, 3))
        with tensor.precision('float64'):
            pred = model.forward(x)
            for k in (1, 2, 3):
                rotated = model.forward(np.rot90(x, k, axes=(1, 2)))
                self.assertLessEqual(abs(rotated.item() - pred.item()), 1e-5)

    def test_dense_application(self):
        model = models.build64(se2net.get_preset_by_task('mitosis').config(4))
        self.assertEqual(model.output_shape((76, 76, 3)), (2, 2, 1))
        self.assertEqual(model.output_shape((132, 132, 3)), (9, 9, 1))
        x = np.random.default_rng(4).random((1, 76, 76, 3))
        with tensor.precision('float64'):
            dense = model.forward(x)
            self.assertEqual(dense.shape, (1, 2, 2, 1))
            for r in range(2):
                for c in range(2):
                    patch = x[:, 8 * r:8 * r + 68, 8 * c:8 * c + 68]
                    self.assertAlmostEqual(model.forward(patch).item(), dense[0, r, c, 0],
                        places=9)

    def test_input_gradients(self):
        model = models.build64(models.tiny_unet())
        x = np.random.default_rng(5).random((2, 16, 16, 3))

        def forward(x):
            return model.forward(x, training=True)

        def backward(x, grad):
            model.zero_grad()
            return model.backward(grad)

        self.assertLess(tensor.grad_check(forward, backward, [x]), 1e-4)

    def test_parameter_gradients(self):
        model = models.build64(models.tiny_unet(), seed=1)
        rng = np.random.default_rng(6)
        x = rng.random((2, 16, 16, 3))
        with tensor.precision('float64'):
            out = model.forward(x, training=True)
            direction = rng.standard_normal(out.shape)
            model.zero_grad()
            model.backward(direction)

            def objective():
                model.refresh()
                return np.sum(model.forward(x, training=True) * direction)

            eps = 1e-6
            for param in model.parameters():
                nonzero = np.argwhere(param.value != 0)
                index = tuple(nonzero[0]) if len(nonzero) else (0,) * param.value.ndim
                original = param.value[index]
                param.value[index] = original + eps
                plus = objective()
                param.value[index] = original - eps
                minus = objective()
                param.value[index] = original
                numeric = (plus - minus) / (2 * eps)
                self.assertLess(abs(param.grad[index] - numeric) / max(1.0, abs(numeric)), 1e-4,
                    param.name)
            model.refresh()
