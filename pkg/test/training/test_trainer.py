import os
import shutil
import tempfile
import unittest

import mock
import numpy as np

from se2net import base, checkpoint, formats, tensor
from se2net.errors import ConfigurationError, DivergenceError
from se2net.training import trainer
from se2net.training.datasets import Dataset, synth_dataset

from test import models


def small_config(**overrides):
    values = {'batch_size': 4, 'epochs': 2, 'patience': 5, 'seed': 7}
    values.update(overrides)
    return trainer.TrainConfig(**values)

class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        config = trainer.TrainConfig()
        self.assertEqual((config.lr, config.momentum, config.lr_decay_factor,
            config.weight_decay, config.batch_size), (0.01, 0.9, 0.5, 5e-4, 64))
        self.assertEqual(trainer.TrainConfig.for_task('nuclei').batch_size, 16)
        self.assertEqual(trainer.TrainConfig.for_task('mitosis', batch_size=None).batch_size, 64)
        self.assertEqual(trainer.TrainConfig.for_task('tumor', lr=0.1).lr, 0.1)

    def test_epoch_lr(self):
        config = trainer.TrainConfig(lr=0.01)
        self.assertEqual([config.epoch_lr(e) for e in range(3)], [0.01, 0.005, 0.0025])

    def test_validation(self):
        for overrides in ({'lr': -1.0}, {'batch_size': 1}, {'momentum': 1.0}, {'epochs': 0},
                {'lr_decay_factor': 0.0}, {'weight_decay': -0.1}, {'workers': 0},
                {'fraction': 0.0}, {'fraction': 1.5}):
            with self.assertRaises(ConfigurationError):
                trainer.TrainConfig(**overrides)
        self.assertEqual(trainer.TrainConfig(lr=0.0).as_dict()['lr'], 0.0)

class TestBatches(unittest.TestCase):
    def test_classification_batches_are_balanced(self):
        dataset = synth_dataset(0, 6, 12)
        batches = trainer.epoch_batches(dataset, 4, seed=1, epoch=0)
        self.assertEqual(len(batches), 3)
        for batch in batches:
            np.testing.assert_array_equal(np.bincount(dataset.targets[batch], minlength=2), [2, 2])
        again = trainer.epoch_batches(dataset, 4, seed=1, epoch=0)
        for a, b in zip(batches, again):
            np.testing.assert_array_equal(a, b)
        other = trainer.epoch_batches(dataset, 4, seed=1, epoch=1)
        self.assertFalse(all(np.array_equal(a, b) for a, b in zip(batches, other)))

    def test_group_batches_cover_every_sample(self):
        dataset = synth_dataset(0, 4, 16, kind='seg')
        batches = trainer.epoch_batches(dataset, 3, seed=0, epoch=0)
        seen = np.concatenate(batches)
        self.assertEqual(len(set(seen.tolist())), len(seen))
        self.assertGreaterEqual(len(seen), len(dataset) - 1)

    def test_missing_class(self):
        dataset = Dataset(np.zeros((4, 12, 12, 3)), [0, 0, 0, 0])
        with self.assertRaisesRegex(ConfigurationError, 'no samples of class 1'):
            trainer.epoch_batches(dataset, 2, seed=0, epoch=0)

    def test_load_batch_is_keyed_per_sample(self):
        dataset = synth_dataset(0, 4, 12)
        images, targets = trainer.load_batch(dataset, [3, 5], seed=2, epoch=1)
        alone, _ = trainer.load_batch(dataset, [5], seed=2, epoch=1)
        np.testing.assert_array_equal(images[1], alone[0])
        np.testing.assert_array_equal(targets, dataset.targets[[3, 5]])

class TestTraining(unittest.TestCase):
    def setUp(self):
        self.train_set = synth_dataset(0, 4, 14)
        self.val_set = synth_dataset(0, 2, 14, split='val')

    def test_zero_learning_rate_keeps_weights(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        before = [p.value.copy() for p in model.parameters()]
        statistics = [(state.running_mean.copy(), state.running_var.copy())
            for _, state in model.batchnorm_states()]
        history = trainer.train(model, self.train_set, self.val_set,
            small_config(lr=0.0, epochs=3))
        self.assertEqual(len(history), 3)
        self.assertEqual(len(set(row['val_loss'] for row in history)), 1)
        self.assertEqual(len(set(row['val_metric'] for row in history)), 1)
        for param, value in zip(model.parameters(), before):
            np.testing.assert_array_equal(param.value, value)
        for (_, state), (mean, var) in zip(model.batchnorm_states(), statistics):
            np.testing.assert_array_equal(state.running_mean, mean)
            np.testing.assert_array_equal(state.running_var, var)
            self.assertFalse(state.frozen)

    def test_fraction(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        with mock.patch.object(trainer, 'epoch_batches', wraps=trainer.epoch_batches) as batches:
            trainer.train(model, self.train_set, self.val_set,
                small_config(fraction=0.5, epochs=1, batch_size=2))
        subset = batches.call_args[0][0]
        self.assertEqual(len(subset), 4)
        np.testing.assert_array_equal(subset.class_counts(), [2, 2])

    def test_history_is_reproducible(self):
        histories = []
        for workers in (1, 1, 2):
            model = base.build_model(models.tiny_classifier(), rng_seed=0)
            histories.append(trainer.train(model, self.train_set, self.val_set,
                small_config(lr=0.05, workers=workers)))
        self.assertEqual(histories[0], histories[1])
        self.assertEqual(histories[0], histories[2])
        self.assertEqual([row['lr'] for row in histories[0]], [0.05, 0.025])
        self.assertEqual(sorted(histories[0][0]), sorted(name
            for name, _ in trainer.HISTORY_COLUMNS))

    def test_outputs(self):
        out = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, out)
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        history = trainer.train(model, self.train_set, self.val_set, small_config(), out=out)
        rows = formats.read_csv(os.path.join(out, 'history.csv'))
        self.assertEqual(len(rows), len(history))
        self.assertEqual(list(rows[0]),
            ['epoch', 'train_loss', 'val_loss', 'val_metric', 'val_f1', 'lr'])
        restored = checkpoint.load(os.path.join(out, 'model.zip'), config=model.config)
        for a, b in zip(model.parameters(), restored.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_early_stop_restores_best(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        losses = iter([0.5, 0.4, 0.45, 0.6, 0.7])
        with mock.patch.object(trainer, 'score',
                side_effect=lambda *args: {'loss': next(losses), 'accuracy': 0.5, 'f1': 0.5}):
            with self.assertLogs('se2net.training.trainer', 'WARNING'):
                history = trainer.train(model, self.train_set, self.val_set,
                    small_config(epochs=10, patience=2))
        self.assertEqual([row['val_loss'] for row in history], [0.5, 0.4, 0.45, 0.6])

    def test_divergence(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        before = [p.value.copy() for p in model.parameters()]
        with mock.patch('se2net.training.losses.bce', return_value=float('nan')):
            with self.assertRaises(DivergenceError) as raised:
                trainer.train(model, self.train_set, self.val_set, small_config())
        self.assertEqual(raised.exception.history, [])
        for param, value in zip(model.parameters(), before):
            np.testing.assert_array_equal(param.value, value)

    def test_evaluate(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        loss, accuracy = trainer.evaluate(model, self.val_set, batch_size=3)
        self.assertGreater(loss, 0)
        self.assertTrue(0 <= accuracy <= 1)

    def test_score(self):
        model = base.build_model(models.tiny_classifier(), rng_seed=0)
        scores = trainer.score(model, self.val_set, batch_size=3)
        self.assertEqual(sorted(scores), ['accuracy', 'f1', 'loss'])
        self.assertEqual((scores['loss'], scores['accuracy']),
            trainer.evaluate(model, self.val_set, batch_size=3))
        self.assertTrue(0 <= scores['f1'] <= 1)

    def test_segmentation_training(self):
        model = base.build_model(models.tiny_unet(), rng_seed=0)
        train_set = synth_dataset(0, 2, 16, kind='seg')
        val_set = synth_dataset(0, 1, 16, kind='seg', split='val')
        history = trainer.train(model, train_set, val_set, small_config(batch_size=2, epochs=1))
        self.assertEqual(len(history), 1)
        self.assertTrue(np.isfinite(history[0]['val_loss']))

class TestMetrics(unittest.TestCase):
    def test_f1_score(self):
        self.assertEqual(trainer.f1_score(3, 1, 2), 6.0 / 9)
        self.assertEqual(trainer.f1_score(0, 0, 0), 0.0)

    def test_classification_confusion(self):
        pred = np.array([0.9, 0.8, 0.2, 0.1, 0.6]).reshape(5, 1, 1, 1)
        targets = np.array([1, 0, 1, 0, 1])
        self.assertEqual(trainer.batch_confusion(pred, targets), (2, 1, 1))
        self.assertEqual(trainer.batch_correct(pred, targets), (3, 5))

    def test_segmentation_confusion(self):
        pred = np.zeros((1, 2, 2, 3))
        pred[0, :, :, 0] = 1.0
        pred[0, 0, :, 1] = 2.0
        masks = np.array([[[1, 0], [1, 2]]])
        # Predicted class 1 on the top row; true class 1 in the left column
        self.assertEqual(trainer.batch_confusion(pred, masks), (1, 1, 1))

    def test_test_time_augmentation(self):
        model = models.build64(models.tiny_unet())
        images = np.random.default_rng(0).uniform(size=(2, 16, 16, 3))
        with tensor.precision('float64'):
            plain = trainer.predict(model, images)
            averaged = trainer.predict(model, images, tta=True)
            turned = trainer.predict(model, np.rot90(images, 1, axes=(1, 2)), tta=True)
        self.assertEqual(averaged.shape, plain.shape)
        np.testing.assert_allclose(averaged.sum(axis=-1), 1.0, atol=1e-9)
        # Rotating the input rotates the averaged prediction exactly
        np.testing.assert_allclose(turned, np.rot90(averaged, 1, axes=(1, 2)), atol=1e-9)

    def test_test_time_augmentation_of_an_invariant_model(self):
        model = models.build64(models.tiny_classifier())
        images = np.random.default_rng(1).uniform(size=(3, 14, 14, 3))
        with tensor.precision('float64'):
            np.testing.assert_allclose(trainer.predict(model, images, tta=True),
                trainer.predict(model, images), atol=1e-9)

    def test_class_weights_come_from_the_given_split(self):
        model = base.build_model(models.tiny_unet(), rng_seed=0)
        train_set = synth_dataset(0, 2, 16, kind='seg')
        test_set = synth_dataset(0, 1, 16, kind='seg', split='test')
        self.assertIsNone(trainer.class_weights_for(model, synth_dataset(0, 1, 14)))
        weights = trainer.class_weights_for(model, train_set)
        self.assertEqual(weights.shape, (3,))
        with mock.patch.object(trainer, 'batch_loss', wraps=trainer.batch_loss) as loss:
            trainer.score(model, test_set, weights=weights)
        np.testing.assert_array_equal(loss.call_args[0][2], weights)
