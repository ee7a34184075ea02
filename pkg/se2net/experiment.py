"""
The rotation comparison: a G-CNN against its ``N = 1`` baseline.

For every seed both models are built from the same preset, trained on the
same splits with the same settings, scored on the test split and audited on
the first ``n_samples`` test images. The audit statistic is the polar
response variance for single-output heads and the mean re-aligned standard
deviation for dense heads; the G-CNN wins a sample when its statistic is
strictly below the baseline's.

The outcome is checked against fixed acceptance thresholds:

* the mean test accuracy of the G-CNN beats the baseline's by
  ``ACCURACY_MARGIN``
* the G-CNN wins on at least ``WIN_RATE`` of the audited samples
* every baseline fits its training data to ``BASELINE_TRAIN_ACCURACY``

Results go to ``runs.csv`` (one row per seed and model), ``samples.csv``
(the paired audit statistics) and ``summary.json``.
"""

import logging
import os

import numpy as np

from se2net import audit, formats, get_preset_by_task
from se2net.base import build_model
from se2net.errors import ConfigurationError
from se2net.training.trainer import TrainConfig, class_weights_for, score, train


logger = logging.getLogger(__name__)

ACCURACY_MARGIN = 0.05
WIN_RATE = 0.8
BASELINE_TRAIN_ACCURACY = 0.95

RUN_COLUMNS = [
    ('seed', formats.Integer()),
    ('N', formats.Integer()),
    ('parameters', formats.Integer()),
    ('epochs', formats.Integer()),
    ('train_accuracy', formats.Float()),
    ('test_loss', formats.Float()),
    ('test_accuracy', formats.Float()),
    ('test_f1', formats.Float()),
    ('mean_statistic', formats.Float()),
]

SAMPLE_COLUMNS = [
    ('seed', formats.Integer()),
    ('sample_id', formats.String()),
    ('baseline', formats.Float()),
    ('gcnn', formats.Float()),
]

SUMMARY_COLUMNS = [
    ('task', formats.String()),
    ('N', formats.Integer()),
    ('baseline_N', formats.Integer()),
    ('steps', formats.Integer()),
    ('samples', formats.Integer()),
    ('gcnn_accuracy', formats.Float()),
    ('baseline_accuracy', formats.Float()),
    ('accuracy_margin', formats.Float()),
    ('gcnn_f1', formats.Float()),
    ('baseline_f1', formats.Float()),
    ('baseline_train_accuracy', formats.Float()),
    ('win_rate', formats.Float()),
]

def rotation_statistic(model, image, steps=16):
    """How much the prediction for ``image`` moves as the image turns."""
    if model.output_shape(image.shape)[-1] == 1:
        return audit.response_variance(audit.polar_response(model, image, steps))
    _, std_map = audit.aligned_prediction_stats(model, image, steps)
    return float(np.mean(std_map))

def win_rate(gcnn, baseline):
    """The fraction of paired statistics where ``gcnn`` is strictly lower."""
    gcnn, baseline = np.asarray(gcnn), np.asarray(baseline)
    if gcnn.shape != baseline.shape or gcnn.size == 0:
        raise ConfigurationError('Win rate needs equally many statistics, got %d and %d.' % (
            gcnn.size, baseline.size))
    return float(np.mean(gcnn < baseline))

def _expected_kind(config):
    return 'seg' if config.layers[-1][1].classes > 1 else 'cls'

def _run(preset, n, seed, splits, steps, n_samples, train_overrides):
    config = preset.config(n)
    train_set, test_set = splits['train'], splits['test']
    if train_set.kind != _expected_kind(config):
        raise ConfigurationError('Task %s needs a %s dataset, got %s samples.' % (
            preset.task, _expected_kind(config), train_set.kind))
    train_config = TrainConfig.for_task(preset.task, seed=seed, **train_overrides)
    model = build_model(config, rng_seed=seed)
    history = train(model, train_set, splits['val'], train_config)
    fitted = score(model, train_set.subset(train_config.fraction, seed))
    tested = score(model, test_set, weights=class_weights_for(model, train_set))
    statistics = [rotation_statistic(model, test_set.images[i], steps)
        for i in range(n_samples)]
    logger.info('Seed %d, N=%d: test accuracy %.4g, mean statistic %.4g', seed, n,
        tested['accuracy'], np.mean(statistics))
    row = {
        'seed': seed,
        'N': n,
        'parameters': model.count_params()[0],
        'epochs': len(history),
        'train_accuracy': fitted['accuracy'],
        'test_loss': tested['loss'],
        'test_accuracy': tested['accuracy'],
        'test_f1': tested['f1'],
        'mean_statistic': float(np.mean(statistics)),
    }
    return row, statistics

def compare(task, splits, seeds, N=8, baseline_N=1, steps=16, n_samples=None, out=None,
        **train_overrides):
    """
    Runs the comparison over ``seeds`` and returns the summary dict, which
    carries a ``checks`` dict of threshold name to pass flag and an overall
    ``passed``. ``splits`` maps ``train``, ``val`` and ``test`` to datasets;
    ``train_overrides`` are :class:`TrainConfig` fields.
    """
    preset = get_preset_by_task(task)
    if preset is None:
        raise ConfigurationError('Unknown task %r.' % (task,))
    if N == baseline_N:
        raise ConfigurationError('The G-CNN and the baseline both have N=%d.' % N)
    if not seeds:
        raise ConfigurationError('The comparison needs at least one seed.')
    test_set = splits['test']
    n_samples = len(test_set) if n_samples is None else min(n_samples, len(test_set))

    runs, samples = [], []
    for seed in seeds:
        results = {}
        for n in (baseline_N, N):
            row, statistics = _run(preset, n, seed, splits, steps, n_samples, train_overrides)
            runs.append(row)
            results[n] = statistics
        for index in range(n_samples):
            samples.append({
                'seed': seed,
                'sample_id': test_set.ids[index],
                'baseline': results[baseline_N][index],
                'gcnn': results[N][index],
            })

    def mean_of(n, key):
        return float(np.mean([row[key] for row in runs if row['N'] == n]))

    summary = {
        'task': task,
        'N': N,
        'baseline_N': baseline_N,
        'steps': steps,
        'samples': len(samples),
        'gcnn_accuracy': mean_of(N, 'test_accuracy'),
        'baseline_accuracy': mean_of(baseline_N, 'test_accuracy'),
        'gcnn_f1': mean_of(N, 'test_f1'),
        'baseline_f1': mean_of(baseline_N, 'test_f1'),
        'baseline_train_accuracy': min(row['train_accuracy'] for row in runs
            if row['N'] == baseline_N),
        'win_rate': win_rate([row['gcnn'] for row in samples],
            [row['baseline'] for row in samples]),
    }
    summary['accuracy_margin'] = summary['gcnn_accuracy'] - summary['baseline_accuracy']
    checks = {
        'accuracy_margin': summary['accuracy_margin'] >= ACCURACY_MARGIN,
        'win_rate': summary['win_rate'] >= WIN_RATE,
        'baseline_fit': summary['baseline_train_accuracy'] >= BASELINE_TRAIN_ACCURACY,
    }
    for name, passed in sorted(checks.items()):
        if not passed:
            logger.warning('Comparison check %s failed', name)
    summary['checks'] = checks
    summary['passed'] = all(checks.values())

    if out is not None:
        os.makedirs(out, exist_ok=True)
        formats.write_csv(os.path.join(out, 'runs.csv'), RUN_COLUMNS, runs)
        formats.write_csv(os.path.join(out, 'samples.csv'), SAMPLE_COLUMNS, samples)
        data = formats.format_rows(SUMMARY_COLUMNS, [summary], 'json')[0]
        data.update({'seeds': list(seeds), 'checks': checks, 'passed': summary['passed']})
        formats.write_json(os.path.join(out, 'summary.json'), data)
    return summary
