"""
The ``se2net`` command line.

Subcommands:

* ``synth``: render a synthetic dataset directory
* ``params``: print the per-block parameter counts of a preset
* ``train``: train a preset on a dataset directory
* ``eval``: loss, accuracy and F1 of a checkpoint on one split
* ``polar``: polar response curves of a checkpoint
* ``equiv``: equivariance errors of a checkpoint prefix
* ``align-stats``: re-aligned mean and standard deviation maps
* ``compare``: a G-CNN against its ``N = 1`` baseline over several seeds

Every subcommand accepts ``--seed``, ``--workers``, ``--f64``, ``--force`` and
``--log-level``. Results are written as CSV, JSON or SE2T files; logs go to
stderr. Outputs that already exist are only replaced with ``--force``.

Exit codes: ``0`` on success, ``1`` for invalid flags, configurations or
data, ``2`` for any other failure.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import logging
import math
import os
import sys
import threading

import numpy as np

from se2net import (audit, checkpoint, experiment, formats, get_preset_by_task, get_presets,
    tensor)
from se2net.base import build_model
from se2net.errors import ConfigurationError, DataError
from se2net.training import (Dataset, TrainConfig, class_weights_for, load_splits, score, train,
    write_synth)
from se2net.utils import serialize


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
SYNTH_SIZES = {'cls': 36, 'seg': 60}

ALIGN_COLUMNS = [
    ('sample_id', formats.String()),
    ('mean_std', formats.Float()),
    ('max_std', formats.Float()),
]

class ArgumentParser(argparse.ArgumentParser):
    """Exits with status 1 on usage errors."""
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, '%s: error: %s\n' % (self.prog, message))

def _positive(value):
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError('must be at least 1, got %s' % value)
    return number

def _prefix(value):
    return int(value) if value.isdigit() else value

def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help='random seed (default 0)')
    common.add_argument('--workers', type=_positive, default=1,
        help='parallel workers for data loading and audits (default 1)')
    common.add_argument('--f64', action='store_true',
        help='compute in 64-bit floats instead of 32-bit')
    common.add_argument('--force', action='store_true', help='replace existing outputs')
    common.add_argument('--log-level', choices=LOG_LEVELS, default='WARNING',
        help='stderr log level (default WARNING)')

    parser = ArgumentParser(prog='se2net',
        description='Roto-translation equivariant CNNs: build, train and audit.')
    commands = parser.add_subparsers(dest='command', metavar='command',
        parser_class=ArgumentParser)
    commands.required = True
    tasks = sorted(get_presets())

    synth = commands.add_parser('synth', parents=[common], help='render a synthetic dataset')
    synth.add_argument('--out', required=True, help='dataset directory to create')
    synth.add_argument('--kind', choices=('cls', 'seg'), default='cls',
        help='classification or segmentation samples (default cls)')
    synth.add_argument('--size', type=_positive, help='patch extent (default 36 cls, 60 seg)')
    synth.add_argument('--n-per-class', type=_positive, default=2000,
        help='training samples per class (default 2000)')
    synth.add_argument('--val-per-class', type=_positive, default=250,
        help='validation samples per class (default 250)')
    synth.add_argument('--test-per-class', type=_positive, default=500,
        help='test samples per class (default 500)')
    synth.set_defaults(handler=cmd_synth)

    params = commands.add_parser('params', parents=[common],
        help='print per-block parameter counts')
    params.add_argument('--task', choices=tasks, required=True, help='preset architecture')
    params.add_argument('--n', type=int, required=True, help='orientation count N')
    params.add_argument('--strict-table', action='store_true',
        help='per-class affine instead of a bias in multi-class heads')
    params.set_defaults(handler=cmd_params)

    training = commands.add_parser('train', parents=[common], help='train a preset')
    training.add_argument('--task', choices=tasks, required=True, help='preset architecture')
    training.add_argument('--n', type=int, required=True, help='orientation count N')
    training.add_argument('--data', required=True, help='dataset directory')
    training.add_argument('--out', required=True,
        help='directory for history.csv, model.zip and train_config.json')
    training.add_argument('--epochs', type=_positive, default=20, help='epochs (default 20)')
    training.add_argument('--batch-size', type=int,
        help='batch size (default 64, 16 for nuclei)')
    training.add_argument('--lr', type=float, default=0.01, help='learning rate (default 0.01)')
    training.add_argument('--patience', type=_positive, default=5,
        help='early-stop patience in epochs (default 5)')
    training.add_argument('--fraction', type=float, default=1.0,
        help='train on this class-balanced fraction of the training split (default 1)')
    training.add_argument('--strict-table', action='store_true',
        help='per-class affine instead of a bias in multi-class heads')
    training.set_defaults(handler=cmd_train)

    evaluation = commands.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    evaluation.add_argument('--model', required=True, help='checkpoint file')
    evaluation.add_argument('--data', required=True, help='dataset directory')
    evaluation.add_argument('--split', choices=('train', 'val', 'test'), default='test',
        help='split to evaluate (default test)')
    evaluation.add_argument('--tta', action='store_true',
        help='average the predictions of the four quarter turns of every patch')
    evaluation.add_argument('--out', required=True, help='metrics JSON file')
    evaluation.set_defaults(handler=cmd_eval)

    polar = commands.add_parser('polar', parents=[common], help='polar response curves')
    _audit_arguments(polar, 'polar CSV file')
    polar.add_argument('--steps', type=_positive, default=16,
        help='rotations per full turn (default 16)')
    polar.set_defaults(handler=cmd_polar)

    equiv = commands.add_parser('equiv', parents=[common], help='equivariance errors')
    _audit_arguments(equiv, 'equivariance JSON file')
    equiv.add_argument('--theta-index', type=int, required=True,
        help='rotate by 2*pi*j/N for this j')
    equiv.add_argument('--layer-prefix', type=_prefix,
        help='block name or count ending the audited prefix (default: whole model)')
    equiv.add_argument('--no-pool', action='store_true',
        help='skip pooling in the prefix at every angle (off-grid angles always do)')
    equiv.set_defaults(handler=cmd_equiv)

    align = commands.add_parser('align-stats', parents=[common],
        help='re-aligned prediction mean and std maps')
    _audit_arguments(align, 'output directory')
    align.add_argument('--steps', type=_positive, default=16,
        help='rotations per full turn (default 16)')
    align.set_defaults(handler=cmd_align_stats)

    comparison = commands.add_parser('compare', parents=[common],
        help='train a G-CNN and its N=1 baseline over several seeds and compare them')
    comparison.add_argument('--task', choices=tasks, default='synth-cls',
        help='preset architecture (default synth-cls)')
    comparison.add_argument('--n', type=int, default=8, help='G-CNN orientation count (default 8)')
    comparison.add_argument('--baseline-n', type=int, default=1,
        help='baseline orientation count (default 1)')
    comparison.add_argument('--data', required=True, help='dataset directory')
    comparison.add_argument('--out', required=True,
        help='directory for runs.csv, samples.csv and summary.json')
    comparison.add_argument('--seeds', type=_positive, default=3,
        help='number of seeds, counting up from --seed (default 3)')
    comparison.add_argument('--epochs', type=_positive, default=20, help='epochs (default 20)')
    comparison.add_argument('--batch-size', type=int,
        help='batch size (default 64, 16 for nuclei)')
    comparison.add_argument('--lr', type=float, default=0.01,
        help='learning rate (default 0.01)')
    comparison.add_argument('--patience', type=_positive, default=5,
        help='early-stop patience in epochs (default 5)')
    comparison.add_argument('--fraction', type=float, default=1.0,
        help='train on this class-balanced fraction of the training split (default 1)')
    comparison.add_argument('--steps', type=_positive, default=16,
        help='rotations per full turn in the audit (default 16)')
    comparison.add_argument('--n-samples', type=_positive,
        help='audit only the first n test samples (default all)')
    comparison.set_defaults(handler=cmd_compare)
    return parser

def _audit_arguments(parser, out_help):
    parser.add_argument('--model', required=True, help='checkpoint file')
    parser.add_argument('--data', required=True, help='dataset directory')
    parser.add_argument('--split', choices=('train', 'val', 'test'), default='test',
        help='split to audit (default test)')
    parser.add_argument('--n-samples', type=_positive,
        help='audit only the first n samples (default all)')
    parser.add_argument('--out', required=True, help=out_help)

# Helpers

def _check_out(path, force):
    if os.path.isdir(path) and os.listdir(path) or os.path.isfile(path):
        if not force:
            raise ConfigurationError('%s already exists; pass --force to replace it.' % path)

def _preset(task):
    preset = get_preset_by_task(task)
    if preset is None:
        raise ConfigurationError('Unknown task %r.' % (task,))
    return preset

def _samples(args):
    dataset = Dataset.load(args.data, args.split)
    count = len(dataset) if args.n_samples is None else min(args.n_samples, len(dataset))
    return dataset, [(dataset.ids[i], dataset.images[i]) for i in range(count)]

def _map_samples(args, model, fn, samples):
    """Runs ``fn(model, sample)`` over samples; each worker thread loads its own model."""
    if args.workers == 1:
        return [fn(model, sample) for sample in samples]
    local = threading.local()

    def run_one(sample):
        if not hasattr(local, 'model'):
            local.model = checkpoint.load(args.model)
        return fn(local.model, sample)

    with ThreadPoolExecutor(args.workers) as pool:
        return list(pool.map(run_one, samples))

# Subcommands

def cmd_synth(args):
    _check_out(args.out, args.force)
    size = args.size or SYNTH_SIZES[args.kind]
    counts = {'train': args.n_per_class, 'val': args.val_per_class,
        'test': args.test_per_class}
    write_synth(args.out, args.seed, size, kind=args.kind, counts=counts)

def cmd_params(args):
    preset = _preset(args.task)
    model = build_model(preset.config(args.n, strict_table_counts=args.strict_table),
        rng_seed=args.seed)
    total, breakdown = model.count_params()
    for name, count in breakdown:
        sys.stdout.write('%s %d\n' % (name, count))
    sys.stdout.write('total %d\n' % total)
    published = preset.table_totals.get(args.n)
    if published is not None and published != total:
        logger.warning('%s N=%d has %d parameters, the published total is %d (%+d)',
            args.task, args.n, total, published, total - published)

def cmd_train(args):
    preset = _preset(args.task)
    config = preset.config(args.n, strict_table_counts=args.strict_table)
    train_config = TrainConfig.for_task(args.task, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, patience=args.patience, seed=args.seed,
        workers=args.workers, fraction=args.fraction)
    _check_out(args.out, args.force)
    train_set = Dataset.load(args.data, 'train')
    val_set = Dataset.load(args.data, 'val')
    expected = 'seg' if config.layers[-1][1].classes > 1 else 'cls'
    if train_set.kind != expected:
        raise ConfigurationError('Task %s needs a %s dataset, %s holds %s samples.' % (
            args.task, expected, args.data, train_set.kind))
    model = build_model(config, rng_seed=args.seed)
    history = train(model, train_set, val_set, train_config, out=args.out)
    formats.write_json(os.path.join(args.out, 'train_config.json'), train_config.as_dict())
    if history:
        logger.info('Trained %d epochs, final validation metric %.4g', len(history),
            history[-1]['val_metric'])

def cmd_eval(args):
    _check_out(args.out, args.force)
    model = checkpoint.load(args.model)
    dataset = Dataset.load(args.data, args.split)
    weights = None
    if dataset.kind == 'seg':
        reference = dataset if args.split == 'train' else Dataset.load(args.data, 'train')
        weights = class_weights_for(model, reference)
    scores = score(model, dataset, weights=weights, tta=args.tta)
    float_format = formats.Float()
    formats.write_json(args.out, {
        'split': args.split,
        'samples': len(dataset),
        'tta': args.tta,
        'loss': float_format.format_json(scores['loss']),
        'metric': float_format.format_json(scores['accuracy']),
        'f1': float_format.format_json(scores['f1']),
    })
    logger.info('%s: loss %.4g, metric %.4g, F1 %.4g', args.split, scores['loss'],
        scores['accuracy'], scores['f1'])

def cmd_polar(args):
    _check_out(args.out, args.force)
    model = checkpoint.load(args.model)
    _, samples = _samples(args)
    responses = _map_samples(args, model,
        lambda m, sample: audit.polar_response(m, sample[1], args.steps), samples)
    report = audit.AuditReport()
    for (sample_id, _), response in zip(samples, responses):
        report.add_polar(sample_id, response)
    report.to_csv(args.out)
    logger.info('Polar responses of %d samples, mean variance %.4g', len(samples),
        report.summary().get('mean_variance', 0.0))

def cmd_equiv(args):
    _check_out(args.out, args.force)
    model = checkpoint.load(args.model)
    N = model.config.N
    theta = 2 * math.pi * args.theta_index / N
    model.resolve_upto(args.layer_prefix)
    _, samples = _samples(args)
    errors = _map_samples(args, model,
        lambda m, sample: audit.equivariance_error(m, sample[1], theta, upto=args.layer_prefix,
            pooling=False if args.no_pool else None), samples)
    report = audit.AuditReport()
    layer = args.layer_prefix if args.layer_prefix is not None else model.config.names[-1]
    for (sample_id, _), (max_abs, mean_abs) in zip(samples, errors):
        report.add_equivariance(sample_id, layer, theta, max_abs, mean_abs)
    report.to_json(args.out)

def cmd_align_stats(args):
    _check_out(args.out, args.force)
    model = checkpoint.load(args.model)
    _, samples = _samples(args)
    stats = _map_samples(args, model,
        lambda m, sample: audit.aligned_prediction_stats(m, sample[1], args.steps), samples)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for (sample_id, _), (mean_map, std_map) in zip(samples, stats):
        serialize.save(os.path.join(args.out, '%s.mean.se2t' % sample_id), mean_map)
        serialize.save(os.path.join(args.out, '%s.std.se2t' % sample_id), std_map)
        rows.append({'sample_id': sample_id, 'mean_std': float(np.mean(std_map)),
            'max_std': float(np.max(std_map))})
    formats.write_csv(os.path.join(args.out, 'summary.csv'), ALIGN_COLUMNS, rows)

def cmd_compare(args):
    _check_out(args.out, args.force)
    splits = load_splits(args.data)
    seeds = list(range(args.seed, args.seed + args.seeds))
    summary = experiment.compare(args.task, splits, seeds, N=args.n, baseline_N=args.baseline_n,
        steps=args.steps, n_samples=args.n_samples, out=args.out, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, patience=args.patience, workers=args.workers,
        fraction=args.fraction)
    logger.info('Accuracy %.4g against %.4g, win rate %.4g: %s', summary['gcnn_accuracy'],
        summary['baseline_accuracy'], summary['win_rate'],
        'passed' if summary['passed'] else 'failed')

def run(argv=None):
    """Runs one command and returns its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT,
        stream=sys.stderr)
    logging.getLogger('se2net').setLevel(getattr(logging, args.log_level))
    try:
        with tensor.precision('float64' if args.f64 else tensor.get_dtype()):
            args.handler(args)
    except (ConfigurationError, DataError) as exc:
        sys.stderr.write('se2net %s: %s\n' % (args.command, exc))
        return EXIT_INVALID
    except Exception as exc:
        logger.debug('Command failed', exc_info=True)
        sys.stderr.write('se2net %s failed: %s: %s\n' % (args.command, type(exc).__name__, exc))
        return EXIT_FAILURE
    return EXIT_OK

def main():
    sys.exit(run())

if __name__ == '__main__':
    main()
