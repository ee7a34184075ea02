"""
The training loop.

Each epoch runs over balanced batches (class-balanced for classification,
round-robin over groups for segmentation), augments every sample with its own
generator keyed on ``(seed, epoch, sample index)``, and takes one SGD step per
batch. The learning rate of epoch ``e`` is ``lr * lr_decay_factor ** e``.

After every epoch the model is evaluated on the validation split. The weights
with the best validation loss are kept; training stops early once the
validation loss has not improved for ``patience`` epochs, and the best weights
are restored at the end. A non-finite loss or gradient restores the best
weights and raises :class:`DivergenceError`.

An epoch whose learning rate is zero learns nothing: the weights stay put and
the batch norm running statistics are held fixed, so the validation loss of
such epochs is constant.

With ``fraction`` below one, training uses a class-balanced (or
group-balanced) subset of the training split, keyed on ``seed``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
import logging
import math
import os

import numpy as np

from se2net import checkpoint, formats
from se2net.errors import ConfigurationError, DivergenceError, NumericalError
from se2net.training import losses
from se2net.training.augment import augment
from se2net.training.datasets import center_crop
from se2net.training.optimizer import SGD


logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    ('epoch', formats.Integer()),
    ('train_loss', formats.Float()),
    ('val_loss', formats.Float()),
    ('val_metric', formats.Float()),
    ('val_f1', formats.Float()),
    ('lr', formats.Float()),
]

@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    patience: int = 5
    seed: int = 0
    workers: int = 1
    eval_batch_size: int = 64
    fraction: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError('--lr must be non-negative, got %r.' % (self.lr,))
        if not 0 <= self.momentum < 1:
            raise ConfigurationError('momentum must be in [0, 1), got %r.' % (self.momentum,))
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError('lr_decay_factor must be in (0, 1], got %r.' % (
                self.lr_decay_factor,))
        if not self.weight_decay >= 0:
            raise ConfigurationError('weight_decay must be non-negative, got %r.' % (
                self.weight_decay,))
        if self.batch_size < 2:
            raise ConfigurationError('--batch-size must be at least 2, got %r.' % (
                self.batch_size,))
        if not 0 < self.fraction <= 1:
            raise ConfigurationError('--fraction must be in (0, 1], got %r.' % (self.fraction,))
        for name in ('epochs', 'patience', 'workers', 'eval_batch_size'):
            if getattr(self, name) < 1:
                raise ConfigurationError('%s must be at least 1, got %r.' % (
                    name, getattr(self, name)))

    @classmethod
    def for_task(cls, task, **overrides):
        """Task defaults: batches of 16 for the segmentation task, 64 otherwise."""
        values = {'batch_size': 16 if task == 'nuclei' else 64}
        values.update(dict((key, value) for key, value in overrides.items() if value is not None))
        return cls(**values)

    def epoch_lr(self, epoch):
        return self.lr * self.lr_decay_factor ** epoch

    def as_dict(self):
        return asdict(self)

# Batching

def _classification_batches(dataset, batch_size, rng):
    half = batch_size // 2
    streams = []
    for label in range(dataset.classes):
        indices = np.flatnonzero(dataset.targets == label)
        if len(indices) == 0:
            raise ConfigurationError('The %s split has no samples of class %d.' % (
                dataset.split, label))
        streams.append(rng.permutation(indices))
    count = max(1, len(dataset) // batch_size)
    batches = []
    for b in range(count):
        batch = []
        for stream, take in zip(streams, (half, batch_size - half)):
            batch.extend(stream[(b * take + k) % len(stream)] for k in range(take))
        batches.append(np.array(batch))
    return batches

def _group_batches(dataset, batch_size, rng):
    queues = [list(rng.permutation(np.flatnonzero(dataset.groups == group)))
        for group in np.unique(dataset.groups)]
    order = []
    while any(queues):
        for queue in queues:
            if queue:
                order.append(queue.pop(0))
    batches = [np.array(order[start:start + batch_size])
        for start in range(0, len(order), batch_size)]
    return [batch for batch in batches if len(batch) >= 2]

def epoch_batches(dataset, batch_size, seed, epoch):
    """The deterministic batch order of ``epoch``."""
    rng = np.random.default_rng([seed, epoch])
    if dataset.kind == 'cls':
        return _classification_batches(dataset, batch_size, rng)
    return _group_batches(dataset, batch_size, rng)

def _augmented(dataset, index, seed, epoch):
    rng = np.random.default_rng([seed, epoch, int(index)])
    if dataset.kind == 'cls':
        return augment(dataset.images[index], rng), dataset.targets[index]
    return augment(dataset.images[index], rng, mask=dataset.targets[index])

def load_batch(dataset, indices, seed, epoch, pool=None):
    mapper = pool.map if pool is not None else map
    samples = list(mapper(lambda index: _augmented(dataset, index, seed, epoch), indices))
    images = np.stack([image for image, _ in samples])
    targets = np.stack([target for _, target in samples])
    return images, targets

# Losses and metrics

# Class whose F1 score is reported: the positive class of binary heads and the
# object interior of segmentation maps
F1_CLASS = 1

def _crop_targets(pred, targets):
    return center_crop(targets, pred.shape[1], pred.shape[2])

def batch_loss(pred, targets, weights=None):
    """Returns ``(loss, grad)`` of a batch prediction."""
    if pred.shape[-1] == 1:
        return losses.bce(pred, targets), losses.bce_backward(pred, targets)
    masks = _crop_targets(pred, targets)
    return (losses.weighted_ce3(pred, masks, weights),
        losses.weighted_ce3_backward(pred, masks, weights))

def _decisions(pred, targets):
    if pred.shape[-1] == 1:
        scores = pred.reshape(pred.shape[0], -1).mean(axis=1)
        return (scores >= 0.5).astype(np.int64), np.asarray(targets)
    return pred.argmax(axis=-1), _crop_targets(pred, targets)

def batch_correct(pred, targets):
    """Returns ``(correct, total)``: samples for classification, pixels for maps."""
    predicted, truth = _decisions(pred, targets)
    return int((predicted == truth).sum()), truth.size

def batch_confusion(pred, targets):
    """Returns ``(tp, fp, fn)`` of ``F1_CLASS``."""
    predicted, truth = _decisions(pred, targets)
    hit, real = predicted == F1_CLASS, truth == F1_CLASS
    return int((hit & real).sum()), int((hit & ~real).sum()), int((~hit & real).sum())

def f1_score(tp, fp, fn):
    """``2 tp / (2 tp + fp + fn)``, or 0 when nothing is positive."""
    denominator = 2 * tp + fp + fn
    return 2.0 * tp / denominator if denominator else 0.0

def class_weights_for(model, dataset):
    """Inverse-frequency class weights of a segmentation split, ``None`` otherwise."""
    if dataset.kind != 'seg':
        return None
    classes = model.stages[-1][1].weight.value.shape[1]
    output = model.output_shape(dataset.images.shape[1:])
    masks = center_crop(dataset.targets, output[0], output[1])
    return losses.class_weights(masks, classes)

def predict(model, images, tta=False):
    """
    Inference-mode predictions. With ``tta`` the predictions of the four
    quarter turns of every image are rotated back and averaged.
    """
    if not tta:
        return model.forward(images, training=False)
    total = None
    for k in range(4):
        pred = model.forward(np.rot90(images, k, axes=(1, 2)), training=False)
        pred = np.rot90(pred, -k, axes=(1, 2)).astype(np.float64)
        total = pred if total is None else total + pred
    return total / 4

def score(model, dataset, batch_size=64, weights=None, tta=False):
    """
    Inference-mode scores over a whole split: a dict with ``loss``,
    ``accuracy`` and ``f1``. ``weights`` default to the class weights of
    ``dataset`` itself; pass the training split's to score held-out data.
    """
    if weights is None:
        weights = class_weights_for(model, dataset)
    total_loss = 0.0
    correct = total = 0
    confusion = np.zeros(3, dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        targets = dataset.targets[start:start + batch_size]
        pred = predict(model, images, tta)
        loss, _ = batch_loss(pred, targets, weights)
        total_loss += loss * len(images)
        hits, count = batch_correct(pred, targets)
        correct += hits
        total += count
        confusion += batch_confusion(pred, targets)
    return {
        'loss': total_loss / len(dataset),
        'accuracy': correct / float(total),
        'f1': f1_score(*confusion),
    }

def evaluate(model, dataset, batch_size=64, weights=None):
    """Inference-mode ``(loss, metric)`` over a whole split."""
    scores = score(model, dataset, batch_size, weights)
    return scores['loss'], scores['accuracy']

# Training

def train(model, train_set, val_set, config, out=None):
    """
    Trains ``model`` in place and returns the history, a list of dicts with
    the keys of ``HISTORY_COLUMNS``. With ``out`` set, ``history.csv`` and
    the best checkpoint ``model.zip`` are written to that directory.
    """
    if train_set.kind != val_set.kind:
        raise ConfigurationError('Training and validation splits differ in kind.')
    model.output_shape(train_set.images.shape[1:])
    train_set = train_set.subset(config.fraction, config.seed)
    weights = class_weights_for(model, train_set)
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay)
    history = []
    best_loss = math.inf
    best = checkpoint.snapshot(model)
    stale = 0

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(config.epochs):
            lr = config.epoch_lr(epoch)
            running = 0.0
            batches = epoch_batches(train_set, config.batch_size, config.seed, epoch)
            with model.frozen_statistics(lr == 0):
                for indices in batches:
                    images, targets = load_batch(train_set, indices, config.seed, epoch, pool)
                    pred = model.forward(images, training=True)
                    loss, grad = batch_loss(pred, targets, weights)
                    if not math.isfinite(loss):
                        checkpoint.restore_snapshot(model, best)
                        raise DivergenceError('Training loss became %r in epoch %d.' % (
                            loss, epoch), history)
                    optimizer.zero_grad()
                    model.backward(grad)
                    try:
                        optimizer.step(lr)
                    except NumericalError as exc:
                        checkpoint.restore_snapshot(model, best)
                        raise DivergenceError('%s (epoch %d)' % (exc, epoch), history)
                    model.refresh()
                    running += loss

            scores = score(model, val_set, config.eval_batch_size, weights)
            val_loss = scores['loss']
            row = {
                'epoch': epoch,
                'train_loss': running / len(batches),
                'val_loss': val_loss,
                'val_metric': scores['accuracy'],
                'val_f1': scores['f1'],
                'lr': lr,
            }
            history.append(row)
            logger.info('Epoch %d: train loss %.4g, val loss %.4g, val metric %.4g, val F1 %.4g, '
                'lr %.3g', epoch, row['train_loss'], val_loss, row['val_metric'], row['val_f1'], lr)
            if not math.isfinite(val_loss):
                checkpoint.restore_snapshot(model, best)
                raise DivergenceError('Validation loss became %r in epoch %d.' % (
                    val_loss, epoch), history)
            if val_loss < best_loss:
                best_loss = val_loss
                best = checkpoint.snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.warning('Early stop after epoch %d: no validation improvement in %d '
                        'epochs', epoch, config.patience)
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    checkpoint.restore_snapshot(model, best)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        formats.write_csv(os.path.join(out, 'history.csv'), HISTORY_COLUMNS, history)
        checkpoint.save(model, os.path.join(out, 'model.zip'))
    return history
