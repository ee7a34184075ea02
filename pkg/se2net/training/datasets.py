"""
Datasets and the synthetic oriented-pattern tasks.

A dataset directory holds one sub-directory per split (``train``, ``val``,
``test``). Each split has a ``manifest.csv`` and the SE2T patch files it
names. Classification manifests have the columns ``relpath,label,group``;
segmentation manifests have ``relpath,maskpath,group``, where masks are SE2T
arrays of class ids (0 background, 1 object, 2 boundary) stored at the input
extent.

Synthetic data
--------------

:func:`synth_dataset` renders desk-scale stand-ins for the histology tasks.

* ``kind='cls'``: class 1 is an asymmetric "comet", a bright disk with a
  one-sided tail at a uniformly random angle; class 0 is a centred symmetric
  disk with the same total intensity.
* ``kind='seg'``: one to three elongated blobs at random positions and
  angles, with masks marking each blob's interior and its one-pixel outline.

Images have three tinted channels on a dim background, additive Gaussian
noise of standard deviation 0.05 and values clipped to ``[0, 1]``. Before
noise no pixel saturates, so a comet and its disk keep equal channel totals. Every
sample draws from its own generator keyed on ``(seed, split, index)``, so the
same seed always renders the same bytes.
"""

import logging
import math
import os

import numpy as np
from scipy import ndimage

from se2net import formats
from se2net.errors import ConfigurationError, DataError
from se2net.utils import serialize


logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
SPLIT_CODES = {'train': 0, 'val': 1, 'test': 2}
KINDS = ('cls', 'seg')
NOISE = 0.05
BACKGROUND = 0.1
TINT = np.array([0.85, 0.45, 0.75])
SEG_CLASSES = 3
SUBSET_STREAM = 3

class Dataset(object):
    """
    An in-memory split.

    * ``images``: ``[M, H, W, C]`` float32 patches
    * ``targets``: ``[M]`` class labels, or ``[M, H, W]`` masks for
      segmentation
    * ``groups``: ``[M]`` group ids used to balance batches
    * ``kind``: ``'cls'`` or ``'seg'``
    """
    def __init__(self, images, targets, groups=None, kind='cls', split='train', ids=None):
        if kind not in KINDS:
            raise ConfigurationError('Dataset kind must be one of %s, got %r.' % (KINDS, kind))
        images = np.asarray(images, dtype=np.float32)
        targets = np.asarray(targets)
        if images.ndim != 4:
            raise DataError('Images must be [M, H, W, C], got shape %s.' % (images.shape,))
        if targets.shape[0] != images.shape[0]:
            raise DataError('Got %d targets for %d images.' % (targets.shape[0], images.shape[0]))
        if kind == 'cls' and targets.ndim != 1:
            raise DataError('Classification targets must be [M], got %s.' % (targets.shape,))
        if kind == 'seg' and targets.shape != images.shape[:3]:
            raise DataError('Masks must be [M, H, W] matching the images, got %s.' % (
                targets.shape,))
        classes = 2 if kind == 'cls' else SEG_CLASSES
        if targets.size and (targets.min() < 0 or targets.max() >= classes
                or not np.all(np.mod(targets, 1) == 0)):
            raise DataError('%s targets must be class ids in [0, %d).' % (split, classes))
        self.images = images
        self.targets = targets.astype(np.int64)
        self.groups = np.zeros(len(images), dtype=np.int64) if groups is None else np.asarray(
            groups, dtype=np.int64)
        self.kind = kind
        self.split = split
        self.ids = list(ids) if ids is not None else ['%s_%05d' % (split, i)
            for i in range(len(images))]

    def __repr__(self):
        return '<Dataset %s %s: %d samples>' % (self.kind, self.split, len(self))

    def __len__(self):
        return self.images.shape[0]

    @property
    def classes(self):
        return 2 if self.kind == 'cls' else SEG_CLASSES

    def class_counts(self):
        return np.bincount(self.targets.ravel(), minlength=self.classes)

    def subset(self, fraction, seed=0):
        """
        Keeps ``fraction`` of the samples of every class (classification) or
        every group (segmentation), at least one each, in their original order.
        """
        if not 0 < fraction <= 1:
            raise ConfigurationError('--fraction must be in (0, 1], got %r.' % (fraction,))
        if fraction == 1:
            return self
        rng = np.random.default_rng([seed, SUBSET_STREAM])
        strata = self.targets if self.kind == 'cls' else self.groups
        keep = []
        for stratum in np.unique(strata):
            members = rng.permutation(np.flatnonzero(strata == stratum))
            keep.extend(members[:max(1, int(round(fraction * len(members))))])
        keep = np.sort(np.array(keep, dtype=np.int64))
        logger.info('Keeping %d of %d %s samples', len(keep), len(self), self.split)
        return Dataset(self.images[keep], self.targets[keep], self.groups[keep], kind=self.kind,
            split=self.split, ids=[self.ids[i] for i in keep])

    def save(self, root):
        """Writes the split under ``root/<split>/``."""
        directory = os.path.join(root, self.split)
        os.makedirs(directory, exist_ok=True)
        target_column = 'label' if self.kind == 'cls' else 'maskpath'
        rows = []
        for index, sample_id in enumerate(self.ids):
            relpath = '%s.se2t' % sample_id
            serialize.save(os.path.join(directory, relpath), self.images[index])
            row = {'relpath': relpath, 'group': int(self.groups[index])}
            if self.kind == 'cls':
                row['label'] = int(self.targets[index])
            else:
                row['maskpath'] = '%s.mask.se2t' % sample_id
                serialize.save(os.path.join(directory, row['maskpath']), self.targets[index])
            rows.append(row)
        columns = [
            ('relpath', formats.String()),
            (target_column, formats.Integer() if self.kind == 'cls' else formats.String()),
            ('group', formats.Integer()),
        ]
        formats.write_csv(os.path.join(directory, 'manifest.csv'), columns, rows)
        logger.info('Wrote %d %s samples to %s', len(rows), self.split, directory)

    @classmethod
    def load(cls, root, split):
        """Reads ``root/<split>/manifest.csv`` and every file it names."""
        if split not in SPLITS:
            raise ConfigurationError('Split must be one of %s, got %r.' % (SPLITS, split))
        directory = os.path.join(root, split)
        manifest = os.path.join(directory, 'manifest.csv')
        if not os.path.isfile(manifest):
            raise DataError('Manifest not found: %s' % manifest)
        rows = formats.read_csv(manifest)
        if not rows:
            raise DataError('Manifest %s lists no samples.' % manifest)
        kind = 'cls' if 'label' in rows[0] else 'seg'
        if kind == 'seg' and 'maskpath' not in rows[0]:
            raise DataError('Manifest %s has neither a label nor a maskpath column.' % manifest)

        images, targets, groups, ids = [], [], [], []
        for line, row in enumerate(rows, 2):
            images.append(_load_file(directory, row.get('relpath'), manifest, line))
            if kind == 'cls':
                try:
                    targets.append(int(row['label']))
                except (TypeError, ValueError):
                    raise DataError('%s line %d: bad label %r.' % (manifest, line, row['label']))
            else:
                targets.append(np.rint(_load_file(directory, row.get('maskpath'), manifest, line)))
            try:
                groups.append(int(row.get('group') or 0))
            except ValueError:
                raise DataError('%s line %d: bad group %r.' % (manifest, line, row['group']))
            ids.append(os.path.splitext(row['relpath'])[0])
        shapes = set(image.shape for image in images)
        if len(shapes) != 1:
            raise DataError('Patches in %s have differing shapes: %s.' % (manifest, sorted(shapes)))
        return cls(np.stack(images), np.stack(targets), groups, kind=kind, split=split, ids=ids)

def _load_file(directory, relpath, manifest, line):
    if not relpath:
        raise DataError('%s line %d: empty path.' % (manifest, line))
    path = os.path.join(directory, relpath)
    if not os.path.isfile(path):
        raise DataError('%s line %d: file not found: %s' % (manifest, line, path))
    return serialize.load(path)

def load_splits(root, splits=SPLITS):
    return dict((split, Dataset.load(root, split)) for split in splits)

# Rendering

def _grid(size):
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    return cols - c, c - rows

def _soft_disk(x, y, radius):
    # Squared distance keeps the disk exactly symmetric under quarter turns
    r2 = x * x + y * y
    return 1.0 / (1.0 + np.exp((r2 - radius * radius) / (radius * 1.0)))

def render_comet(size, angle, radius=None):
    """A disk with a tail pointing towards ``angle`` (noise-free intensity)."""
    radius = radius or 0.12 * size
    x, y = _grid(size)
    along = x * math.cos(angle) + y * math.sin(angle)
    across = -x * math.sin(angle) + y * math.cos(angle)
    width, length = 0.4 * radius, 2.2 * radius
    tail = np.exp(-across ** 2 / (2 * width ** 2)) * np.exp(-np.maximum(along, 0) / length)
    tail = np.where(along > 0, 0.8 * tail, 0.0)
    return np.maximum(_soft_disk(x, y, radius), tail)

def render_disk(size, total, radius=None):
    """A centred disk scaled to the summed intensity ``total``."""
    radius = radius or 0.12 * size
    x, y = _grid(size)
    disk = _soft_disk(x, y, radius)
    return disk * (total / disk.sum())

def _colorize(intensity, rng=None):
    image = BACKGROUND + intensity[..., np.newaxis] * TINT
    if rng is not None:
        image = image + rng.normal(0.0, NOISE, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)

def render_cls_intensity(size, label, angle):
    """
    The noise-free intensity of one classification sample. The comet and the
    disk share their total, scaled down so that neither saturates once tinted.
    """
    comet = render_comet(size, angle)
    disk = render_disk(size, comet.sum())
    peak = TINT.max() * max(comet.max(), disk.max())
    scale = min(1.0, (1.0 - BACKGROUND) / peak)
    return scale * (comet if label == 1 else disk)

def render_cls_sample(size, label, rng, noise=True):
    """Returns the ``[size, size, 3]`` image of one classification sample."""
    angle = rng.uniform(0, 2 * math.pi)
    return _colorize(render_cls_intensity(size, label, angle), rng if noise else None)

def render_seg_sample(size, rng, noise=True):
    """Returns ``(image, mask, blob_count)`` of one segmentation sample."""
    x, y = _grid(size)
    objects = np.zeros((size, size), dtype=bool)
    count = int(rng.integers(1, 4))
    for _ in range(count):
        cx, cy = rng.uniform(-0.3 * size, 0.3 * size, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        a = rng.uniform(0.12, 0.22) * size
        b = rng.uniform(0.05, 0.09) * size
        u = (x - cx) * math.cos(angle) + (y - cy) * math.sin(angle)
        v = -(x - cx) * math.sin(angle) + (y - cy) * math.cos(angle)
        objects |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    interior = ndimage.binary_erosion(objects)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[objects] = 2
    mask[interior] = 1
    intensity = 0.7 * interior + 0.35 * (mask == 2)
    return _colorize(intensity, rng if noise else None), mask, count

def synth_dataset(seed, n_per_class, size, kind='cls', split='train', noise=True):
    """
    Renders ``n_per_class`` samples of each class (classification) or
    ``2 * n_per_class`` samples (segmentation) for ``split``.
    """
    if kind not in KINDS:
        raise ConfigurationError('Dataset kind must be one of %s, got %r.' % (KINDS, kind))
    if split not in SPLIT_CODES:
        raise ConfigurationError('Split must be one of %s, got %r.' % (SPLITS, split))
    if n_per_class < 1:
        raise ConfigurationError('n_per_class must be at least 1, got %r.' % (n_per_class,))
    if size < 8:
        raise ConfigurationError('Synthetic patches must be at least 8 pixels, got %r.' % (size,))

    images, targets, groups = [], [], []
    for index in range(2 * n_per_class):
        rng = np.random.default_rng([seed, SPLIT_CODES[split], index])
        if kind == 'cls':
            label = index % 2
            images.append(render_cls_sample(size, label, rng, noise))
            targets.append(label)
            groups.append(label)
        else:
            image, mask, count = render_seg_sample(size, rng, noise)
            images.append(image)
            targets.append(mask)
            groups.append(count)
    logger.debug('Rendered %d %s samples for %s', len(images), kind, split)
    return Dataset(np.stack(images), np.stack(targets), groups, kind=kind, split=split)

def write_synth(root, seed, size, kind='cls', counts=None):
    """
    Writes all three splits under ``root``. ``counts`` maps split names to
    samples per class.
    """
    counts = counts or {'train': 2000, 'val': 250, 'test': 500}
    datasets = {}
    for split in SPLITS:
        if not counts.get(split):
            continue
        datasets[split] = synth_dataset(seed, counts[split], size, kind=kind, split=split)
        datasets[split].save(root)
    return datasets

def center_crop(masks, height, width):
    """Centre-crops ``[..., H, W]`` masks to ``height x width``."""
    H, W = masks.shape[-2:]
    if (H - height) % 2 or (W - width) % 2 or H < height or W < width:
        raise ConfigurationError('Cannot centre-crop %dx%d masks to %dx%d.' % (H, W, height, width))
    top, left = (H - height) // 2, (W - width) // 2
    return masks[..., top:top + height, left:left + width]
