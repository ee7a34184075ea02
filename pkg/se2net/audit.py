"""
Rotational robustness audits.

* :func:`polar_response`: a model's prediction as a function of the input
  rotation angle. A perfectly invariant model traces a circle.
* :func:`equivariance_error`: how far a model prefix is from commuting with
  rotations, ``Phi(rotate(f))`` against ``shift_twist(Phi(f))``.
* :func:`aligned_prediction_stats`: dense predictions of rotated copies of an
  image, rotated back into alignment, summarized as per-pixel mean and
  standard deviation maps.

Rotations by multiples of ``pi/2`` are exact permutations (``numpy.rot90``);
any other angle resamples bilinearly about the centre with reflected borders.
"""

import logging
import math

import numpy as np
from scipy import ndimage

from se2net import formats
from se2net.blocks import ConvStage
from se2net.errors import ConfigurationError


logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9
BOUNDARY_CLASS = 2
# Off-grid equivariance error of a randomly initialized prefix, as a fraction
# of its mean absolute activation
OFF_GRID_RELATIVE_BOUND = 1.0

POLAR_COLUMNS = [
    ('sample_id', formats.String()),
    ('k', formats.Integer()),
    ('angle_rad', formats.Float()),
    ('prediction', formats.Float()),
]

EQUIVARIANCE_COLUMNS = [
    ('sample_id', formats.String()),
    ('layer', formats.String()),
    ('angle_rad', formats.Float()),
    ('max_abs', formats.Float()),
    ('mean_abs', formats.Float()),
]

def quarter_turns(theta):
    """``k`` in ``0..3`` when ``theta`` is a multiple of ``pi/2``, else ``None``."""
    turns = theta / (math.pi / 2)
    nearest = round(turns)
    if abs(turns - nearest) < GRID_TOLERANCE:
        return int(nearest) % 4
    return None

def _source_coordinates(size, theta):
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = cols - c, c - rows
    cos, sin = math.cos(theta), math.sin(theta)
    source_x = cos * x + sin * y
    source_y = -sin * x + cos * y
    return np.array([c - source_y, c + source_x])

def rotate_input(image, theta, axes=(0, 1)):
    """
    Rotates ``image`` counter-clockwise by ``theta`` about the centre of the
    two spatial ``axes``, which must have equal extents.
    """
    image = np.asarray(image)
    first, second = axes
    if image.shape[first] != image.shape[second]:
        raise ConfigurationError('Rotation needs a square image, got %dx%d.' % (
            image.shape[first], image.shape[second]))
    turns = quarter_turns(theta)
    if turns is not None:
        return np.ascontiguousarray(np.rot90(image, turns, axes=axes))

    moved = np.moveaxis(image, (first, second), (0, 1))
    size = moved.shape[0]
    flat = moved.reshape(size, size, -1)
    coords = _source_coordinates(size, theta)
    out = np.stack([ndimage.map_coordinates(flat[..., index], coords, order=1, mode='reflect')
        for index in range(flat.shape[-1])], axis=-1)
    out = np.moveaxis(out.reshape(moved.shape), (0, 1), (first, second))
    return np.ascontiguousarray(out, dtype=image.dtype)

def prediction_statistic(pred):
    """
    The scalar tracked per prediction: the spatial mean of a single-output
    head, or the mean boundary-class probability of a multi-class map.
    """
    if pred.shape[-1] == 1:
        return pred.reshape(pred.shape[0], -1).mean(axis=1)
    return pred[..., BOUNDARY_CLASS].reshape(pred.shape[0], -1).mean(axis=1)

def polar_response(model, image, steps=16):
    """Predictions for ``rotate_input(image, 2*pi*k/steps)``, ``k = 0..steps-1``."""
    if steps < 1:
        raise ConfigurationError('--steps must be at least 1, got %r.' % (steps,))
    batch = np.stack([rotate_input(image, 2 * math.pi * k / steps) for k in range(steps)])
    pred = model.forward(batch, training=False)
    return prediction_statistic(pred).astype(np.float64)

def response_variance(response):
    """Plain variance of a polar response vector."""
    return float(np.var(np.asarray(response, dtype=np.float64)))

def orientation_shift(theta, N):
    """The orientation index shift ``j`` with ``theta = 2*pi*j/N``."""
    steps = theta * N / (2 * math.pi)
    nearest = round(steps)
    if abs(steps - nearest) > GRID_TOLERANCE * max(1, N):
        raise ConfigurationError(
            'Angle %.6g is not on the orientation grid of N=%d; use 2*pi*j/N.' % (theta, N))
    return int(nearest) % N

def shift_twist(output, theta, N):
    """
    Applies the rotation by ``theta`` to a model output: a spatial rotation,
    plus a cyclic shift of the orientation axis for SE(2)-images.
    """
    if output.ndim == 5:
        rotated = rotate_input(output, theta, axes=(2, 3))
        return np.roll(rotated, orientation_shift(theta, N), axis=1)
    return rotate_input(output, theta, axes=(1, 2))

def _prefix_pools(model, upto):
    stop = model.resolve_upto(upto)
    return any(isinstance(stage, ConvStage) and stage.pool is not None
        for _, stage in model.stages[:stop])

def _disk(size):
    c = (size - 1) / 2.0
    radius = c - 1
    rows, cols = np.mgrid[0:size, 0:size]
    return (rows - c) ** 2 + (cols - c) ** 2 <= radius * radius

def equivariance_error(model, image, theta, upto=None, pooling=None):
    """
    Returns ``(max_abs, mean_abs)`` between ``Phi(rotate(image))`` and the
    shift-twisted ``Phi(image)``, where ``Phi`` is the first ``upto`` blocks.

    ``theta`` must be ``2*pi*j/N``. Off-grid angles run the prefix with its
    pooling steps skipped (``pooling=None`` picks that automatically) and are
    compared on the disk of radius ``(H_out - 1)/2 - 1`` about the output
    centre. Pass ``pooling=False`` to audit quarter turns pooling-free too.
    """
    N = model.config.N
    orientation_shift(theta, N)
    turns = quarter_turns(theta)
    if pooling is None:
        pooling = turns is not None
    elif pooling and turns is None and _prefix_pools(model, upto):
        raise ConfigurationError('The prefix up to %r pools; off-grid angles need '
            'pooling=False.' % (upto,))
    image = np.asarray(image)
    base = model.forward(image[np.newaxis], training=False, upto=upto, pooling=pooling)
    if turns == 0:
        return 0.0, 0.0
    rotated = model.forward(rotate_input(image, theta)[np.newaxis], training=False, upto=upto,
        pooling=pooling)
    expected = shift_twist(base, theta, N)
    diff = np.abs(rotated.astype(np.float64) - expected)
    if turns is None:
        mask = _disk(diff.shape[-3])
        diff = np.moveaxis(diff, (-3, -2), (0, 1))[mask]
    return float(diff.max()), float(diff.mean())

def aligned_prediction_stats(model, image, steps=16):
    """
    Per-pixel ``(mean_map, std_map)`` of the dense predictions for ``steps``
    rotations of ``image``, each rotated back into the frame of the input.
    The standard deviation is the population one.
    """
    if steps < 1:
        raise ConfigurationError('--steps must be at least 1, got %r.' % (steps,))
    angles = [2 * math.pi * k / steps for k in range(steps)]
    batch = np.stack([rotate_input(image, theta) for theta in angles])
    pred = model.forward(batch, training=False)
    aligned = np.stack([rotate_input(p, -theta) for p, theta in zip(pred, angles)])
    aligned = aligned.astype(np.float64)
    return aligned.mean(axis=0), aligned.std(axis=0)

class AuditReport(object):
    """
    Collects audit results.

    * ``polar``: rows of ``(sample_id, k, angle_rad, prediction)``
    * ``equivariance``: rows of ``(sample_id, layer, angle_rad, max_abs,
      mean_abs)``
    * ``variances``: the polar response variance per sample
    """
    def __init__(self):
        self.polar = []
        self.equivariance = []
        self.variances = {}

    def add_polar(self, sample_id, response):
        steps = len(response)
        for k, value in enumerate(response):
            self.polar.append({
                'sample_id': sample_id,
                'k': k,
                'angle_rad': 2 * math.pi * k / steps,
                'prediction': float(value),
            })
        self.variances[sample_id] = response_variance(response)

    def add_equivariance(self, sample_id, layer, theta, max_abs, mean_abs):
        self.equivariance.append({
            'sample_id': sample_id,
            'layer': str(layer),
            'angle_rad': theta,
            'max_abs': max_abs,
            'mean_abs': mean_abs,
        })

    def summary(self):
        summary = {'samples': len(self.variances)}
        if self.variances:
            summary['mean_variance'] = float(np.mean(list(self.variances.values())))
        if self.equivariance:
            summary['max_abs'] = max(row['max_abs'] for row in self.equivariance)
            summary['mean_abs'] = float(np.mean([row['mean_abs'] for row in self.equivariance]))
        return summary

    def to_csv(self, path):
        """Writes the polar rows."""
        formats.write_csv(path, POLAR_COLUMNS, self.polar)

    def to_json(self, path):
        """Writes the equivariance rows and the summary."""
        float_format = formats.Float()
        summary = dict((key, float_format.format_json(value) if isinstance(value, float)
            else value) for key, value in self.summary().items())
        formats.write_json(path, {
            'equivariance': formats.format_rows(EQUIVARIANCE_COLUMNS, self.equivariance, 'json'),
            'summary': summary,
        })
