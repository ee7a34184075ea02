"""
Spatial layers that treat every orientation slice the same way: max pooling,
ReLU, and the up-sampling and skip concatenation of the U-net decoder.

All functions here act on the two axes preceding the channel axis, so they
accept 2D feature maps and SE(2)-images alike.
"""

import logging

import numpy as np

from se2net import tensor
from se2net.errors import ConfigurationError
from se2net.layers import Layer


logger = logging.getLogger(__name__)

def se2_maxpool_spatial(F, k):
    """``maxpool2d`` applied independently to every orientation slice."""
    return tensor.maxpool2d(F, k)

def se2_maxpool_spatial_backward(F, k, grad_out):
    return tensor.maxpool2d_backward(F, k, grad_out)

def _crop_offsets(skip_shape, target):
    offsets = []
    for axis, extent, wanted in zip(('Height', 'Width'), skip_shape[-3:-1], target):
        if extent < wanted:
            raise ConfigurationError(
                '%s axis: skip extent %d is smaller than the up-sampled extent %d.' % (
                    axis, extent, wanted))
        if (extent - wanted) % 2:
            raise ConfigurationError(
                '%s axis: cannot centre-crop extent %d to %d, parities differ.' % (
                    axis, extent, wanted))
        offsets.append((extent - wanted) // 2)
    return offsets

def upsample_concat(F, skip):
    """
    Up-samples ``F`` 2x (nearest neighbour) and concatenates a centre crop of
    ``skip`` after its channels. Both inputs must share their leading axes.
    """
    if F.shape[:-3] != skip.shape[:-3]:
        raise ConfigurationError('Leading axes differ: %s and %s.' % (
            F.shape[:-3], skip.shape[:-3]))
    up = F.repeat(2, axis=-3).repeat(2, axis=-2)
    height, width = up.shape[-3:-1]
    top, left = _crop_offsets(skip.shape, (height, width))
    cropped = skip[..., top:top + height, left:left + width, :]
    return np.concatenate([up, cropped], axis=-1)

def upsample_concat_backward(F_shape, skip_shape, grad_out):
    """Returns ``(grad_F, grad_skip)``."""
    channels = F_shape[-1]
    grad_up = grad_out[..., :channels]
    lead = F_shape[:-3]
    height, width = F_shape[-3:-1]
    grad_F = grad_up.reshape(lead + (height, 2, width, 2, channels)).sum(axis=(-4, -2))

    top, left = _crop_offsets(skip_shape, (2 * height, 2 * width))
    grad_skip = np.zeros(skip_shape, dtype=grad_out.dtype)
    grad_skip[..., top:top + 2 * height, left:left + 2 * width, :] = grad_out[..., channels:]
    return grad_F, grad_skip

def upsample_concat_shape(shape, skip_shape):
    """Single-sample shape of :func:`upsample_concat`."""
    if shape[:-3] != skip_shape[:-3]:
        raise ConfigurationError('Leading axes differ: %s and %s.' % (shape[:-3], skip_shape[:-3]))
    height, width = 2 * shape[-3], 2 * shape[-2]
    _crop_offsets(skip_shape, (height, width))
    return shape[:-3] + (height, width, shape[-1] + skip_shape[-1])

class ReLU(Layer):
    def forward(self, x, training=False):
        self._input = x
        return tensor.relu(x)

    def backward(self, grad):
        return tensor.relu_backward(self._input, grad)

class SpatialMaxPool(Layer):
    """
    Non-overlapping ``k x k`` max pooling. Trailing rows and columns that do
    not fill a window are dropped; the trim of the last forward pass is kept
    in ``metadata['trim']``.
    """
    def __init__(self, k, name=''):
        super(SpatialMaxPool, self).__init__(name)
        self.k = k

    def output_shape(self, shape):
        tensor.pool_trim(shape, self.k)
        return shape[:-3] + (shape[-3] // self.k, shape[-2] // self.k, shape[-1])

    def forward(self, x, training=False):
        trim = tensor.pool_trim(x.shape, self.k)
        self.metadata['trim'] = trim
        if any(trim):
            logger.debug('%s drops %d trailing rows and %d columns', self.name, trim[0], trim[1])
        self._input = x
        return se2_maxpool_spatial(x, self.k)

    def backward(self, grad):
        return se2_maxpool_spatial_backward(self._input, self.k, grad)
