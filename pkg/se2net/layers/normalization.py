"""
Batch normalization for SE(2)-images.

Statistics are reduced over every axis except the channel axis: batch,
orientation, height and width. Keeping the orientation axis inside the
reduction makes the normalization itself commute with rotations of the input.
The same code handles 2D feature maps, where there simply is no orientation
axis to include.
"""

import logging

import numpy as np

from se2net import tensor
from se2net.errors import ConfigurationError
from se2net.layers import Layer
from se2net.tensor import GradPair


logger = logging.getLogger(__name__)

class BatchNormState(object):
    """
    Per-channel parameters and running statistics.

    ``gamma`` and ``beta`` are trainable (two parameters per channel) and
    exempt from weight decay. ``running_mean`` and ``running_var`` are
    updated with ``momentum`` in training mode and used in inference mode.
    While ``frozen`` is set, training mode still normalizes with the batch
    statistics but leaves the running ones untouched.
    """
    def __init__(self, channels, momentum=0.1, eps=1e-5, name=''):
        prefix = '%s.' % name if name else ''
        self.gamma = GradPair(np.ones(channels), name=prefix + 'gamma', decay=False)
        self.beta = GradPair(np.zeros(channels), name=prefix + 'beta', decay=False)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    @property
    def channels(self):
        return self.gamma.value.shape[0]

def _reduce_axes(x):
    return tuple(range(x.ndim - 1))

def se2_batchnorm(F, state, training):
    """
    Normalizes ``F`` per channel and applies the affine ``gamma``, ``beta``.

    Returns ``(output, cache)``; the cache feeds
    :func:`se2_batchnorm_backward`.
    """
    if F.shape[-1] != state.channels:
        raise ConfigurationError('Channel axis: batch norm expects %d channels, got %d.' % (
            state.channels, F.shape[-1]))
    axes = _reduce_axes(F)
    if training:
        if F.shape[0] < 2:
            raise ConfigurationError('Batch norm needs a batch of at least 2 in training mode.')
        count = F.size // F.shape[-1]
        mean = F.mean(axis=axes)
        var = F.var(axis=axes)
        if not state.frozen:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * count / max(count - 1, 1)
    else:
        mean = state.running_mean.astype(F.dtype)
        var = state.running_var.astype(F.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    normalized = (F - mean) * inv_std
    out = state.gamma.value.astype(F.dtype) * normalized + state.beta.value.astype(F.dtype)
    cache = (normalized, inv_std, training)
    return tensor.check_finite(out, 'batch norm'), cache

def se2_batchnorm_backward(state, cache, grad_out):
    """Returns ``(grad_F, grad_gamma, grad_beta)``."""
    normalized, inv_std, training = cache
    axes = _reduce_axes(grad_out)
    gamma = state.gamma.value.astype(grad_out.dtype)
    grad_gamma = (grad_out * normalized).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    if not training:
        return grad_out * gamma * inv_std, grad_gamma, grad_beta
    count = grad_out.size // grad_out.shape[-1]
    grad_F = (gamma * inv_std / count) * (
        count * grad_out - grad_beta - normalized * grad_gamma)
    return tensor.check_finite(grad_F, 'batch norm backward'), grad_gamma, grad_beta

class SE2BatchNorm(Layer):
    def __init__(self, channels, name=''):
        super(SE2BatchNorm, self).__init__(name)
        self.state = BatchNormState(channels, name=name)

    def parameters(self):
        return [self.state.gamma, self.state.beta]

    def forward(self, x, training=False):
        out, self._cache = se2_batchnorm(x, self.state, training)
        return out

    def backward(self, grad):
        grad_F, grad_gamma, grad_beta = se2_batchnorm_backward(self.state, self._cache, grad)
        self.state.gamma.accumulate(grad_gamma.astype(self.state.gamma.grad.dtype))
        self.state.beta.accumulate(grad_beta.astype(self.state.beta.grad.dtype))
        return grad_F
