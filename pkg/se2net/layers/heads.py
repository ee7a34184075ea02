"""
Fully connected heads, implemented as 1x1 convolutions so that a model
trained on patches can be applied densely to larger images.
"""

import math

import numpy as np

from se2net import tensor
from se2net.errors import ConfigurationError
from se2net.layers import Layer
from se2net.tensor import GradPair


ACTIVATIONS = ('sigmoid', 'softmax', 'linear')

def _check_activation(activation):
    if activation not in ACTIVATIONS:
        raise ConfigurationError('Head activation must be one of %s, got %r.' % (
            ACTIVATIONS, activation))

def fc_head(f, W, b, activation):
    """
    ``activation(f . W + b)`` at every pixel of ``f`` (``[B, H, W, C]``), with
    ``W`` of shape ``[C, K]`` and ``b`` of shape ``[K]``. Softmax normalizes
    over the class axis.
    """
    _check_activation(activation)
    if f.shape[-1] != W.shape[0]:
        raise ConfigurationError('Channel axis: head expects %d channels, got %d.' % (
            W.shape[0], f.shape[-1]))
    logits = np.tensordot(f, W, axes=([f.ndim - 1], [0])) + b
    if activation == 'sigmoid':
        return tensor.sigmoid(logits)
    if activation == 'softmax':
        return tensor.softmax(logits, axis=-1)
    return logits

def fc_head_backward(f, W, outputs, activation, grad_out):
    """Returns ``(grad_f, grad_W, grad_b)``; takes the head *output*."""
    _check_activation(activation)
    if activation == 'sigmoid':
        grad_logits = tensor.sigmoid_backward(outputs, grad_out)
    elif activation == 'softmax':
        grad_logits = tensor.softmax_backward(outputs, grad_out, axis=-1)
    else:
        grad_logits = grad_out
    lead = tuple(range(f.ndim - 1))
    grad_W = np.tensordot(f, grad_logits, axes=(lead, lead))
    grad_b = grad_logits.sum(axis=lead)
    grad_f = np.tensordot(grad_logits, W, axes=([grad_logits.ndim - 1], [1]))
    return grad_f, grad_W, grad_b

class Head(Layer):
    """
    A 1x1 convolutional head with ``classes`` outputs.

    With ``affine=True`` the convolution has no bias and is followed by a
    per-class scale and shift, ``gamma * (f . W) + beta``, which costs one
    extra parameter per class.
    """
    def __init__(self, channels, classes, activation, affine=False, name=''):
        _check_activation(activation)
        super(Head, self).__init__(name)
        prefix = '%s.' % name if name else ''
        self.activation = activation
        self.affine = affine
        self.weight = GradPair(np.zeros((channels, classes)), name=prefix + 'weight')
        if affine:
            self.gamma = GradPair(np.ones(classes), name=prefix + 'gamma', decay=False)
            self.beta = GradPair(np.zeros(classes), name=prefix + 'beta', decay=False)
        else:
            self.bias = GradPair(np.zeros(classes), name=prefix + 'bias', decay=False)

    def parameters(self):
        if self.affine:
            return [self.weight, self.gamma, self.beta]
        return [self.weight, self.bias]

    def initialize(self, rng):
        bound = math.sqrt(6.0 / self.weight.value.shape[0])
        self.weight.value[...] = rng.uniform(-bound, bound, size=self.weight.value.shape)

    def output_shape(self, shape):
        if shape[-1] != self.weight.value.shape[0]:
            raise ConfigurationError('Channel axis: %s expects %d channels, got %d.' % (
                self.name, self.weight.value.shape[0], shape[-1]))
        return shape[:-1] + (self.weight.value.shape[1],)

    def _effective(self):
        if self.affine:
            return self.weight.value * self.gamma.value, self.beta.value
        return self.weight.value, self.bias.value

    def forward(self, x, training=False):
        W, b = self._effective()
        self._input = x
        self._output = fc_head(x, W.astype(x.dtype), b.astype(x.dtype), self.activation)
        return self._output

    def backward(self, grad):
        W, _ = self._effective()
        grad_f, grad_W, grad_b = fc_head_backward(
            self._input, W.astype(grad.dtype), self._output, self.activation, grad)
        dtype = self.weight.grad.dtype
        if self.affine:
            self.weight.accumulate((grad_W * self.gamma.value).astype(dtype))
            self.gamma.accumulate((grad_W * self.weight.value).sum(axis=0).astype(dtype))
            self.beta.accumulate(grad_b.astype(dtype))
        else:
            self.weight.accumulate(grad_W.astype(dtype))
            self.bias.accumulate(grad_b.astype(dtype))
        return grad_f
