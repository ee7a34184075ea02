"""
The tensor core holds the dense primitives every layer is built from.

There is no general computation graph here. Tensors are plain
``numpy.ndarray`` objects laid out row-major with the channel axis innermost
(``[B, H, W, C]`` for 2D feature maps, ``[B, N, H, W, C]`` for SE(2)-images),
and every primitive comes as a pair of pure functions: a forward pass and an
explicit backward pass that receives the gradient of the output and returns
the gradients of the inputs.

Precision
---------

Training runs in 32-bit floats. Gradient checking switches the whole process
to 64-bit floats, either with :func:`set_precision` or temporarily with the
:func:`precision` context manager::

    with tensor.precision('float64'):
        error = tensor.grad_check(forward, backward, [x, k])

Debug mode
----------

When debug mode is on (``SE2NET_DEBUG=1`` in the environment, or
:func:`set_debug`), :func:`check_finite` raises :class:`NumericalError` on any
NaN or infinity. Layers call it after each forward and backward pass.
"""

from contextlib import contextmanager
import logging
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from se2net.errors import ConfigurationError, NumericalError


logger = logging.getLogger(__name__)

PRECISIONS = {
    'float32': np.float32,
    'float64': np.float64,
}

_dtype = np.float32
_debug = os.environ.get('SE2NET_DEBUG', '') not in ('', '0')

def get_dtype():
    """Returns the numpy dtype of the active precision."""
    return _dtype

def set_precision(name):
    """
    Sets the process-wide precision to ``'float32'`` or ``'float64'``.
    """
    global _dtype
    if name in PRECISIONS:
        _dtype = PRECISIONS[name]
    elif name in PRECISIONS.values():
        _dtype = name
    else:
        raise ConfigurationError('Unknown precision: %r' % (name,))

@contextmanager
def precision(name):
    """Temporarily switches the process-wide precision."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)

def set_debug(enabled):
    global _debug
    _debug = bool(enabled)

def check_finite(array, where):
    """
    In debug mode, raises :class:`NumericalError` if ``array`` contains a NaN
    or an infinity. ``where`` names the pass for the error message.
    """
    if _debug and not np.all(np.isfinite(array)):
        raise NumericalError('Non-finite values after %s.' % where)
    return array

def as_tensor(data, dtype=None):
    """
    Coerces ``data`` into a contiguous array of the active precision and
    validates that no extent is zero.
    """
    array = np.ascontiguousarray(data, dtype=dtype or _dtype)
    if any(extent < 1 for extent in array.shape):
        raise ConfigurationError(
            'Tensor extents must all be at least 1, got shape %s.' % (array.shape,))
    return array

class GradPair(object):
    """
    A trainable value together with its accumulated gradient.

    * ``value``: the parameter array, updated in place by the optimizer.
    * ``grad``: an array of the same shape, accumulated by backward passes
      and cleared with :meth:`zero_grad`.
    * ``name``: a dotted name used in checkpoints and parameter breakdowns.
    * ``decay``: whether decoupled weight decay applies. Batch-norm affine
      parameters and biases are exempt.
    """
    def __init__(self, value, name='', decay=True):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.decay = decay

    def __repr__(self):
        return '<GradPair %s %s>' % (self.name, self.value.shape)

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, grad):
        if grad.shape != self.value.shape:
            raise ConfigurationError('Gradient shape %s does not match %s %s.' % (
                grad.shape, self.name, self.value.shape))
        self.grad += grad

# Convolution

def _check_conv_shapes(inputs, kernels):
    if inputs.ndim != 4:
        raise ConfigurationError(
            'conv2d_valid input must be [B, H, W, Cin], got shape %s.' % (inputs.shape,))
    if kernels.ndim != 4:
        raise ConfigurationError(
            'conv2d_valid kernels must be [n, n, Cin, Cout], got shape %s.' % (kernels.shape,))
    n, width, cin, _ = kernels.shape
    if n != width:
        raise ConfigurationError(
            'Kernel width axis: expected %d to match the height, got %d.' % (n, width))
    if inputs.shape[3] != cin:
        raise ConfigurationError('Channel axis: input has %d channels, kernels expect %d.' % (
            inputs.shape[3], cin))
    if n > inputs.shape[1]:
        raise ConfigurationError('Height axis: kernel size %d exceeds input height %d.' % (
            n, inputs.shape[1]))
    if n > inputs.shape[2]:
        raise ConfigurationError('Width axis: kernel size %d exceeds input width %d.' % (
            n, inputs.shape[2]))
    return n

def conv2d_valid(inputs, kernels):
    """
    Valid (unpadded) 2D cross-correlation.

    ``inputs`` is ``[B, H, W, Cin]`` and ``kernels`` is ``[n, n, Cin, Cout]``;
    the result is ``[B, H - n + 1, W - n + 1, Cout]`` with::

        out[b, y, x, co] = sum(kernels[i, j, ci, co] * inputs[b, y + i, x + j, ci])

    The kernels are not flipped.
    """
    n = _check_conv_shapes(inputs, kernels)
    windows = sliding_window_view(inputs, (n, n), axis=(1, 2))
    out = np.tensordot(windows, kernels, axes=([4, 5, 3], [0, 1, 2]))
    return check_finite(out, 'conv2d_valid')

def conv2d_valid_backward(inputs, kernels, grad_out):
    """
    Returns ``(grad_inputs, grad_kernels)`` for :func:`conv2d_valid`.
    """
    n = _check_conv_shapes(inputs, kernels)
    windows = sliding_window_view(inputs, (n, n), axis=(1, 2))
    grad_kernels = np.tensordot(windows, grad_out, axes=([0, 1, 2], [0, 1, 2]))
    grad_kernels = grad_kernels.transpose(1, 2, 0, 3)

    # Full correlation of the output gradient with the flipped kernels
    pad = n - 1
    padded = np.pad(grad_out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    grad_windows = sliding_window_view(padded, (n, n), axis=(1, 2))
    flipped = kernels[::-1, ::-1]
    grad_inputs = np.tensordot(grad_windows, flipped, axes=([4, 5, 3], [0, 1, 3]))
    check_finite(grad_inputs, 'conv2d_valid backward')
    return grad_inputs, check_finite(grad_kernels, 'conv2d_valid backward')

# Pooling

def pool_trim(shape, k):
    """
    Returns how many trailing rows and columns ``maxpool2d`` drops for an
    input of ``shape`` (channel innermost) and window ``k``.
    """
    if k < 1:
        raise ConfigurationError('Pooling window must be at least 1, got %r.' % (k,))
    height, width = shape[-3], shape[-2]
    if height < k or width < k:
        raise ConfigurationError('Pooling window %d exceeds the spatial extent %dx%d.' % (
            k, height, width))
    return height % k, width % k

def _pool_windows(inputs, k):
    # [..., Ho, Wo, C, k * k], window scanned row by row
    height, width, channels = inputs.shape[-3:]
    lead = inputs.shape[:-3]
    rows, cols = height // k, width // k
    trimmed = inputs[..., :rows * k, :cols * k, :]
    windows = trimmed.reshape(lead + (rows, k, cols, k, channels))
    nl = len(lead)
    windows = np.moveaxis(windows, [nl + 1, nl + 3], [-2, -1])
    return windows.reshape(lead + (rows, cols, channels, k * k))

def maxpool2d(inputs, k):
    """
    Non-overlapping ``k x k`` max pooling over the two axes preceding the
    channel axis. Leading axes (batch, orientation) pass through untouched.
    Extents that are not divisible by ``k`` are trimmed from the end.
    """
    pool_trim(inputs.shape, k)
    if k == 1:
        return inputs.copy()
    return _pool_windows(inputs, k).max(axis=-1)

def maxpool2d_backward(inputs, k, grad_out):
    """
    Routes each output gradient to the maximum of its window (the first one
    in scan order on ties). Trimmed positions receive zero gradient.
    """
    pool_trim(inputs.shape, k)
    if k == 1:
        return grad_out.copy()
    windows = _pool_windows(inputs, k)
    argmax = windows.argmax(axis=-1)[..., np.newaxis]
    grad_windows = np.zeros(windows.shape, dtype=grad_out.dtype)
    np.put_along_axis(grad_windows, argmax, grad_out[..., np.newaxis], axis=-1)

    lead = inputs.shape[:-3]
    rows, cols, channels = windows.shape[-4:-1]
    nl = len(lead)
    grad_windows = grad_windows.reshape(lead + (rows, cols, channels, k, k))
    grad_windows = np.moveaxis(grad_windows, [-2, -1], [nl + 1, nl + 3])
    grad_inputs = np.zeros(inputs.shape, dtype=grad_out.dtype)
    grad_inputs[..., :rows * k, :cols * k, :] = grad_windows.reshape(
        lead + (rows * k, cols * k, channels))
    return grad_inputs

# Pointwise functions

def relu(inputs):
    return np.maximum(inputs, 0)

def relu_backward(inputs, grad_out):
    return grad_out * (inputs > 0)

def sigmoid(inputs):
    # tanh form stays finite for large magnitudes and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * inputs))

def sigmoid_backward(outputs, grad_out):
    """Takes the sigmoid *output*, not its input."""
    return grad_out * outputs * (1.0 - outputs)

POINTWISE = {
    'relu': relu,
    'sigmoid': sigmoid,
}

def pointwise(inputs, fn):
    """Applies ``'relu'`` or ``'sigmoid'`` elementwise."""
    try:
        return POINTWISE[fn](inputs)
    except KeyError:
        raise ConfigurationError('Unknown pointwise function: %r' % (fn,))

def softmax(inputs, axis=-1):
    shifted = inputs - inputs.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)

def softmax_backward(outputs, grad_out, axis=-1):
    """Takes the softmax *output*, not its input."""
    dot = (grad_out * outputs).sum(axis=axis, keepdims=True)
    return outputs * (grad_out - dot)

# Gradient checking

def grad_check(forward, backward, inputs, eps=1e-5, seed=0):
    """
    Compares analytic gradients against central differences and returns the
    maximum relative error over every element of every input.

    ``forward(*inputs)`` must return an array (or scalar).
    ``backward(*inputs, grad_out)`` must return one gradient per input (a
    single array is accepted when there is one input). The output is
    projected on a fixed random direction drawn from ``seed`` so that every
    output element takes part in the comparison.

    The check runs in 64-bit precision. The relative error of an element is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    with precision('float64'):
        inputs = [np.array(array, dtype=np.float64) for array in inputs]
        out = np.asarray(forward(*inputs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericalError('Non-finite forward output during gradient check.')
        direction = np.random.default_rng(seed).standard_normal(out.shape)

        analytic = backward(*inputs, direction)
        if isinstance(analytic, np.ndarray):
            analytic = [analytic]
        if len(analytic) != len(inputs):
            raise ConfigurationError('Backward returned %d gradients for %d inputs.' % (
                len(analytic), len(inputs)))

        def objective():
            value = np.sum(np.asarray(forward(*inputs)) * direction)
            if not np.isfinite(value):
                raise NumericalError('Non-finite forward output during gradient check.')
            return value

        worst = 0.0
        for array, grad in zip(inputs, analytic):
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != array.shape:
                raise ConfigurationError('Gradient shape %s does not match input shape %s.' % (
                    grad.shape, array.shape))
            if not np.all(np.isfinite(grad)):
                raise NumericalError('Non-finite analytic gradient during gradient check.')
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + eps
                plus = objective()
                array[index] = original - eps
                minus = objective()
                array[index] = original
                numeric = (plus - minus) / (2 * eps)
                error = abs(grad[index] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)
        logger.debug('Gradient check max relative error %.3g', worst)
    return worst
