"""
The three SE(2) layer types: lifting, group convolution and projection.

* A **lifting layer** correlates a 2D feature map ``[B, H, W, Cin]`` with the
  ``N`` rotated copies of its kernel and stacks the responses along a new
  orientation axis, producing an SE(2)-image ``[B, N, H', W', Cout]``.
* A **group convolution layer** correlates an SE(2)-image with the
  shift-twisted copies of a 3D kernel: for output orientation ``j`` it sums,
  over input orientations ``m``, the planar correlation of slice ``m`` with
  ``bank[j][:, :, m]``.
* A **projection layer** reduces the orientation axis with a mean or a
  maximum, giving a 2D map that is invariant to rotations of the input.

Lifting and group convolution each run as a single :func:`conv2d_valid` by
folding the orientation axes into the channel axes.
"""

import numpy as np

from se2net import kernels, tensor
from se2net.errors import ConfigurationError
from se2net.layers import Layer


PROJECTION_MODES = ('max', 'mean')

def _lifting_kernels(bank):
    # [N, n, n, Cin, Cout] -> [n, n, Cin, N * Cout]
    N, n, _, cin, cout = bank.shape
    return bank.transpose(1, 2, 3, 0, 4).reshape(n, n, cin, N * cout)

def _group_kernels(bank):
    # [N_out, n, n, N_in, Cin, Cout] -> [n, n, N_in * Cin, N_out * Cout]
    N, n, _, _, cin, cout = bank.shape
    return bank.transpose(1, 2, 3, 4, 0, 5).reshape(n, n, N * cin, N * cout)

def _check_lifting(f, k):
    if k.kind != 'lifting':
        raise ConfigurationError('Lifting layers need a lifting kernel, got %r.' % (k.kind,))
    if f.ndim != 4:
        raise ConfigurationError('Lifting input must be [B, H, W, C], got shape %s.' % (f.shape,))
    if f.shape[-1] != k.cin:
        raise ConfigurationError('Channel axis: input has %d channels, lifting kernel expects %d.' % (
            f.shape[-1], k.cin))

def _check_group(F, k):
    if k.kind != 'group':
        raise ConfigurationError('Group convolutions need a group kernel, got %r.' % (k.kind,))
    if F.ndim != 5:
        raise ConfigurationError(
            'Group convolution input must be [B, N, H, W, C], got shape %s.' % (F.shape,))
    if F.shape[1] != k.N:
        raise ConfigurationError('Orientation axis: input has N=%d, kernel expects N=%d.' % (
            F.shape[1], k.N))
    if F.shape[-1] != k.cin:
        raise ConfigurationError('Channel axis: input has %d channels, group kernel expects %d.' % (
            F.shape[-1], k.cin))

def lifting_forward(f, k):
    """``out[:, i] = conv2d_valid(f, derive_bank_lifting(k)[i])``."""
    _check_lifting(f, k)
    out = tensor.conv2d_valid(f, _lifting_kernels(k.derived_bank))
    B, H, W, _ = out.shape
    return np.ascontiguousarray(out.reshape(B, H, W, k.N, k.cout).transpose(0, 3, 1, 2, 4))

def lifting_backward(f, k, grad_out):
    """Returns ``(grad_f, grad_base)``."""
    _check_lifting(f, k)
    B, N, H, W, C = grad_out.shape
    grad_flat = grad_out.transpose(0, 2, 3, 1, 4).reshape(B, H, W, N * C)
    grad_f, grad_kernels = tensor.conv2d_valid_backward(
        f, _lifting_kernels(k.derived_bank), grad_flat)
    grad_bank = grad_kernels.reshape(k.n, k.n, k.cin, N, C).transpose(3, 0, 1, 2, 4)
    return grad_f, kernels.backprop_bank_to_base(k, grad_bank)

def group_conv_forward(F, k):
    """``out[:, j] = sum over m of conv2d_valid(F[:, m], bank[j][:, :, m])``."""
    _check_group(F, k)
    B, N, H, W, C = F.shape
    folded = F.transpose(0, 2, 3, 1, 4).reshape(B, H, W, N * C)
    out = tensor.conv2d_valid(folded, _group_kernels(k.derived_bank))
    _, Ho, Wo, _ = out.shape
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, N, k.cout).transpose(0, 3, 1, 2, 4))

def group_conv_backward(F, k, grad_out):
    """Returns ``(grad_F, grad_base)``."""
    _check_group(F, k)
    B, N, H, W, C = F.shape
    folded = F.transpose(0, 2, 3, 1, 4).reshape(B, H, W, N * C)
    _, _, Ho, Wo, Co = grad_out.shape
    grad_flat = grad_out.transpose(0, 2, 3, 1, 4).reshape(B, Ho, Wo, N * Co)
    grad_folded, grad_kernels = tensor.conv2d_valid_backward(
        folded, _group_kernels(k.derived_bank), grad_flat)
    grad_F = grad_folded.reshape(B, H, W, N, C).transpose(0, 3, 1, 2, 4)
    grad_bank = grad_kernels.reshape(k.n, k.n, N, C, N, Co).transpose(4, 0, 1, 2, 3, 5)
    return np.ascontiguousarray(grad_F), kernels.backprop_bank_to_base(k, grad_bank)

def _check_mode(mode):
    if mode not in PROJECTION_MODES:
        raise ConfigurationError('Projection mode must be one of %s, got %r.' % (
            PROJECTION_MODES, mode))

def projection(F, mode):
    """Reduces the orientation axis of ``[B, N, H, W, C]`` with ``'max'`` or ``'mean'``."""
    _check_mode(mode)
    if mode == 'max':
        return F.max(axis=1)
    # Sorted so the result is exactly invariant to orientation permutations
    return np.sort(F, axis=1).sum(axis=1) / F.shape[1]

def projection_backward(F, mode, grad_out):
    """Mean splits the gradient evenly; max routes it to the first argmax."""
    _check_mode(mode)
    N = F.shape[1]
    if mode == 'mean':
        return np.repeat(grad_out[:, np.newaxis] / N, N, axis=1)
    argmax = F.argmax(axis=1)[:, np.newaxis]
    grad = np.zeros(F.shape, dtype=grad_out.dtype)
    np.put_along_axis(grad, argmax, grad_out[:, np.newaxis], axis=1)
    return grad

def _conv_extent(extent, n, axis):
    if extent < n:
        raise ConfigurationError('%s axis: extent %d is smaller than the kernel size %d.' % (
            axis, extent, n))
    return extent - n + 1

class LiftingLayer(Layer):
    def __init__(self, kernel_base, name=''):
        super(LiftingLayer, self).__init__(name)
        self.kernel = kernel_base

    def parameters(self):
        return [self.kernel.base]

    def parameter_count(self):
        # Masked kernel positions are stored but never trained
        return self.kernel.parameter_count()

    def output_shape(self, shape):
        H, W, C = shape
        if C != self.kernel.cin:
            raise ConfigurationError('Channel axis: %s expects %d channels, got %d.' % (
                self.name, self.kernel.cin, C))
        n = self.kernel.n
        return (self.kernel.N, _conv_extent(H, n, 'Height'), _conv_extent(W, n, 'Width'),
            self.kernel.cout)

    def forward(self, x, training=False):
        self._input = x
        return lifting_forward(x, self.kernel)

    def backward(self, grad):
        grad_f, grad_base = lifting_backward(self._input, self.kernel, grad)
        self.kernel.base.accumulate(grad_base.astype(self.kernel.base.grad.dtype))
        return grad_f

    def refresh(self):
        self.kernel.refresh()

class GroupConvLayer(Layer):
    def __init__(self, kernel_base, name=''):
        super(GroupConvLayer, self).__init__(name)
        self.kernel = kernel_base

    def parameters(self):
        return [self.kernel.base]

    def parameter_count(self):
        return self.kernel.parameter_count()

    def output_shape(self, shape):
        N, H, W, C = shape
        if N != self.kernel.N:
            raise ConfigurationError('Orientation axis: %s expects N=%d, got %d.' % (
                self.name, self.kernel.N, N))
        if C != self.kernel.cin:
            raise ConfigurationError('Channel axis: %s expects %d channels, got %d.' % (
                self.name, self.kernel.cin, C))
        n = self.kernel.n
        return (N, _conv_extent(H, n, 'Height'), _conv_extent(W, n, 'Width'), self.kernel.cout)

    def forward(self, x, training=False):
        self._input = x
        return group_conv_forward(x, self.kernel)

    def backward(self, grad):
        grad_F, grad_base = group_conv_backward(self._input, self.kernel, grad)
        self.kernel.base.accumulate(grad_base.astype(self.kernel.base.grad.dtype))
        return grad_F

    def refresh(self):
        self.kernel.refresh()

class ProjectionLayer(Layer):
    def __init__(self, mode, name=''):
        _check_mode(mode)
        super(ProjectionLayer, self).__init__(name)
        self.mode = mode

    def output_shape(self, shape):
        return shape[1:]

    def forward(self, x, training=False):
        self._input = x
        return projection(x, self.mode)

    def backward(self, grad):
        return projection_backward(self._input, self.mode, grad)
