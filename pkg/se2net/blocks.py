"""
Blocks are the declarative building pieces of a model configuration, the rows
of an architecture table. A configuration lists them as ``(name, block)``
pairs::

    layers = [
        ('block1', blocks.Lifting(8, pool=2)),
        ('block2', blocks.GroupConv(8, pool=2)),
        ('block3', blocks.GroupConv(8)),
        ('block4', blocks.GroupConv(16, kernel_size=1)),
        ('projection', blocks.Projection('max')),
        ('head', blocks.Head(1, 'sigmoid')),
    ]

Each convolutional block expands into convolution, SE(2) batch norm, ReLU and
an optional spatial max pooling. A group convolution block with ``skip`` set
to an earlier block's name first up-samples its input 2x and concatenates a
centre crop of that block's pre-pooling activation, as in a U-net decoder.

When a model is built, each block creates a *stage*: the runtime object that
holds the layers and runs the forward and backward passes.
"""

import numpy as np

from se2net import kernels
from se2net.errors import ConfigurationError
from se2net.layers import Layer
from se2net.layers.heads import Head as HeadLayer
from se2net.layers.normalization import SE2BatchNorm
from se2net.layers.se2 import GroupConvLayer, LiftingLayer, ProjectionLayer
from se2net.layers.spatial import (ReLU, SpatialMaxPool, upsample_concat,
    upsample_concat_backward, upsample_concat_shape)


class Block(object):
    """
    Base class for blocks. Subclasses set ``kind`` and implement
    :meth:`build`, which receives the block name, the single-sample input
    shape, the model configuration and, for skip blocks, the pre-pooling
    shape of the skip source.
    """
    kind = None
    skip = None

    def build(self, name, shape, config, skip_shape=None):
        raise NotImplementedError

class Lifting(Block):
    kind = 'lifting'

    def __init__(self, cout, pool=None, kernel_size=None):
        self.cout = cout
        self.pool = pool
        self.kernel_size = kernel_size

    def __repr__(self):
        return 'Lifting(%d, pool=%s, kernel_size=%s)' % (self.cout, self.pool, self.kernel_size)

    def build(self, name, shape, config, skip_shape=None):
        if len(shape) != 3:
            raise ConfigurationError('%s: lifting needs a 2D [H, W, C] input, got %s.' % (
                name, shape))
        kernel = kernels.KernelBase('lifting', shape[-1], self.cout, config.N,
            n=self.kernel_size or config.kernel_size, radius=_radius(self, config), name=name)
        return ConvStage(LiftingLayer(kernel, name='%s.conv' % name), self.cout, self.pool,
            name=name)

class GroupConv(Block):
    kind = 'group'

    def __init__(self, cout, pool=None, kernel_size=None, skip=None):
        self.cout = cout
        self.pool = pool
        self.kernel_size = kernel_size
        self.skip = skip

    def __repr__(self):
        return 'GroupConv(%d, pool=%s, kernel_size=%s, skip=%s)' % (
            self.cout, self.pool, self.kernel_size, self.skip)

    def build(self, name, shape, config, skip_shape=None):
        if len(shape) != 4:
            raise ConfigurationError('%s: group convolution needs an SE(2) input, got %s.' % (
                name, shape))
        cin = shape[-1]
        if self.skip is not None:
            cin = upsample_concat_shape(shape, skip_shape)[-1]
        kernel = kernels.KernelBase('group', cin, self.cout, config.N,
            n=self.kernel_size or config.kernel_size, radius=_radius(self, config), name=name)
        return ConvStage(GroupConvLayer(kernel, name='%s.conv' % name), self.cout, self.pool,
            skip=self.skip, name=name)

class Projection(Block):
    kind = 'projection'

    def __init__(self, mode):
        self.mode = mode

    def __repr__(self):
        return 'Projection(%r)' % (self.mode,)

    def build(self, name, shape, config, skip_shape=None):
        if len(shape) != 4:
            raise ConfigurationError('%s: projection needs an SE(2) input, got %s.' % (
                name, shape))
        return ProjectionLayer(self.mode, name=name)

class Head(Block):
    """
    ``classes`` outputs with a ``'sigmoid'``, ``'softmax'`` or ``'linear'``
    activation. Multi-class heads of a configuration with
    ``strict_table_counts`` swap their bias for a per-class affine.
    """
    kind = 'head'

    def __init__(self, classes, activation):
        self.classes = classes
        self.activation = activation

    def __repr__(self):
        return 'Head(%d, %r)' % (self.classes, self.activation)

    def build(self, name, shape, config, skip_shape=None):
        if len(shape) != 3:
            raise ConfigurationError('%s: the head needs a 2D [H, W, C] input, got %s.' % (
                name, shape))
        affine = bool(config.strict_table_counts and self.classes > 1)
        return HeadLayer(shape[-1], self.classes, self.activation, affine=affine, name=name)

def _radius(block, config):
    n = block.kernel_size or config.kernel_size
    if n == config.kernel_size:
        return config.mask_radius
    return None

class ConvStage(Layer):
    """
    Convolution, batch norm, ReLU and optional pooling.

    ``pre_pool`` keeps the activation before pooling for skip consumers.
    Gradients those consumers send back are added to ``skip_grad_in`` before
    this stage runs its own backward pass.
    """
    def __init__(self, conv, cout, pool=None, skip=None, name=''):
        super(ConvStage, self).__init__(name)
        self.conv = conv
        self.norm = SE2BatchNorm(cout, name='%s.bn' % name)
        self.relu = ReLU(name='%s.relu' % name)
        self.pool = SpatialMaxPool(pool, name='%s.pool' % name) if pool else None
        self.skip = skip
        self.pre_pool = None
        self.skip_grad_in = None
        self.skip_grad_out = None

    @property
    def kernel(self):
        return self.conv.kernel

    def parameters(self):
        return self.conv.parameters() + self.norm.parameters()

    def parameter_count(self):
        return self.conv.parameter_count() + self.norm.parameter_count()

    def initialize(self, rng):
        self.kernel.initialize(rng)

    def refresh(self):
        self.conv.refresh()

    def pre_pool_shape(self, shape, skip_shape=None):
        if self.skip is not None:
            shape = upsample_concat_shape(shape, skip_shape)
        return self.conv.output_shape(shape)

    def output_shape(self, shape, skip_shape=None, pooling=True):
        shape = self.pre_pool_shape(shape, skip_shape)
        if self.pool is not None and pooling:
            shape = self.pool.output_shape(shape)
        return shape

    def forward(self, x, training=False, skip_input=None, pooling=True):
        if self.skip is not None:
            if skip_input is None:
                raise ConfigurationError('%s needs the activation of %s.' % (self.name, self.skip))
            self._shapes = (x.shape, skip_input.shape)
            x = upsample_concat(x, skip_input)
        out = self.conv.forward(x, training)
        out = self.norm.forward(out, training)
        out = self.relu.forward(out, training)
        self.pre_pool = out
        self.skip_grad_in = None
        self._pooled = self.pool is not None and pooling
        if self._pooled:
            out = self.pool.forward(out, training)
        return out

    def backward(self, grad):
        if self._pooled:
            grad = self.pool.backward(grad)
        if self.skip_grad_in is not None:
            grad = grad + self.skip_grad_in
            self.skip_grad_in = None
        grad = self.relu.backward(grad)
        grad = self.norm.backward(grad)
        grad = self.conv.backward(grad)
        if self.skip is not None:
            grad, self.skip_grad_out = upsample_concat_backward(
                self._shapes[0], self._shapes[1], grad)
        return grad

    def receive_skip_grad(self, grad):
        if self.skip_grad_in is None:
            self.skip_grad_in = np.array(grad)
        else:
            self.skip_grad_in += grad
