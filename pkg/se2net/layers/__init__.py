"""
Layers are the units a model executes, each with an explicit forward and
backward contract.

Activations travel between layers as plain arrays in one of two layouts:

* 2D feature maps, ``[B, H, W, C]``
* SE(2)-images, ``[B, N, H, W, C]``, with the orientation axis ``N`` outside
  the spatial axes so that orientation shifts are cheap slice permutations

Every module in this package pairs pure functions (``lifting_forward`` and
``lifting_backward``, ``projection`` and ``projection_backward`` and so on)
with a :class:`Layer` subclass that remembers what its backward pass needs.

Writing a layer
---------------

Subclasses implement:

* ``forward(x, training)``: computes the output and keeps whatever the
  backward pass will need on ``self``.
* ``backward(grad)``: receives the gradient of the output, accumulates the
  gradients of its own parameters into their :class:`GradPair` objects and
  returns the gradient of its input.
* ``parameters()``: the list of its :class:`GradPair` objects, in a stable
  order.
* ``output_shape(shape)``: shape inference without data, for a single sample
  (the shape without the batch axis).

Layers hold state (cached inputs, batch-norm statistics), so one model
instance must only be trained by one writer at a time. Forward passes with
frozen weights are safe to run concurrently on separate layer instances.
"""

import numpy as np

from se2net.errors import ConfigurationError


class SE2Image(object):
    """
    A multi-channel feature map on positions and orientations.

    * ``data``: the ``[B, N, H, W, C]`` array
    * ``N``: the number of sampled orientations; ``N = 1`` is an ordinary 2D
      feature map
    * ``provenance``: the name of the layer or block that produced it
    """
    def __init__(self, data, provenance=None):
        data = np.asarray(data)
        if data.ndim != 5:
            raise ConfigurationError('SE(2)-images are [B, N, H, W, C], got shape %s.' % (
                data.shape,))
        self.data = data
        self.provenance = provenance

    def __repr__(self):
        return '<SE2Image %s from %s>' % (self.data.shape, self.provenance)

    @property
    def N(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

class Layer(object):
    """
    Base class for layers. By default a layer has no parameters and does not
    change the shape; subclasses override what they need.
    """
    def __init__(self, name=''):
        self.name = name
        self.metadata = {}

    def __repr__(self):
        return '<%s %s>' % (self.__class__.__name__, self.name)

    def parameters(self):
        return []

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def output_shape(self, shape):
        return shape

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def refresh(self):
        """Hook called after the optimizer updated this layer's parameters."""
        pass
