"""
Stochastic gradient descent with momentum and decoupled weight decay::

    v <- momentum * v + g
    w <- w - lr * v - lr * weight_decay * w

The decay term acts on the weights directly, never through the gradient or
the momentum buffer, and is skipped for parameters flagged ``decay=False``
(batch-norm scales and shifts, biases). With ``weight_decay = 0`` the update
is plain momentum SGD.
"""

import logging

import numpy as np

from se2net.errors import NumericalError


logger = logging.getLogger(__name__)

def sgd_step(params, velocities, lr, momentum=0.9, weight_decay=0.0):
    """
    Updates every :class:`GradPair` in ``params`` in place from its ``grad``.

    All gradients are checked before any weight moves, so a non-finite
    gradient leaves the model untouched.
    """
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NumericalError('Non-finite gradient for %s.' % (param.name or 'a parameter'))
    for param, velocity in zip(params, velocities):
        velocity *= momentum
        velocity += param.grad
        if weight_decay and param.decay:
            param.value -= lr * velocity + (lr * weight_decay) * param.value
        else:
            param.value -= lr * velocity

class SGD(object):
    """Owns the momentum buffers of ``params``."""
    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.velocities = [np.zeros_like(param.value) for param in self.params]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr=None):
        sgd_step(self.params, self.velocities, self.lr if lr is None else lr,
            self.momentum, self.weight_decay)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()
