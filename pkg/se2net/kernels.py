"""
Rotated kernel banks built from trainable base weights.

A layer only ever trains its *base* weights. The ``N`` rotated copies the
convolution actually uses are derived from them by a fixed sparse operator per
orientation ``theta_i = 2*pi*i/N``: bilinear interpolation restricted to a
circular mask, so that every rotation of the kernel stays on its square grid.
Group kernels additionally shift their orientation axis cyclically (the
shift-twist). Gradients flow back to the base weights through the exact
transpose of the same operators.

Coordinates follow :mod:`se2net.group`: the pixel in row ``i`` and column
``j`` of an ``n x n`` grid sits at ``x = j - c``, ``y = c - i`` with
``c = (n - 1) / 2``. Rotating by ``pi/2`` is the same permutation as
``numpy.rot90`` over the (row, column) axes.

Source samples that land on a masked-out or off-grid neighbour are dropped,
not renormalized, so the transpose relation stays exact. Operators are built
once per ``(n, N, radius)`` and cached for the life of the process.
"""

import functools
import logging
import math

import numpy as np
from scipy import sparse

from se2net import tensor
from se2net.errors import ConfigurationError
from se2net.tensor import GradPair
from se2net.utils import serialize


logger = logging.getLogger(__name__)

KINDS = ('lifting', 'group')
SNAP = 1e-9

def orientation_angles(N):
    """The sampled orientations ``2*pi*i/N`` for ``i`` in ``range(N)``."""
    if N < 1:
        raise ConfigurationError('Orientation count must be at least 1, got %r.' % (N,))
    return [2 * math.pi * i / N for i in range(N)]

class CircularMask(object):
    """
    The disk-shaped support of an ``n x n`` kernel. A position is active when
    its distance to the centre is at most ``radius``, which defaults to
    ``n / 2`` (21 active positions for ``n = 5``).
    """
    def __init__(self, n, radius=None):
        if n < 1:
            raise ConfigurationError('Kernel size must be at least 1, got %r.' % (n,))
        self.n = n
        self.radius = n / 2.0 if radius is None else float(radius)
        center = (n - 1) / 2.0
        rows, cols = np.mgrid[0:n, 0:n]
        self.active = np.hypot(rows - center, cols - center) <= self.radius + SNAP

    def __repr__(self):
        return '<CircularMask n=%d radius=%g active=%d>' % (self.n, self.radius, self.count)

    @property
    def count(self):
        return int(self.active.sum())

    def positions(self):
        return list(zip(*[idx.tolist() for idx in np.nonzero(self.active)]))

def _snap(value):
    nearest = round(value)
    if abs(value - nearest) < SNAP:
        return float(nearest)
    return value

class RotationOperator(object):
    """
    Sparse bilinear rotation of an ``n x n`` kernel by ``theta``.

    * ``entries`` maps each active target pixel to its list of
      ``((row, col), weight)`` source pairs (at most four).
    * ``dropped`` maps target pixels to the total weight that fell on
      masked-out or off-grid neighbours.
    * ``matrix`` is the ``(n*n, n*n)`` CSR matrix of the same weights, indexed
      ``[target, source]`` over row-major flattened positions.
    """
    def __init__(self, n, theta, mask, entries, dropped):
        self.n = n
        self.theta = theta
        self.mask = mask
        self.entries = entries
        self.dropped = dropped
        matrix = sparse.lil_matrix((n * n, n * n))
        for (i, j), sources in entries.items():
            for (si, sj), weight in sources:
                matrix[i * n + j, si * n + sj] = weight
        self.matrix = matrix.tocsr()
        self._transpose = self.matrix.T.tocsr()

    def __repr__(self):
        return '<RotationOperator n=%d theta=%.6g>' % (self.n, self.theta)

    def is_supported(self, target):
        """
        Whether the rotated source of an active ``target`` kept all of its
        non-zero bilinear weights.
        """
        return target in self.entries and self.dropped.get(target, 0.0) == 0.0

    def row_sum(self, target):
        return sum(weight for _, weight in self.entries.get(target, []))

    def toarray(self):
        return self.matrix.toarray()

    def apply(self, kernel):
        """Rotates an array whose two leading axes are the ``n x n`` grid."""
        flat = kernel.reshape(self.n * self.n, -1)
        out = self.matrix.dot(flat)
        return np.asarray(out, dtype=kernel.dtype).reshape(kernel.shape)

    def apply_transpose(self, grad):
        flat = grad.reshape(self.n * self.n, -1)
        out = self._transpose.dot(flat)
        return np.asarray(out, dtype=grad.dtype).reshape(grad.shape)

def build_rotation_operator(n, theta, mask=None):
    """
    Builds the bilinear rotation operator for an odd kernel size ``n``.

    For each active target pixel ``p`` the source position is
    ``R(theta)^-1 (p - c) + c``; its four bilinear neighbours receive weights
    ``(1 - dr or dr) * (1 - dc or dc)``. Neighbours that are off the grid or
    masked out are dropped.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigurationError('Kernel size must be odd, got %r.' % (n,))
    if mask is None:
        mask = CircularMask(n)
    elif mask.n != n:
        raise ConfigurationError('Mask size %d does not match kernel size %d.' % (mask.n, n))

    center = (n - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    entries = {}
    dropped = {}
    for i, j in mask.positions():
        x, y = j - center, center - i
        source_x = cos * x + sin * y
        source_y = -sin * x + cos * y
        row, col = _snap(center - source_y), _snap(center + source_x)
        r0, c0 = int(math.floor(row)), int(math.floor(col))
        dr, dc = row - r0, col - c0
        neighbours = (
            (r0, c0, (1 - dr) * (1 - dc)),
            (r0, c0 + 1, (1 - dr) * dc),
            (r0 + 1, c0, dr * (1 - dc)),
            (r0 + 1, c0 + 1, dr * dc),
        )
        sources = []
        lost = 0.0
        for si, sj, weight in neighbours:
            if weight == 0.0:
                continue
            if 0 <= si < n and 0 <= sj < n and mask.active[si, sj]:
                sources.append(((si, sj), weight))
            else:
                lost += weight
        entries[(i, j)] = sources
        if lost:
            dropped[(i, j)] = lost
    return RotationOperator(n, theta, mask, entries, dropped)

@functools.lru_cache(maxsize=None)
def rotation_operators(n, N, radius=None):
    """The cached tuple of ``N`` operators for kernel size ``n``."""
    logger.debug('Building %d rotation operators for n=%d radius=%s', N, n, radius)
    mask = CircularMask(n, radius)
    return tuple(build_rotation_operator(n, theta, mask) for theta in orientation_angles(N))

class KernelBase(object):
    """
    Trainable base weights of one lifting or group layer plus the derived
    rotated bank.

    * lifting: ``base`` is ``[n, n, Cin, Cout]``, the bank ``[N, n, n, Cin, Cout]``
    * group: ``base`` is ``[n, n, N, Cin, Cout]``, the bank
      ``[N, n, n, N, Cin, Cout]``

    Masked positions are zero in the base and in every rotation. Call
    :meth:`refresh` after the base changes; the bank is otherwise stale.
    """
    def __init__(self, kind, cin, cout, N, n=5, radius=None, name=''):
        if kind not in KINDS:
            raise ConfigurationError('Unknown kernel kind: %r' % (kind,))
        self.kind = kind
        self.cin = cin
        self.cout = cout
        self.N = N
        self.n = n
        self.operators = rotation_operators(n, N, radius)
        self.mask = self.operators[0].mask
        if kind == 'lifting':
            shape = (n, n, cin, cout)
        else:
            shape = (n, n, N, cin, cout)
        self.base = GradPair(np.zeros(shape), name='%s.kernel' % name if name else 'kernel')
        self.derived_bank = None
        self.refresh()

    def __repr__(self):
        return '<KernelBase %s n=%d N=%d %d->%d>' % (
            self.kind, self.n, self.N, self.cin, self.cout)

    @property
    def mask_array(self):
        extra = (1,) * (self.base.value.ndim - 2)
        return self.mask.active.reshape(self.mask.active.shape + extra)

    @property
    def fan_in(self):
        orientations = self.N if self.kind == 'group' else 1
        return self.mask.count * orientations * self.cin

    def parameter_count(self):
        return self.fan_in * self.cout

    def initialize(self, rng):
        """Zero-mean uniform He initialization over the active fan-in."""
        bound = math.sqrt(6.0 / self.fan_in)
        values = rng.uniform(-bound, bound, size=self.base.value.shape)
        self.set_base(values)

    def set_base(self, values):
        values = np.asarray(values)
        if values.shape != self.base.value.shape:
            raise ConfigurationError('Base weights must have shape %s, got %s.' % (
                self.base.value.shape, values.shape))
        self.base.value[...] = values * self.mask_array
        self.refresh()

    def refresh(self):
        if self.kind == 'lifting':
            self.derived_bank = derive_bank_lifting(self)
        else:
            self.derived_bank = derive_bank_group(self)
        return self.derived_bank

    def backprop(self, grad_bank):
        self.base.accumulate(backprop_bank_to_base(self, grad_bank))

def derive_bank_lifting(kernel_base):
    """``bank[i] = R(theta_i) base`` for every orientation."""
    if kernel_base.kind != 'lifting':
        raise ConfigurationError('derive_bank_lifting needs a lifting kernel, got %r.' % (
            kernel_base.kind,))
    base = kernel_base.base.value
    bank = np.stack([op.apply(base) for op in kernel_base.operators])
    return tensor.check_finite(bank, 'derive_bank_lifting')

def derive_bank_group(kernel_base):
    """
    ``bank[j][:, :, m] = R(theta_j) base[:, :, (m - j) mod N]``: a planar
    rotation of every orientation slice plus a cyclic shift of the
    orientation axis by ``j``.
    """
    if kernel_base.kind != 'group':
        raise ConfigurationError('derive_bank_group needs a group kernel, got %r.' % (
            kernel_base.kind,))
    base = kernel_base.base.value
    bank = np.stack([op.apply(np.roll(base, j, axis=2))
        for j, op in enumerate(kernel_base.operators)])
    return tensor.check_finite(bank, 'derive_bank_group')

def backprop_bank_to_base(kernel_base, grad_bank):
    """The exact transpose of :func:`derive_bank_lifting` / :func:`derive_bank_group`."""
    expected = (kernel_base.N,) + kernel_base.base.value.shape
    if grad_bank.shape != expected:
        raise ConfigurationError('Bank gradient must have shape %s, got %s.' % (
            expected, grad_bank.shape))
    grad_base = np.zeros(kernel_base.base.value.shape, dtype=grad_bank.dtype)
    for j, op in enumerate(kernel_base.operators):
        unrotated = op.apply_transpose(grad_bank[j])
        if kernel_base.kind == 'group':
            unrotated = np.roll(unrotated, -j, axis=2)
        grad_base += unrotated
    return grad_base

def export_bank(kernel_base, path):
    """Writes the derived bank of ``kernel_base`` to an SE2T file."""
    serialize.save(path, kernel_base.derived_bank)
