"""
The roto-translation group SE(2).

An element ``g = (x, theta)`` is a planar translation ``x`` (in pixels) paired
with a rotation angle ``theta`` (radians, normalized to ``[0, 2*pi)``). The
group product is::

    (x1, theta1) * (x2, theta2) = (x1 + R(theta1) x2, theta1 + theta2)

with identity ``((0, 0), 0)`` and inverse ``(-R(theta)^-1 x, -theta)``.
Positions use ``x`` to the right and ``y`` upwards, so a positive angle turns
counter-clockwise.
"""

import math

import numpy as np


TWO_PI = 2 * math.pi

def normalize_angle(theta):
    """Maps ``theta`` into ``[0, 2*pi)``."""
    theta = math.fmod(theta, TWO_PI)
    if theta < 0:
        theta += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if theta >= TWO_PI:
        theta = 0.0
    return theta

def rotation_matrix(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])

def angle_distance(a, b):
    """Shortest distance between two angles on the circle."""
    d = abs(normalize_angle(a) - normalize_angle(b))
    return min(d, TWO_PI - d)

class GroupElement(object):
    def __init__(self, x=(0.0, 0.0), theta=0.0):
        self.x = np.array(x, dtype=np.float64).reshape(2)
        self.theta = normalize_angle(float(theta))

    def __repr__(self):
        return '<GroupElement x=(%.6g, %.6g) theta=%.6g>' % (
            self.x[0], self.x[1], self.theta)

    def __mul__(self, other):
        return group_product(self, other)

    def isclose(self, other, tol=1e-12):
        return (np.allclose(self.x, other.x, rtol=0, atol=tol)
            and angle_distance(self.theta, other.theta) <= tol)

    def inverse(self):
        return group_inverse(self)

IDENTITY = GroupElement()

def group_product(g, h):
    return GroupElement(g.x + rotation_matrix(g.theta).dot(h.x), g.theta + h.theta)

def group_inverse(g):
    return GroupElement(-rotation_matrix(-g.theta).dot(g.x), -g.theta)

def group_action(g, point):
    """
    Acts with ``g`` on a point ``(x, theta)`` of the roto-translation space and
    returns the transformed ``(x, theta)`` pair.
    """
    position, theta = point
    moved = g.x + rotation_matrix(g.theta).dot(np.asarray(position, dtype=np.float64))
    return moved, normalize_angle(g.theta + theta)
