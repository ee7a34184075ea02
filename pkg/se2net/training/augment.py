"""
Training-time augmentation: random transposition, random quarter turn and a
per-channel brightness shift, drawn in that order from the given generator.
"""

import numpy as np

from se2net.errors import ConfigurationError


BRIGHTNESS = 0.1

def augment(patch, rng, mask=None):
    """
    Returns the augmented ``[H, W, C]`` patch, or ``(patch, mask)`` when a
    mask is given. The mask follows the spatial transforms only.
    """
    if patch.ndim != 3 or patch.shape[0] != patch.shape[1]:
        raise ConfigurationError('Augmentation needs a square [H, W, C] patch, got %s.' % (
            patch.shape,))
    transpose = rng.random() < 0.5
    turns = int(rng.integers(0, 4))
    shift = rng.uniform(-BRIGHTNESS, BRIGHTNESS, size=patch.shape[-1])

    out = patch
    if transpose:
        out = out.transpose(1, 0, 2)
        if mask is not None:
            mask = mask.T
    if turns:
        out = np.rot90(out, turns, axes=(0, 1))
        if mask is not None:
            mask = np.rot90(mask, turns, axes=(0, 1))
    out = np.clip(out + np.asarray(shift, dtype=patch.dtype), 0.0, 1.0).astype(patch.dtype)
    if mask is None:
        return out
    return out, np.ascontiguousarray(mask)
