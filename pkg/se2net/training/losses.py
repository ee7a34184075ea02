"""
Losses and their gradients with respect to the model output.

Predictions are probabilities (the heads already apply sigmoid or softmax);
they are clipped to ``[1e-12, 1 - 1e-12]`` before taking logarithms.
"""

import numpy as np

from se2net.errors import DataError


EPS = 1e-12

def _check_labels(labels, classes):
    labels = np.asarray(labels)
    if labels.size and (not np.all(np.equal(np.mod(labels, 1), 0))
            or labels.min() < 0 or labels.max() >= classes):
        raise DataError('Labels must be integers in [0, %d), got values %s.' % (
            classes, np.unique(labels)[:10]))
    return labels.astype(np.int64)

def _broadcast_labels(pred, labels):
    labels = _check_labels(labels, 2)
    if labels.shape[0] != pred.shape[0]:
        raise DataError('Got %d labels for %d predictions.' % (labels.shape[0], pred.shape[0]))
    return labels.reshape((pred.shape[0],) + (1,) * (pred.ndim - 1)).astype(pred.dtype)

def bce(pred, labels):
    """Mean binary cross-entropy over every output of the batch."""
    y = _broadcast_labels(pred, labels)
    p = np.clip(pred, EPS, 1 - EPS)
    losses = y * np.log(p) + (1 - y) * np.log(1 - p)
    return float(-np.broadcast_to(losses, pred.shape).mean())

def bce_backward(pred, labels):
    y = _broadcast_labels(pred, labels)
    p = np.clip(pred, EPS, 1 - EPS)
    return -(y / p - (1 - y) / (1 - p)) / pred.size

def class_weights(masks, classes=3):
    """
    Inverse pixel frequency, scaled so that a balanced mask gets weight 1 for
    every class. Absent classes get weight 0.
    """
    masks = _check_labels(masks, classes)
    counts = np.bincount(masks.ravel(), minlength=classes).astype(np.float64)
    weights = np.zeros(classes)
    present = counts > 0
    weights[present] = masks.size / (classes * counts[present])
    return weights

def _picked(pred_map, masks, weights):
    classes = pred_map.shape[-1]
    masks = _check_labels(masks, classes)
    if masks.shape != pred_map.shape[:-1]:
        raise DataError('Mask shape %s does not match the prediction map %s.' % (
            masks.shape, pred_map.shape[:-1]))
    weights = np.asarray(weights, dtype=pred_map.dtype)
    picked = np.take_along_axis(pred_map, masks[..., np.newaxis], axis=-1)[..., 0]
    return masks, weights[masks], np.clip(picked, EPS, 1.0)

def weighted_ce3(pred_map, masks, weights):
    """
    Class-weighted cross-entropy of a softmax map ``[B, H, W, K]`` against
    integer masks ``[B, H, W]``, averaged over pixels.
    """
    _, pixel_weights, picked = _picked(pred_map, masks, weights)
    return float(-(pixel_weights * np.log(picked)).mean())

def weighted_ce3_backward(pred_map, masks, weights):
    masks, pixel_weights, picked = _picked(pred_map, masks, weights)
    grad = np.zeros(pred_map.shape, dtype=pred_map.dtype)
    values = -(pixel_weights / picked) / picked.size
    np.put_along_axis(grad, masks[..., np.newaxis], values[..., np.newaxis], axis=-1)
    return grad
