"""
Codec for the SE2T tensor file format.

An SE2T payload is the magic bytes ``SE2T``, one unsigned byte holding the
rank, ``rank`` little-endian unsigned 32-bit extents, then the float32
little-endian values in row-major order. Dataset patches, exported kernel
banks, checkpoint blocks and audit dumps all use it.
"""

import struct

import numpy as np

from se2net.errors import DataError


MAGIC = b'SE2T'
MAX_RANK = 255

def encode(array):
    """Encodes an array (any float dtype) as SE2T bytes."""
    array = np.asarray(array)
    if array.ndim > MAX_RANK:
        raise DataError('Can\'t encode a tensor of rank %d.' % array.ndim)
    header = MAGIC + struct.pack('<B', array.ndim)
    header += struct.pack('<%dI' % array.ndim, *array.shape)
    payload = np.ascontiguousarray(array, dtype='<f4').tobytes()
    return header + payload

def decode(value):
    """Decodes SE2T bytes into a float32 array."""
    if value[:4] != MAGIC:
        raise DataError('Not an SE2T payload: bad magic %r.' % value[:4])
    if len(value) < 5:
        raise DataError('Truncated SE2T header.')
    rank = value[4]
    offset = 5 + 4 * rank
    if len(value) < offset:
        raise DataError('Truncated SE2T header.')
    shape = struct.unpack('<%dI' % rank, value[5:offset])
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(value) - offset != expected:
        raise DataError('SE2T payload holds %d bytes, shape %s needs %d.' % (
            len(value) - offset, shape, expected))
    array = np.frombuffer(value, dtype='<f4', offset=offset)
    return array.reshape(shape).astype(np.float32)

def save(path, array):
    with open(path, 'wb') as fh:
        fh.write(encode(array))

def load(path):
    try:
        with open(path, 'rb') as fh:
            return decode(fh.read())
    except FileNotFoundError:
        raise DataError('Tensor file not found: %s' % path)
