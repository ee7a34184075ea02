"""
Model checkpoints.

A checkpoint is a zip archive holding ``manifest.txt`` (``key=value`` lines:
task, N, seed, strict_table_counts and the comma-separated block names) and
one SE2T file per trainable parameter block and batch-norm running
statistic. Entries are written in a fixed order with a fixed timestamp, so
the same weights always give the same bytes.
"""

import io
import logging
import zipfile

import numpy as np

from se2net import base, get_preset_by_task
from se2net.errors import ConfigurationError, DataError
from se2net.utils import serialize


logger = logging.getLogger(__name__)

MANIFEST = 'manifest.txt'
TIMESTAMP = (1980, 1, 1, 0, 0, 0)

def _entries(model):
    for param in model.parameters():
        yield '%s.se2t' % param.name, param.value
    for name, state in model.batchnorm_states():
        yield '%s.bn.running_mean.se2t' % name, state.running_mean
        yield '%s.bn.running_var.se2t' % name, state.running_var

def manifest(model):
    config = model.config
    fields = [
        ('task', config.task),
        ('N', config.N),
        ('seed', model.seed),
        ('strict_table_counts', int(config.strict_table_counts)),
        ('layers', ','.join(config.names)),
    ]
    return ''.join('%s=%s\n' % (key, value) for key, value in fields)

def _write_entry(archive, name, payload):
    info = zipfile.ZipInfo(name, date_time=TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)

def save(model, path):
    """Writes ``model`` to ``path`` (a file name or binary file object)."""
    with zipfile.ZipFile(path, 'w') as archive:
        _write_entry(archive, MANIFEST, manifest(model).encode('utf-8'))
        for name, value in _entries(model):
            _write_entry(archive, name, serialize.encode(value))
    logger.info('Checkpoint written to %s', path)

def to_bytes(model):
    buffer = io.BytesIO()
    save(model, buffer)
    return buffer.getvalue()

def parse_manifest(text):
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise DataError('Malformed manifest line: %r' % line)
        fields[key.strip()] = value.strip()
    for key in ('task', 'N', 'seed', 'layers'):
        if key not in fields:
            raise DataError('Checkpoint manifest is missing %r.' % key)
    return fields

def restore(model, archive):
    """Copies the weights stored in an open ``archive`` into ``model``."""
    names = set(archive.namelist())
    for name, value in _entries(model):
        if name not in names:
            raise DataError('Checkpoint has no entry %s.' % name)
        stored = serialize.decode(archive.read(name))
        if stored.shape != value.shape:
            raise DataError('Checkpoint entry %s has shape %s, the model expects %s.' % (
                name, stored.shape, value.shape))
        value[...] = stored
    model.refresh()

def load(path, config=None):
    """
    Builds the model described by a checkpoint and restores its weights.
    Checkpoints of custom architectures need their ``config`` passed in.
    """
    try:
        archive = zipfile.ZipFile(path)
    except FileNotFoundError:
        raise DataError('Checkpoint not found: %s' % path)
    except zipfile.BadZipFile:
        raise DataError('Not a checkpoint archive: %s' % path)
    with archive:
        if MANIFEST not in archive.namelist():
            raise DataError('Checkpoint %s has no %s.' % (path, MANIFEST))
        fields = parse_manifest(archive.read(MANIFEST).decode('utf-8'))
        if config is None:
            preset = get_preset_by_task(fields['task'])
            if preset is None:
                raise ConfigurationError(
                    'Checkpoint task %r is not a known preset; pass its config.' % fields['task'])
            config = preset.config(int(fields['N']),
                strict_table_counts=fields.get('strict_table_counts') == '1')
        if ','.join(config.names) != fields['layers']:
            raise DataError('Checkpoint layers %s do not match the configuration %s.' % (
                fields['layers'], ','.join(config.names)))
        model = base.build_model(config, rng_seed=int(fields['seed']))
        restore(model, archive)
    logger.info('Loaded %s model with N=%d from %s', config.task, config.N, path)
    return model

def snapshot(model):
    """An in-memory copy of every weight and running statistic."""
    return [np.array(value) for _, value in _entries(model)]

def restore_snapshot(model, values):
    for (_, value), stored in zip(_entries(model), values):
        value[...] = stored
    model.refresh()
