"""
Models are declared, not coded. A model is described by a
:class:`ModelConfig`: the orientation count ``N``, the input shape and an
ordered list of ``(name, block)`` pairs (see :mod:`se2net.blocks`). Building
the configuration creates the trainable :class:`Model`.

The architectures of the shipped tasks are written as :class:`Preset`
subclasses, which declare their channel widths per orientation count and their
block layout. Every preset registers itself in a catalog that the
``se2net.get_preset_by_task`` and ``se2net.get_presets`` lookups search.

A configuration is only valid when it keeps the model rotation invariant by
construction:

* the first block is a lifting block and no other block lifts
* group convolutions follow the lifting block and precede the projection
* exactly one projection reduces the orientation axis
* the last block is a head, and nothing else follows the projection

Here is the tumor architecture at ``N = 8`` written out by hand::

    from se2net import base, blocks

    config = base.ModelConfig('custom', 8, [
        ('block1', blocks.Lifting(14, pool=2)),
        ('block2', blocks.GroupConv(14, pool=2)),
        ('block3', blocks.GroupConv(14, pool=3)),
        ('block4', blocks.GroupConv(8)),
        ('block5', blocks.GroupConv(16, kernel_size=1)),
        ('projection', blocks.Projection('mean')),
        ('head', blocks.Head(1, 'sigmoid')),
    ], input_shape=(88, 88, 3))
    model = base.build_model(config, rng_seed=0)
"""

from contextlib import contextmanager
import logging
import re

import numpy as np

from se2net import tensor
from se2net.blocks import ConvStage
from se2net.errors import ConfigurationError
from se2net.layers import SE2Image


logger = logging.getLogger(__name__)

MAX_INPUT_SEARCH = 2048

def get_code_name(class_name):
    """
    Converts class names to a task code name.

    For example, 'SynthClsPreset' would be converted to 'synth-cls'.
    """
    name = re.sub('Preset$', '', class_name)
    return re.sub('(?<=[a-z0-9])([A-Z])', '-\\1', name).lower()

class PresetMeta(type):
    preset_catalog = []

    def __new__(cls, name, bases, dct):
        preset_cls = type.__new__(cls, name, bases, dct)
        # Only concrete presets, the ones that declare widths, are catalogued
        if dct.get('widths'):
            if not dct.get('task'):
                preset_cls.task = get_code_name(name)
            cls.preset_catalog.append(preset_cls)
        return preset_cls

class Preset(object, metaclass=PresetMeta):
    """
    To declare an architecture, subclass ``Preset`` and define:

    ``task`` *(optional)*
        The code name the catalog knows the preset by. Generated from the
        class name when left out.

    ``input_shape``
        The ``(H, W, C)`` patch the architecture is designed for.

    ``projection``
        ``'max'`` or ``'mean'``, the reduction over the orientation axis.

    ``widths``
        A dict from orientation count ``N`` to the tuple of channel widths
        that :meth:`blocks` consumes.

    ``table_totals`` *(optional)*
        The published total parameter count per ``N``; used to report
        discrepancies, never to change the architecture.

    ``blocks(widths)``
        A class method returning the ``(name, block)`` layout.
    """
    task = None
    input_shape = None
    projection = 'max'
    widths = {}
    table_totals = {}

    @classmethod
    def blocks(cls, widths):
        raise NotImplementedError

    @classmethod
    def orientation_counts(cls):
        return sorted(cls.widths)

    @classmethod
    def config(cls, N, strict_table_counts=False):
        if N not in cls.widths:
            raise ConfigurationError('Preset %s has no configuration for N=%r; choose from %s.' % (
                cls.task, N, cls.orientation_counts()))
        return ModelConfig(cls.task, N, cls.blocks(cls.widths[N]),
            input_shape=cls.input_shape, strict_table_counts=strict_table_counts)

class ModelConfig(object):
    """
    A validated architecture description.

    * ``task``: the preset code name, or ``'custom'``
    * ``N``: the number of sampled orientations
    * ``layers``: the ordered ``(name, block)`` pairs
    * ``input_shape``: the ``(H, W, C)`` design patch; its channel count sizes
      the lifting kernel
    * ``kernel_size`` and ``mask_radius``: defaults for convolutional blocks
    * ``strict_table_counts``: give multi-class heads a per-class affine
      instead of a bias
    """
    def __init__(self, task, N, layers, input_shape, kernel_size=5, mask_radius=2.5,
            strict_table_counts=False):
        self.task = task
        self.N = N
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.kernel_size = kernel_size
        self.mask_radius = mask_radius
        self.strict_table_counts = bool(strict_table_counts)
        self.validate()

    def __repr__(self):
        return '<ModelConfig %s N=%d %d blocks>' % (self.task, self.N, len(self.layers))

    @property
    def names(self):
        return [name for name, _ in self.layers]

    def validate(self):
        if not isinstance(self.N, int) or self.N < 1:
            raise ConfigurationError('Orientation count N must be a positive integer, got %r.' % (
                self.N,))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError('Kernel size must be odd, got %r.' % (self.kernel_size,))
        if self.input_shape is None or len(self.input_shape) != 3:
            raise ConfigurationError('Input shape must be (H, W, C), got %r.' % (
                self.input_shape,))
        if not self.layers:
            raise ConfigurationError('A model needs at least one block.')
        names = self.names
        if len(set(names)) != len(names):
            raise ConfigurationError('Block names must be unique: %s.' % (names,))

        kinds = [block.kind for _, block in self.layers]
        if kinds[0] != 'lifting':
            if kinds[0] == 'group':
                raise ConfigurationError('Group convolution %s comes before any lifting block.' % (
                    names[0],))
            raise ConfigurationError('The first block must be a lifting block, got %s.' % (
                names[0],))
        if 'projection' not in kinds:
            raise ConfigurationError('No projection block: the model would not be invariant.')
        if kinds.count('projection') > 1:
            raise ConfigurationError('Only one projection block is allowed.')
        projection = kinds.index('projection')
        if 'head' in kinds[:projection]:
            raise ConfigurationError('Head %s comes before the projection.' % (
                names[kinds.index('head')],))
        if kinds[-1] != 'head' or kinds.count('head') != 1:
            raise ConfigurationError('The last block, and only it, must be a head.')
        for index, kind in enumerate(kinds[1:projection], 1):
            if kind != 'group':
                raise ConfigurationError('%s: only group convolutions may follow the lifting '
                    'block before the projection, got a %s block.' % (names[index], kind))
        if projection != len(kinds) - 2:
            raise ConfigurationError('Only the head may follow the projection.')

        for index, (name, block) in enumerate(self.layers):
            if block.skip is None:
                continue
            earlier = names[:index]
            if block.skip not in earlier or self.layers[names.index(block.skip)][1].kind not in (
                    'lifting', 'group'):
                raise ConfigurationError('%s: skip source %r is not an earlier convolution block.' % (
                    name, block.skip))

class Model(object):
    """
    A built model: one stage per block, with weights initialized from
    ``seed``.

    ``stages`` is the ordered list of ``(name, stage)`` pairs and ``shapes``
    the single-sample output shape of every block for the configured input.
    """
    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        self.stages = []
        self._index = {}
        shape = config.input_shape
        pre_pool = {}
        for name, block in config.layers:
            skip_shape = pre_pool.get(block.skip)
            stage = block.build(name, shape, config, skip_shape)
            if isinstance(stage, ConvStage):
                pre_pool[name] = stage.pre_pool_shape(shape, skip_shape)
            self._index[name] = len(self.stages)
            self.stages.append((name, stage))
            shape = self._stage_shape(stage, shape, skip_shape)
        self.shapes = self.infer_shapes(config.input_shape)
        self.initialize(seed)
        self._minimum = None
        logger.info('Built %s model with N=%d and %d parameters', config.task, config.N,
            self.count_params()[0])

    def __repr__(self):
        return '<Model %s N=%d>' % (self.config.task, self.config.N)

    @staticmethod
    def _stage_shape(stage, shape, skip_shape, pooling=True):
        if isinstance(stage, ConvStage):
            return stage.output_shape(shape, skip_shape, pooling)
        return stage.output_shape(shape)

    def initialize(self, seed):
        rng = np.random.default_rng(seed)
        for _, stage in self.stages:
            if hasattr(stage, 'initialize'):
                stage.initialize(rng)

    def infer_shapes(self, input_shape, pooling=True):
        """The single-sample output shape of every block, in order."""
        shape = tuple(input_shape)
        pre_pool = {}
        shapes = []
        for name, stage in self.stages:
            skip_shape = pre_pool.get(getattr(stage, 'skip', None))
            if isinstance(stage, ConvStage):
                pre_pool[name] = stage.pre_pool_shape(shape, skip_shape)
            shape = self._stage_shape(stage, shape, skip_shape, pooling)
            shapes.append(shape)
        return shapes

    def output_shape(self, input_shape):
        return self.infer_shapes(input_shape)[-1]

    def minimum_input_size(self):
        """The smallest square input extent the model accepts."""
        if self._minimum is None:
            channels = self.config.input_shape[-1]
            for extent in range(1, MAX_INPUT_SEARCH + 1):
                try:
                    self.infer_shapes((extent, extent, channels))
                except ConfigurationError:
                    continue
                self._minimum = extent
                break
            else:
                raise ConfigurationError('No input extent up to %d fits this model.' % (
                    MAX_INPUT_SEARCH,))
        return self._minimum

    def parameters(self):
        params = []
        for _, stage in self.stages:
            params.extend(stage.parameters())
        return params

    def batchnorm_states(self):
        return [(name, stage.norm.state) for name, stage in self.stages
            if isinstance(stage, ConvStage)]

    @contextmanager
    def frozen_statistics(self, frozen=True):
        """Holds the batch norm running statistics fixed while the block runs."""
        states = [state for _, state in self.batchnorm_states()]
        previous = [state.frozen for state in states]
        for state in states:
            state.frozen = frozen
        try:
            yield self
        finally:
            for state, value in zip(states, previous):
                state.frozen = value

    def count_params(self):
        """Returns ``(total, breakdown)`` with ``breakdown`` a list of ``(name, count)``."""
        breakdown = [(name, stage.parameter_count()) for name, stage in self.stages
            if stage.parameters()]
        return sum(count for _, count in breakdown), breakdown

    def refresh(self):
        for _, stage in self.stages:
            stage.refresh()

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def resolve_upto(self, upto):
        if upto is None:
            return len(self.stages)
        if isinstance(upto, str):
            if upto not in self._index:
                raise ConfigurationError('Unknown block %r; the model has %s.' % (
                    upto, self.config.names))
            return self._index[upto] + 1
        if not 1 <= upto <= len(self.stages):
            raise ConfigurationError('Block prefix must be between 1 and %d, got %r.' % (
                len(self.stages), upto))
        return upto

    def _check_input(self, x):
        if x.ndim != 4:
            raise ConfigurationError('Model input must be [B, H, W, C], got shape %s.' % (
                x.shape,))
        minimum = self.minimum_input_size()
        if x.shape[1] < minimum or x.shape[2] < minimum:
            raise ConfigurationError('Input extent %dx%d is smaller than the required %dx%d.' % (
                x.shape[1], x.shape[2], minimum, minimum))
        self.infer_shapes(x.shape[1:])

    def forward(self, x, training=False, upto=None, pooling=True):
        """
        Runs the first ``upto`` blocks (all by default; a block name or count
        is accepted). With ``pooling=False`` the spatial pooling steps are
        skipped, which audits use on pooling-free prefixes.
        """
        return self._run(x, training, upto, pooling)[-1]

    def trace(self, x, upto=None, pooling=True):
        """Every block output as an :class:`SE2Image` (2D maps get ``N = 1``)."""
        outputs = self._run(x, False, upto, pooling)
        images = []
        for (name, _), out in zip(self.stages, outputs):
            data = out if out.ndim == 5 else out[:, np.newaxis]
            images.append(SE2Image(data, provenance=name))
        return images

    def _run(self, x, training, upto, pooling):
        x = tensor.as_tensor(x)
        if pooling:
            self._check_input(x)
        stop = self.resolve_upto(upto)
        outputs = []
        for name, stage in self.stages[:stop]:
            if isinstance(stage, ConvStage):
                skip_input = None
                if stage.skip is not None:
                    skip_input = self.stages[self._index[stage.skip]][1].pre_pool
                x = stage.forward(x, training, skip_input=skip_input, pooling=pooling)
            else:
                x = stage.forward(x, training)
            outputs.append(x)
        return outputs

    def backward(self, grad):
        """
        Back-propagates ``grad`` (the gradient of the full model output)
        through every block, accumulating parameter gradients, and returns
        the gradient of the input.
        """
        for name, stage in reversed(self.stages):
            grad = stage.backward(grad)
            if isinstance(stage, ConvStage) and stage.skip is not None:
                source = self.stages[self._index[stage.skip]][1]
                source.receive_skip_grad(stage.skip_grad_out)
        return grad

def build_model(config, rng_seed=0):
    return Model(config, seed=rng_seed)

def count_params(model):
    return model.count_params()

def forward(model, batch):
    """Inference-mode predictions for ``batch``."""
    return model.forward(batch, training=False)
