"""
The shipped architectures. Channel widths per orientation count are chosen so
that the total weight count stays roughly constant as ``N`` grows; the
published totals are kept in ``table_totals``.
"""

from se2net import blocks
from se2net.base import Preset


class MitosisPreset(Preset):
    """68x68 patch classifier with max projection."""
    input_shape = (68, 68, 3)
    projection = 'max'
    widths = {
        1: (16, 16, 16, 64, 16),
        4: (10, 10, 10, 16, 16),
        8: (8, 8, 8, 8, 16),
        16: (6, 6, 6, 4, 16),
    }
    table_totals = {1: 34561, 4: 32035, 8: 33897, 16: 33751}

    @classmethod
    def blocks(cls, widths):
        c1, c2, c3, c4, c5 = widths
        return [
            ('block1', blocks.Lifting(c1, pool=2)),
            ('block2', blocks.GroupConv(c2, pool=2)),
            ('block3', blocks.GroupConv(c3, pool=2)),
            ('block4', blocks.GroupConv(c4)),
            ('block5', blocks.GroupConv(c5, kernel_size=1)),
            ('projection', blocks.Projection(cls.projection)),
            ('head', blocks.Head(1, 'sigmoid')),
        ]

class NucleiPreset(Preset):
    """
    60x60 U-net producing a 20x20 map of background, nucleus and boundary
    probabilities. Blocks 4 and 5 concatenate centre crops of the pre-pooling
    activations of blocks 2 and 1.
    """
    input_shape = (60, 60, 3)
    projection = 'max'
    widths = {
        1: (16, 16, 16, 16, 64, 16),
        4: (10, 10, 10, 10, 16, 16),
        8: (8, 8, 8, 8, 8, 16),
        16: (6, 6, 6, 6, 4, 16),
    }
    table_totals = {1: 66886, 4: 62332, 8: 66206, 16: 66056}

    @classmethod
    def blocks(cls, widths):
        c1, c2, c3, c4, c5, c6 = widths
        return [
            ('block1', blocks.Lifting(c1, pool=2)),
            ('block2', blocks.GroupConv(c2, pool=2)),
            ('block3', blocks.GroupConv(c3)),
            ('block4', blocks.GroupConv(c4, skip='block2')),
            ('block5', blocks.GroupConv(c5, skip='block1')),
            ('block6', blocks.GroupConv(c6, kernel_size=1)),
            ('projection', blocks.Projection(cls.projection)),
            ('head', blocks.Head(3, 'softmax')),
        ]

class TumorPreset(Preset):
    """88x88 patch classifier with mean projection."""
    input_shape = (88, 88, 3)
    projection = 'mean'
    widths = {
        1: (32, 32, 32, 64, 16),
        4: (19, 19, 19, 16, 16),
        8: (14, 14, 14, 8, 16),
        16: (10, 10, 10, 4, 16),
    }
    table_totals = {1: 89425, 4: 88600, 8: 86727, 16: 82411}

    @classmethod
    def blocks(cls, widths):
        c1, c2, c3, c4, c5 = widths
        return [
            ('block1', blocks.Lifting(c1, pool=2)),
            ('block2', blocks.GroupConv(c2, pool=2)),
            ('block3', blocks.GroupConv(c3, pool=3)),
            ('block4', blocks.GroupConv(c4)),
            ('block5', blocks.GroupConv(c5, kernel_size=1)),
            ('projection', blocks.Projection(cls.projection)),
            ('head', blocks.Head(1, 'sigmoid')),
        ]

class SynthClsPreset(Preset):
    """36x36 classifier for the synthetic oriented-blob task."""
    input_shape = (36, 36, 3)
    projection = 'max'
    widths = {
        1: (16, 16, 32, 16),
        4: (8, 8, 12, 16),
        8: (6, 6, 8, 16),
        16: (4, 4, 6, 16),
    }

    @classmethod
    def blocks(cls, widths):
        c1, c2, c3, c4 = widths
        return [
            ('block1', blocks.Lifting(c1, pool=2)),
            ('block2', blocks.GroupConv(c2, pool=2)),
            ('block3', blocks.GroupConv(c3, pool=2)),
            ('block4', blocks.GroupConv(c4, kernel_size=1)),
            ('projection', blocks.Projection(cls.projection)),
            ('head', blocks.Head(1, 'sigmoid')),
        ]
