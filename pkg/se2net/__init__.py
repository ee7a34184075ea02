"""
The ``se2net`` module provides a few utility methods that are useful for
finding the shipped architectures.

.. note::

    Presets register themselves through a metaclass set on
    :class:`base.Preset`. The shipped presets are imported below; presets you
    define yourself are only known once the module declaring them has been
    imported.
"""

from se2net.base import PresetMeta
from se2net import presets  # noqa: F401


def get_preset_by_task(task):
    """
    Returns the preset class with the given ``task`` code name, or ``None`` if
    not found.
    """
    if task is None:
        return None
    for preset in PresetMeta.preset_catalog:
        if getattr(preset, 'task', None) == task:
            return preset
    return None

def get_presets():
    """Returns all known presets as a dict of task code names to classes."""
    return dict((preset.task, preset) for preset in PresetMeta.preset_catalog)
