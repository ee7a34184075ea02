"""
Formats define how values in a result table are written out. They take the
underlying Python value and convert it into a representation appropriate for
the output medium.

A table is described by an ordered list of ``(column_name, format)`` pairs.
The training history, for example, is declared as::

    HISTORY_COLUMNS = [
        ('epoch', formats.Integer()),
        ('train_loss', formats.Float()),
        ('val_loss', formats.Float()),
        ('val_metric', formats.Float()),
        ('lr', formats.Float()),
    ]

and written with :func:`write_csv`. Rows are dicts keyed by column name.

Output formats
--------------

All formats have formatter methods for two types of output: CSV and JSON.
Floats are written with 6 significant digits in CSV so regression files diff
cleanly, and as plain numbers in JSON. You can subclass any format and add a
``format_NAME`` method to support another medium, then pass ``'NAME'`` to
:func:`format_rows`.
"""

import csv
import json
import math


class Format(object):
    """
    Base class for formats.

    * label: A string used as the column header. Optional; the column name is
      used when left as None.

    Subclasses implement ``format``, the default value formatter, and may add
    ``format_OUTPUT`` methods where the output differs per medium. Every
    format method handles a value of None.
    """
    def __init__(self, label=None):
        self.label = label

    def format(self, value):
        """Default format method simply stringifies the value."""
        if value is None:
            return ''
        return str(value)

    def format_csv(self, value):
        return self.format(value)

    def format_json(self, value):
        return value

class Integer(Format):
    def format(self, value):
        if value is None:
            return ''
        return '%d' % value

    def format_json(self, value):
        if value is None:
            return None
        return int(value)

class Float(Format):
    """
    Formats the data as a float with ``digits`` significant digits (6 by
    default). Non-finite values are written as ``nan``, ``inf`` and
    ``-inf`` in CSV and as null in JSON.
    """
    def __init__(self, digits=6, **kwargs):
        self.digits = digits
        super(Float, self).__init__(**kwargs)

    def format(self, value):
        if value is None:
            return ''
        return '%.*g' % (self.digits, value)

    def format_json(self, value):
        if value is None or not math.isfinite(value):
            return None
        return float('%.*g' % (self.digits, value))

class String(Format):
    pass

def format_rows(columns, rows, output='csv'):
    """Formats every row with the ``format_OUTPUT`` method of each column."""
    formatted = []
    for row in rows:
        formatted.append(dict(
            (name, getattr(fmt, 'format_%s' % output)(row.get(name)))
            for name, fmt in columns))
    return formatted

def header(columns):
    return [fmt.label or name for name, fmt in columns]

def write_csv(path_or_file, columns, rows):
    """Writes a UTF-8 CSV with a header row and LF line endings."""
    def write(fh):
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header(columns))
        for row in format_rows(columns, rows, 'csv'):
            writer.writerow([row[name] for name, _ in columns])

    if hasattr(path_or_file, 'write'):
        write(path_or_file)
    else:
        with open(path_or_file, 'w', encoding='utf-8', newline='') as fh:
            write(fh)

def read_csv(path):
    """Reads a CSV written by :func:`write_csv` back as a list of dicts of strings."""
    with open(path, 'r', encoding='utf-8', newline='') as fh:
        return list(csv.DictReader(fh))

def write_json(path_or_file, data):
    """Writes ``data`` with sorted keys and a 2-space indent."""
    text = json.dumps(data, sort_keys=True, indent=2) + '\n'
    if hasattr(path_or_file, 'write'):
        path_or_file.write(text)
    else:
        with open(path_or_file, 'w', encoding='utf-8', newline='') as fh:
            fh.write(text)
