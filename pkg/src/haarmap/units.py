"""Quantities with explicit units in configuration files.

Lengths and angles must carry a unit suffix (``"5 cm"``, ``"0.3 deg"``); a
bare number is rejected so that a forgotten unit can never be read silently
as meters or radians.
"""

from __future__ import annotations

import re

import numpy as np

LENGTH_UNITS = {"m": 1.0, "cm": 0.01, "mm": 0.001, "km": 1000.0}
ANGLE_UNITS = {"rad": 1.0, "deg": np.pi / 180.0}
INVERSE_LENGTH_UNITS = {"1/m": 1.0, "1/cm": 100.0}
TIME_UNITS = {"s": 1.0, "ms": 0.001}
KINDS = {"length": LENGTH_UNITS, "angle": ANGLE_UNITS, "inverse_length": INVERSE_LENGTH_UNITS, "time": TIME_UNITS}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf)\s*(1/[A-Za-z]+|[A-Za-z]+)\s*$")


class UnitError(ValueError):
    pass


def parse_quantity(value, kind="length", field="value"):
    """Convert ``"<number> <unit>"`` to SI (meters, radians, 1/m)."""
    table = KINDS[kind]
    if isinstance(value, bool) or not isinstance(value, str):
        raise UnitError(f"{field}: expected a {kind} with explicit unit (e.g. '0.05 m'), got {value!r}")
    m = _QUANTITY.match(value)
    if not m:
        raise UnitError(f"{field}: cannot parse {kind} {value!r}")
    number, unit = m.groups()
    if unit not in table:
        raise UnitError(f"{field}: unknown {kind} unit {unit!r} (allowed: {', '.join(table)})")
    return float(number) * table[unit]


def parse_vector(value, kind="length", field="value", size=3):
    """A vector as a list of quantities or a single ``"x y z <unit>"`` string."""
    if isinstance(value, str):
        parts = value.replace(",", " ").split()
        if len(parts) != size + 1:
            raise UnitError(f"{field}: expected {size} numbers and a unit, got {value!r}")
        unit = parts[-1]
        return np.array([parse_quantity(f"{p} {unit}", kind, field) for p in parts[:-1]])
    if not isinstance(value, (list, tuple)) or len(value) != size:
        raise UnitError(f"{field}: expected {size} quantities, got {value!r}")
    return np.array([parse_quantity(v, kind, f"{field}[{i}]") for i, v in enumerate(value)])


def format_quantity(value, unit="m"):
    table = {**LENGTH_UNITS, **ANGLE_UNITS, **INVERSE_LENGTH_UNITS, **TIME_UNITS}
    return f"{value / table[unit]!r} {unit}"
