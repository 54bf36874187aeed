"""Haar transforms under the averaging convention.

A parent scale coefficient is the mean of its children; each detail is
the signed mean of the children, with the sign of child ``o`` for detail
``m`` equal to ``(-1) ** popcount(o & m)``.  Child octant ``o`` selects the
upper half along axis ``k`` when bit ``k`` is set (bit 0 = x, 1 = y,
2 = z).  Details of one 3D node are stored in mask order ``m = 1..7``.
"""

from __future__ import annotations

import numpy as np

# SIGNS[o, m] = (-1) ** popcount(o & m); row = child octant, column = mask
SIGNS = np.array(
    [[(-1) ** bin(o & m).count("1") for m in range(8)] for o in range(8)],
    dtype=np.float64,
)
# child octant -> integer offset along each axis
OCTANT_OFFSETS = np.array([[(o >> k) & 1 for k in range(3)] for o in range(8)], dtype=np.int64)


def lift_forward_3d(children):
    """Analyse blocks of 8 children into (parent, details).

    ``children`` has shape ``(..., 8)``; returns ``parent`` with shape
    ``(...)`` and ``details`` with shape ``(..., 7)``.
    """
    children = np.asarray(children, dtype=np.float64)
    if children.shape[-1] != 8:
        raise ValueError(f"expected trailing axis of length 8, got {children.shape}")
    coeffs = children @ SIGNS / 8.0
    return coeffs[..., 0], coeffs[..., 1:]


def lift_backward_3d(parent, details):
    """Synthesize the 8 children of each (parent, details) pair."""
    parent = np.asarray(parent, dtype=np.float64)
    details = np.asarray(details, dtype=np.float64)
    if details.shape[-1] != 7:
        raise ValueError(f"expected trailing axis of length 7, got {details.shape}")
    # SIGNS is symmetric and SIGNS @ SIGNS = 8 I
    return parent[..., None] + details @ SIGNS[:, 1:].T


def child_offsets(details):
    """Child values minus parent value, shape ``(..., 8)``."""
    return np.asarray(details, dtype=np.float64) @ SIGNS[:, 1:].T


def _check_signal(signal, levels):
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    n = signal.shape[0]
    if n == 0 or n & (n - 1):
        raise ValueError(f"signal length must be a power of two, got {n}")
    max_levels = n.bit_length() - 1
    if levels is None:
        levels = max_levels
    if not 0 <= levels <= max_levels:
        raise ValueError(f"levels must be in [0, {max_levels}] for length {n}, got {levels}")
    return signal, levels


def fwt_1d(signal, levels=None):
    """Multi-level 1D Haar analysis.

    Returns ``(coarse, details)`` where ``details[0]`` is the finest level.
    Linear in the signal length.
    """
    current, levels = _check_signal(signal, levels)
    details = []
    for _ in range(levels):
        even, odd = current[0::2], current[1::2]
        details.append((even - odd) / 2.0)
        current = (even + odd) / 2.0
    return current, details


def ifwt_1d(coarse, details):
    """Inverse of :func:`fwt_1d`."""
    current = np.asarray(coarse, dtype=np.float64)
    for d in reversed(details):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != current.shape:
            raise ValueError(f"detail level of shape {d.shape} does not match coarse {current.shape}")
        out = np.empty(2 * current.shape[0])
        out[0::2] = current + d
        out[1::2] = current - d
        current = out
    n = current.shape[0]
    if n & (n - 1):
        raise ValueError(f"reconstructed length {n} is not a power of two")
    return current
