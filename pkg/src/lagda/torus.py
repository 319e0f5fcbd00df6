"""Geometry helpers for the doubly periodic domain [0, 2*pi)^2."""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_positions(x):
    """Map positions componentwise into [0, 2*pi).

    Args:
        x: array of positions, any shape with coordinates in the last axis
           (or a flat array of coordinates).

    Returns:
        Array of the same shape with every entry in [0, 2*pi).
    """
    return np.mod(x, TWO_PI)


def unwrap_increment(x_new, x_old):
    """Torus-minimal displacement from ``x_old`` to ``x_new``.

    Each component of ``x_new - x_old`` is mapped into (-pi, pi] by adding an
    integer multiple of 2*pi.  The half-open convention resolves the tie at
    exactly pi in favour of +pi.

    Args:
        x_new: wrapped positions, arbitrary shape.
        x_old: wrapped positions, same shape.

    Returns:
        Increment array of the same shape with entries in (-pi, pi].
    """
    delta = np.asarray(x_new, dtype=float) - np.asarray(x_old, dtype=float)
    # mod places the result in [0, 2pi); shifting by pi first gives (-pi, pi]
    # with the +pi tie-break: values at exactly -pi map back to +pi.
    out = np.mod(delta + np.pi, TWO_PI) - np.pi
    return np.where(out == -np.pi, np.pi, out)
