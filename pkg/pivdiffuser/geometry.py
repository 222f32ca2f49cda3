"""Geometry utilities.

Coordinate transformations between image (Cartesian) and polar
coordinates about a center, for positions and displacements.
"""

from typing import Optional, Tuple

import numpy as np
from numpy import ndarray


def pixel_centers(height: int, width: int) -> Tuple[ndarray, ndarray]:
    """Coordinates of pixel centers.

    Pixel (row, col) has its center at x = col + 0.5, y = row + 0.5.

    Returns
    -------
    x, y : ndarray
        Arrays of shape (height, width).
    """
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return x + 0.5, y + 0.5


def cartesian_to_polar(
    x: ndarray, y: ndarray, center: Tuple[float, float] = (0.0, 0.0)
) -> Tuple[ndarray, ndarray]:
    """
    Transform positions to polar coordinates about a center.

    Parameters
    ----------
    x, y
        Positions in image coordinates.
    center
        The center (x, y).

    Returns
    -------
    r, phi : ndarray
        Radius and angle. The angle increases from the x axis toward
        the y axis, which is clockwise on screen since y points down.
    """
    dx, dy = x - center[0], y - center[1]
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def polar_to_cartesian_velocity(
    phi: ndarray, v_r: Optional[ndarray] = None, v_phi: Optional[ndarray] = None
) -> Tuple[ndarray, ndarray]:
    """
    Transform radial and tangential displacement to (u, v).

    Parameters
    ----------
    phi
        The polar angle of each point.
    v_r, optional
        Radial displacement. Default zero.
    v_phi, optional
        Tangential displacement along increasing phi. Default zero.

    Returns
    -------
    u, v : ndarray
        Displacement components in image coordinates.
    """
    if v_r is None:
        v_r = np.zeros_like(phi)
    if v_phi is None:
        v_phi = np.zeros_like(phi)
    cos, sin = np.cos(phi), np.sin(phi)
    return v_r * cos - v_phi * sin, v_r * sin + v_phi * cos
