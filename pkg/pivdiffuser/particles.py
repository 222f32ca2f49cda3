"""Tracer particles."""
from __future__ import annotations

from typing import Dict, Tuple

import numba
import numpy as np
from numpy import ndarray
from scipy import ndimage

from .fields import VelocityField

# Gaussian blobs are truncated at this many standard deviations
TRUNCATION_SIGMAS = 4.0


class Particles:
    """Tracer particles in image coordinates.

    Positions are (x, y) with pixel (row, col) covering
    [col, col + 1) x [row, row + 1).
    """

    _required_arrays = [
        'position',
        'peak_intensity',
    ]

    def __init__(self):
        self.arrays: Dict[str, ndarray] = {arr: None for arr in self._required_arrays}

    def __len__(self):
        """Total number of particles."""
        if self.arrays['position'] is None:
            return 0
        return len(self.arrays['position'])

    @property
    def position(self) -> ndarray:
        """Particle positions as an (N, 2) array of (x, y)."""
        return self.arrays['position']

    @property
    def peak_intensity(self) -> ndarray:
        """Particle peak intensities as an (N,) array."""
        return self.arrays['peak_intensity']

    def add_particles(self, position: ndarray, peak_intensity: ndarray) -> Particles:
        """Add particles.

        Parameters
        ----------
        position : (N, 2) ndarray
            The particle positions (x, y).
        peak_intensity : (N,) ndarray
            The particle peak intensities.
        """
        if position.ndim != 2 or position.shape[1] != 2:
            raise ValueError('position wrong shape, must be (N, 2)')
        if peak_intensity.ndim != 1:
            raise ValueError('peak_intensity wrong shape, must be (N,)')
        if position.shape[0] != peak_intensity.size:
            raise ValueError('position and peak_intensity must have the same number of particles')

        for name, array in zip(self._required_arrays, [position, peak_intensity]):
            if self.arrays[name] is not None:
                self.arrays[name] = np.append(self.arrays[name], array, axis=0)
            else:
                self.arrays[name] = array
        return self

    def in_bounds(self, height: int, width: int) -> ndarray:
        """Mask of particles whose center lies inside the image."""
        x, y = self.position[:, 0], self.position[:, 1]
        return (x >= 0) & (x < width) & (y >= 0) & (y < height)

    def advect(self, flow: VelocityField) -> Particles:
        """Particles moved by the flow sampled bilinearly at their positions.

        Parameters
        ----------
        flow
            The displacement field.

        Returns
        -------
        Particles
            New particles at x + flow(x), same intensities.
        """
        x, y = self.position[:, 0], self.position[:, 1]
        coords = np.stack([y - 0.5, x - 0.5])
        du = ndimage.map_coordinates(np.asarray(flow.u, dtype=np.float64), coords, order=1, mode='nearest')
        dv = ndimage.map_coordinates(np.asarray(flow.v, dtype=np.float64), coords, order=1, mode='nearest')
        moved = Particles()
        moved.add_particles(
            position=np.stack([x + du, y + dv], axis=1),
            peak_intensity=self.peak_intensity.copy(),
        )
        return moved

    def render(
        self, height: int, width: int, sigma: float, background: float = 0.0
    ) -> ndarray:
        """Render in-bounds particles as Gaussian blobs.

        Parameters
        ----------
        height, width
            Image size in pixels.
        sigma
            Gaussian standard deviation in pixels.
        background
            Constant background intensity.

        Returns
        -------
        ndarray
            Image clipped to [0, 1].
        """
        mask = self.in_bounds(height, width)
        image = _render_gaussian_blobs(
            np.ascontiguousarray(self.position[mask, 0]),
            np.ascontiguousarray(self.position[mask, 1]),
            np.ascontiguousarray(self.peak_intensity[mask]),
            float(sigma),
            height,
            width,
            float(background),
        )
        return np.clip(image, 0.0, 1.0)


def uniform_distribution(
    *,
    number_of_particles: int,
    height: int,
    width: int,
    intensity_range: Tuple[float, float],
    rng: np.random.Generator,
) -> Tuple[ndarray, ndarray]:
    """Seed particles uniformly at random over an image.

    Parameters
    ----------
    number_of_particles
        The number of particles.
    height, width
        Image size in pixels.
    intensity_range
        Peak intensities are drawn uniformly from this range.
    rng
        The random generator. Positions are drawn before intensities.

    Returns
    -------
    position : (N, 2) ndarray
        The particle positions (x, y).
    peak_intensity : (N,) ndarray
        The particle peak intensities.
    """
    position = rng.uniform(size=(number_of_particles, 2)) * np.array([width, height])
    low, high = intensity_range
    peak_intensity = rng.uniform(low, high, size=number_of_particles)
    return position, peak_intensity


@numba.njit(cache=True)
def _render_gaussian_blobs(xs, ys, intensities, sigma, height, width, background):
    image = np.full((height, width), background)
    radius = TRUNCATION_SIGMAS * sigma
    radius2 = radius * radius
    two_sigma2 = 2.0 * sigma * sigma
    for i in range(xs.size):
        x0, y0 = xs[i], ys[i]
        col_min = max(int(np.ceil(x0 - 0.5 - radius)), 0)
        col_max = min(int(np.floor(x0 - 0.5 + radius)), width - 1)
        row_min = max(int(np.ceil(y0 - 0.5 - radius)), 0)
        row_max = min(int(np.floor(y0 - 0.5 + radius)), height - 1)
        for row in range(row_min, row_max + 1):
            dy = row + 0.5 - y0
            for col in range(col_min, col_max + 1):
                dx = col + 0.5 - x0
                d2 = dx * dx + dy * dy
                if d2 <= radius2:
                    image[row, col] += intensities[i] * np.exp(-d2 / two_sigma2)
    return image
