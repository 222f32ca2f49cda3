"""Window-deformation multipass cross-correlation.

Each pass interrogates a grid of windows, rejects outliers with the
normalized median test, fills them by linear interpolation, and warps
the second frame by the dense predictor before the next, finer pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple, Union

import numba
import numpy as np
from numpy import ndarray
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, interpolate, ndimage

from .exceptions import ImageTooSmall
from .fields import ImagePair, VelocityField
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_SUBPIXEL_FITS = ('gaussian', 'parabolic')

# Windows with intensity std below this carry no displacement signal
_FLAT_WINDOW_STD = 1e-12

# Half-width of the region around the highest peak excluded when
# searching for the second peak
_PEAK_EXCLUSION = 2


@dataclass
class WidimConfig(ParametersBase):
    """Cross-correlation baseline parameters."""

    window_sizes: Tuple[int, ...] = field(
        default=(64, 32, 16),
        metadata={'description': 'window side per pass in pixels, decreasing powers of two'},
    )
    overlap_fraction: float = field(
        default=0.5, metadata={'description': 'window overlap fraction, in [0, 0.75]'}
    )
    refinement_passes: int = field(
        default=1, metadata={'description': 'extra passes at the smallest window size'}
    )
    subpixel_fit: str = field(
        default='gaussian', metadata={'description': 'three-point peak fit: gaussian or parabolic'}
    )
    outlier_threshold: float = field(
        default=2.0, metadata={'description': 'normalized median test threshold'}
    )
    median_epsilon: float = field(
        default=0.1, metadata={'description': 'added to the median residual in pixels'}
    )

    def check_consistency(self) -> None:
        sizes = self.window_sizes
        if len(sizes) == 0:
            raise ValueError('window_sizes must not be empty')
        for size in sizes:
            if size < 8 or size & (size - 1):
                raise ValueError(f'window size {size} is not a power of two >= 8')
        if any(a <= b for a, b in zip(sizes[:-1], sizes[1:])):
            raise ValueError('window_sizes must be decreasing')
        if not 0.0 <= self.overlap_fraction <= 0.75:
            raise ValueError('overlap_fraction must be in [0, 0.75]')
        if self.refinement_passes < 0:
            raise ValueError('refinement_passes must be nonnegative')
        if self.subpixel_fit not in _SUBPIXEL_FITS:
            raise ValueError(f'subpixel_fit={self.subpixel_fit} not available')
        if self.outlier_threshold <= 0:
            raise ValueError('outlier_threshold must be positive')
        if self.median_epsilon <= 0:
            raise ValueError('median_epsilon must be positive')


class CorrelationPeak(NamedTuple):
    """Displacement of one interrogation window."""

    dx: float
    dy: float
    peak_ratio: float
    valid: bool


def correlate_window(
    win_a: ndarray, win_b: ndarray, subpixel_fit: str = 'gaussian'
) -> CorrelationPeak:
    """
    Displacement between two interrogation windows.

    The windows are mean-subtracted and cross-correlated circularly via
    FFT. The integer peak is refined per axis with a three-point fit.

    Parameters
    ----------
    win_a, win_b
        Equal square windows, side at least 8.
    subpixel_fit
        'gaussian' or 'parabolic'.

    Returns
    -------
    CorrelationPeak
        Displacement of win_b relative to win_a, and the ratio of the
        highest to the second-highest correlation peak. A window with
        zero variance gives an invalid peak with NaN displacement.

    Examples
    --------
    >>> win_b = np.roll(win_a, (-2, 3), axis=(0, 1))
    >>> correlate_window(win_a, win_b)[:2]
    (3.0, -2.0)
    """
    win_a = np.asarray(win_a, dtype=np.float64)
    win_b = np.asarray(win_b, dtype=np.float64)
    if win_a.shape != win_b.shape:
        raise ValueError('windows must have equal shapes')
    if win_a.ndim != 2 or win_a.shape[0] != win_a.shape[1] or win_a.shape[0] < 8:
        raise ValueError('windows must be square with side >= 8')
    dx, dy, ratio, valid = correlate_windows(win_a[None], win_b[None], subpixel_fit)
    return CorrelationPeak(float(dx[0]), float(dy[0]), float(ratio[0]), bool(valid[0]))


def correlate_windows(
    windows_a: ndarray, windows_b: ndarray, subpixel_fit: str = 'gaussian'
) -> Tuple[ndarray, ndarray, ndarray, ndarray]:
    """Vectorized correlate_window over a stack of (n, N, N) windows.

    Returns
    -------
    dx, dy, peak_ratio, valid : ndarray
        Arrays of shape (n,).
    """
    if subpixel_fit not in _SUBPIXEL_FITS:
        raise ValueError(f'subpixel_fit={subpixel_fit} not available')
    number, size, _ = windows_a.shape

    a = windows_a - windows_a.mean(axis=(1, 2), keepdims=True)
    b = windows_b - windows_b.mean(axis=(1, 2), keepdims=True)
    flat = (a.std(axis=(1, 2)) < _FLAT_WINDOW_STD) | (b.std(axis=(1, 2)) < _FLAT_WINDOW_STD)

    spectrum = np.conj(fft.rfft2(a)) * fft.rfft2(b)
    planes = fft.fftshift(fft.irfft2(spectrum, s=(size, size)), axes=(1, 2))

    index = np.arange(number)
    peak = planes.reshape(number, -1).argmax(axis=1)
    row, col = np.unravel_index(peak, (size, size))
    c0 = planes[index, row, col]
    dy = row - size // 2 + _subpixel_offset(
        planes[index, (row - 1) % size, col], c0, planes[index, (row + 1) % size, col], subpixel_fit
    )
    dx = col - size // 2 + _subpixel_offset(
        planes[index, row, (col - 1) % size], c0, planes[index, row, (col + 1) % size], subpixel_fit
    )

    masked = planes.copy()
    for offset_row in range(-_PEAK_EXCLUSION, _PEAK_EXCLUSION + 1):
        for offset_col in range(-_PEAK_EXCLUSION, _PEAK_EXCLUSION + 1):
            masked[index, (row + offset_row) % size, (col + offset_col) % size] = -np.inf
    second = masked.reshape(number, -1).max(axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        peak_ratio = np.where(second > 0, c0 / np.where(second > 0, second, 1.0), np.inf)

    valid = ~flat & (c0 > 0)
    dx = np.where(valid, dx, np.nan)
    dy = np.where(valid, dy, np.nan)
    peak_ratio = np.where(valid, peak_ratio, 0.0)
    if flat.any():
        logger.debug('%d flat windows', int(flat.sum()))
    return dx, dy, peak_ratio, valid


def _subpixel_offset(c_minus: ndarray, c0: ndarray, c_plus: ndarray, subpixel_fit: str) -> ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        parabolic = (c_minus - c_plus) / (2 * c_minus - 4 * c0 + 2 * c_plus)
        if subpixel_fit == 'gaussian':
            positive = (c_minus > 0) & (c0 > 0) & (c_plus > 0)
            log_minus = np.log(np.where(positive, c_minus, 1.0))
            log_0 = np.log(np.where(positive, c0, 1.0))
            log_plus = np.log(np.where(positive, c_plus, 1.0))
            gaussian = (log_minus - log_plus) / (2 * log_minus - 4 * log_0 + 2 * log_plus)
            offset = np.where(positive, gaussian, parabolic)
        else:
            offset = parabolic
    offset = np.where(np.isfinite(offset), offset, 0.0)
    return np.clip(offset, -1.0, 1.0)


def normalized_median_filter(
    grid_field: Union[ndarray, VelocityField], threshold: float = 2.0, epsilon: float = 0.1
) -> ndarray:
    """
    Normalized median test on a vector grid.

    A vector is invalid when, for either component, its deviation from
    the median of its (up to 8) neighbours divided by the median
    neighbour residual plus epsilon exceeds the threshold. NaN vectors
    are invalid and ignored as neighbours.

    Parameters
    ----------
    grid_field
        (ny, nx, 2) array of (u, v) or a VelocityField, at least 3x3.
    threshold
        Test threshold; np.inf accepts every finite vector.
    epsilon
        Added to the median residual, in pixels.

    Returns
    -------
    ndarray
        Boolean validity mask of shape (ny, nx).
    """
    if isinstance(grid_field, VelocityField):
        grid_field = grid_field.to_array()
    grid_field = np.asarray(grid_field, dtype=np.float64)
    if grid_field.ndim != 3 or grid_field.shape[2] != 2:
        raise ValueError('grid_field must have shape (ny, nx, 2)')
    if grid_field.shape[0] < 3 or grid_field.shape[1] < 3:
        raise ValueError('grid must be at least 3x3')

    residual = np.maximum(
        _normalized_median_residual(np.ascontiguousarray(grid_field[..., 0]), epsilon),
        _normalized_median_residual(np.ascontiguousarray(grid_field[..., 1]), epsilon),
    )
    finite = np.isfinite(grid_field).all(axis=2)
    return finite & (residual <= threshold)


@numba.njit(cache=True)
def _normalized_median_residual(values, epsilon):
    ny, nx = values.shape
    out = np.full((ny, nx), np.inf)
    neighbours = np.empty(8)
    residuals = np.empty(8)
    for i in range(ny):
        for j in range(nx):
            center = values[i, j]
            if np.isnan(center):
                continue
            n = 0
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    if di == 0 and dj == 0:
                        continue
                    ii, jj = i + di, j + dj
                    if ii < 0 or ii >= ny or jj < 0 or jj >= nx:
                        continue
                    value = values[ii, jj]
                    if not np.isnan(value):
                        neighbours[n] = value
                        n += 1
            if n == 0:
                out[i, j] = 0.0
                continue
            median = np.median(neighbours[:n])
            for k in range(n):
                residuals[k] = abs(neighbours[k] - median)
            out[i, j] = abs(center - median) / (np.median(residuals[:n]) + epsilon)
    return out


def widim_estimate(pair: ImagePair, cfg: WidimConfig = None) -> VelocityField:
    """
    Dense displacement by window-deformation multipass correlation.

    Parameters
    ----------
    pair
        The image pair.
    cfg, optional
        The baseline config. Default WidimConfig().

    Returns
    -------
    VelocityField
        Dense field of the image's shape, bilinearly interpolated from
        the final vector grid.
    """
    if cfg is None:
        cfg = WidimConfig()
    cfg.check_consistency()
    height, width = pair.shape
    if pair.frame_b.shape != pair.shape:
        raise ValueError('frames must have equal shapes')
    if min(height, width) < cfg.window_sizes[0]:
        raise ImageTooSmall(
            f'image {height}x{width} smaller than window {cfg.window_sizes[0]}'
        )

    frame_a = pair.frame_a
    frame_b = pair.frame_b
    predictor = np.zeros((height, width, 2))
    passes = list(cfg.window_sizes) + [cfg.window_sizes[-1]] * cfg.refinement_passes

    for number, window in enumerate(passes):
        spacing = max(1, int(round(window * (1 - cfg.overlap_fraction))))
        rows = np.arange(0, height - window + 1, spacing)
        cols = np.arange(0, width - window + 1, spacing)
        centers_y = rows + (window - 1) / 2
        centers_x = cols + (window - 1) / 2

        deformed = frame_b if number == 0 else deform_frame(frame_b, predictor)
        windows_a = sliding_window_view(frame_a, (window, window))[rows][:, cols]
        windows_b = sliding_window_view(deformed, (window, window))[rows][:, cols]
        shape = windows_a.shape[:2]
        dx, dy, _, valid = correlate_windows(
            windows_a.reshape(-1, window, window),
            windows_b.reshape(-1, window, window),
            cfg.subpixel_fit,
        )

        grid_y, grid_x = np.meshgrid(centers_y, centers_x, indexing='ij')
        coords = np.stack([grid_y.ravel(), grid_x.ravel()])
        grid = np.empty(shape + (2,))
        for component, residual in enumerate((dx, dy)):
            base = ndimage.map_coordinates(predictor[..., component], coords, order=1, mode='nearest')
            grid[..., component] = (base + residual).reshape(shape)

        valid = valid.reshape(shape)
        if min(shape) >= 3:
            valid &= normalized_median_filter(grid, cfg.outlier_threshold, cfg.median_epsilon)
        grid = fill_invalid(grid, valid)
        logger.debug(
            'pass %d: window %d, grid %dx%d, %d invalid',
            number, window, shape[0], shape[1], int((~valid).sum()),
        )
        predictor = grid_to_dense(grid, centers_y, centers_x, height, width)

    return VelocityField(u=predictor[..., 0], v=predictor[..., 1])


def deform_frame(frame: ndarray, displacement: ndarray) -> ndarray:
    """Sample frame at x + displacement(x) with bilinear interpolation.

    Parameters
    ----------
    frame
        2D image.
    displacement
        (H, W, 2) array of (u, v).
    """
    rows, cols = np.mgrid[0 : frame.shape[0], 0 : frame.shape[1]].astype(np.float64)
    coords = np.stack([rows + displacement[..., 1], cols + displacement[..., 0]])
    return ndimage.map_coordinates(frame, coords, order=1, mode='nearest')


def fill_invalid(grid: ndarray, valid: ndarray) -> ndarray:
    """Replace invalid vectors by linear interpolation from valid ones.

    Vectors outside the convex hull of valid ones take the nearest
    valid value. With no valid vectors the grid becomes zero.
    """
    if valid.all():
        return grid
    filled = grid.copy()
    if not valid.any():
        logger.warning('no valid vectors in pass, resetting to zero')
        filled[:] = 0.0
        return filled

    points = np.argwhere(valid)
    targets = np.argwhere(~valid)
    for component in range(2):
        values = grid[..., component][valid]
        nearest = interpolate.griddata(points, values, targets, method='nearest')
        try:
            linear = interpolate.griddata(points, values, targets, method='linear')
        except (RuntimeError, ValueError):
            linear = nearest
        filled[~valid, component] = np.where(np.isfinite(linear), linear, nearest)
    return filled


def grid_to_dense(
    grid: ndarray, centers_y: ndarray, centers_x: ndarray, height: int, width: int
) -> ndarray:
    """Bilinear interpolation of a vector grid to every pixel.

    Pixels outside the grid of window centers take the value at the
    nearest edge of the grid.
    """
    centers_y, grid = _at_least_two(centers_y, grid, axis=0)
    centers_x, grid = _at_least_two(centers_x, grid, axis=1)
    rows = np.clip(np.arange(height, dtype=np.float64), centers_y[0], centers_y[-1])
    cols = np.clip(np.arange(width, dtype=np.float64), centers_x[0], centers_x[-1])
    query_y, query_x = np.meshgrid(rows, cols, indexing='ij')
    points = np.stack([query_y.ravel(), query_x.ravel()], axis=1)
    dense = np.empty((height, width, 2))
    for component in range(2):
        interpolator = interpolate.RegularGridInterpolator(
            (centers_y, centers_x), grid[..., component], method='linear'
        )
        dense[..., component] = interpolator(points).reshape(height, width)
    return dense


def _at_least_two(centers: ndarray, grid: ndarray, axis: int):
    if centers.size >= 2:
        return centers, grid
    return np.append(centers, centers[0] + 1.0), np.concatenate([grid, grid], axis=axis)
