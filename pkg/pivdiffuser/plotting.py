"""Static figures: velocity fields, residual maps and components."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from numpy import ndarray  # noqa: E402

from .fields import VelocityField  # noqa: E402
from .metrics import RESIDUAL_SENTINEL, residual_map  # noqa: E402
from .parameters import ParametersBase  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed PNG metadata keeps files byte-identical across runs
_PNG_METADATA = {'Software': None}


@dataclass
class PlotConfig(ParametersBase):
    """Figure parameters."""

    quiver_stride: int = field(default=8, metadata={'description': 'pixels between drawn vectors'})
    magnitude_colormap: str = field(
        default='viridis', metadata={'description': 'colormap of the velocity magnitude background'}
    )
    residual_colormap: str = field(
        default='inferno', metadata={'description': 'colormap of residual maps'}
    )
    invalid_color: str = field(
        default='white', metadata={'description': 'color of pixels without ground truth'}
    )
    dpi: int = field(default=100, metadata={'description': 'figure resolution'})
    max_figures: int = field(
        default=16, metadata={'description': 'maximum per-sample figures per command'}
    )

    def check_consistency(self) -> None:
        if self.quiver_stride < 1:
            raise ValueError('quiver_stride must be at least 1')
        if self.dpi < 1:
            raise ValueError('dpi must be positive')
        if self.max_figures < 0:
            raise ValueError('max_figures must be nonnegative')
        for name in (self.magnitude_colormap, self.residual_colormap):
            if name not in plt.colormaps():
                raise ValueError(f'unknown colormap {name}')


def _save(fig, filename: Union[str, Path], dpi: int) -> Path:
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(filename, dpi=dpi, metadata=_PNG_METADATA)
    plt.close(fig)
    return filename


def draw_field(ax, flow: VelocityField, cfg: PlotConfig, vmax: float = None):
    """Magnitude background with subsampled vectors on top."""
    magnitude = np.where(flow.valid_mask(), flow.magnitude, np.nan)
    image = ax.imshow(magnitude, cmap=cfg.magnitude_colormap, origin='upper', vmin=0.0, vmax=vmax)
    stride = cfg.quiver_stride
    ys, xs = np.mgrid[stride // 2 : flow.height : stride, stride // 2 : flow.width : stride]
    valid = flow.valid_mask()[ys, xs]
    u = np.where(valid, np.asarray(flow.u)[ys, xs], np.nan)
    v = np.where(valid, np.asarray(flow.v)[ys, xs], np.nan)
    ax.quiver(xs, ys, u, -v, color='white', angles='uv', pivot='mid')
    ax.set_xticks([])
    ax.set_yticks([])
    return image


def draw_residual(ax, residual: ndarray, cfg: PlotConfig, vmax: float = None):
    """Residual map with invalid pixels in the invalid color."""
    cmap = plt.get_cmap(cfg.residual_colormap).copy()
    cmap.set_bad(cfg.invalid_color)
    masked = np.ma.masked_where(residual == RESIDUAL_SENTINEL, residual)
    image = ax.imshow(masked, cmap=cmap, origin='upper', vmin=0.0, vmax=vmax)
    ax.set_xticks([])
    ax.set_yticks([])
    return image


def plot_residual(
    residual: ndarray, filename: Union[str, Path], cfg: PlotConfig = None, title: str = ''
) -> Path:
    """Write a residual map figure with its color scale."""
    cfg = cfg if cfg is not None else PlotConfig()
    fig, ax = plt.subplots(figsize=(5, 4))
    image = draw_residual(ax, residual, cfg)
    fig.colorbar(image, ax=ax, label='|v - v_gt| (px)')
    if title:
        ax.set_title(title)
    return _save(fig, filename, cfg.dpi)


def plot_comparison(
    gt: VelocityField,
    predictions: Dict[str, VelocityField],
    filename: Union[str, Path],
    cfg: PlotConfig = None,
    title: str = '',
) -> Path:
    """
    Ground truth and each method's field next to its absolute residual.

    Rows are ground truth followed by the methods; the left column shows
    vectors over magnitude, the right column the residual. Magnitude and
    residual scales are shared across rows.
    """
    cfg = cfg if cfg is not None else PlotConfig()
    rows = 1 + len(predictions)
    fig, axes = plt.subplots(rows, 2, figsize=(8, 3.5 * rows), squeeze=False)

    valid = gt.valid_mask()
    vmax = float(np.max(gt.magnitude[valid])) if valid.any() else None
    residuals = {name: residual_map(flow, gt) for name, flow in predictions.items()}
    residual_max = max((float(np.max(r)) for r in residuals.values()), default=0.0) or None

    image = draw_field(axes[0, 0], gt, cfg, vmax=vmax)
    axes[0, 0].set_title('ground truth')
    fig.colorbar(image, ax=axes[0, 0], label='|v| (px)')
    axes[0, 1].axis('off')

    for row, (name, flow) in enumerate(predictions.items(), start=1):
        image = draw_field(axes[row, 0], flow, cfg, vmax=vmax)
        axes[row, 0].set_title(name)
        fig.colorbar(image, ax=axes[row, 0], label='|v| (px)')
        image = draw_residual(axes[row, 1], residuals[name], cfg, vmax=residual_max)
        axes[row, 1].set_title(f'{name} residual')
        fig.colorbar(image, ax=axes[row, 1], label='|v - v_gt| (px)')

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, filename, cfg.dpi)


def plot_components(
    gt: VelocityField,
    pred: VelocityField,
    filename: Union[str, Path],
    cfg: PlotConfig = None,
) -> Path:
    """u and v of ground truth, prediction and their difference."""
    cfg = cfg if cfg is not None else PlotConfig()
    fig, axes = plt.subplots(2, 3, figsize=(10, 6), squeeze=False)
    valid = gt.valid_mask()
    for row, name in enumerate(('u', 'v')):
        truth = np.where(valid, np.asarray(getattr(gt, name), dtype=np.float64), np.nan)
        estimate = np.asarray(getattr(pred, name), dtype=np.float64)
        limit = float(np.nanmax(np.abs(truth))) if valid.any() else 1.0
        limit = limit or 1.0
        panels = (('ground truth', truth, limit), ('prediction', estimate, limit))
        for column, (label, values, scale) in enumerate(panels):
            image = axes[row, column].imshow(values, cmap='RdBu_r', vmin=-scale, vmax=scale)
            axes[row, column].set_title(f'{name} {label}')
            fig.colorbar(image, ax=axes[row, column])
        difference = estimate - truth
        image = axes[row, 2].imshow(difference, cmap='RdBu_r')
        axes[row, 2].set_title(f'{name} difference')
        fig.colorbar(image, ax=axes[row, 2])
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, filename, cfg.dpi)
