"""Flow accuracy metrics.

All metrics are means over the valid pixels of the ground truth: finite,
below the unknown-flow sentinel threshold, and outside the border crop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from numpy import ndarray

from .constants import INVALID_FLOW_THRESHOLD
from .exceptions import EmptyValidSet, ShapeMismatch
from .fields import VelocityField
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_POOLING = ('sample', 'pixel')

# Marks invalid pixels in residual maps
RESIDUAL_SENTINEL = -1.0

FlowLike = Union[VelocityField, ndarray]


@dataclass
class MetricOptions(ParametersBase):
    """Metric evaluation options."""

    aae_epsilon: float = field(
        default=1e-12, metadata={'description': 'vectors shorter than this are excluded from AAE'}
    )
    invalid_value_threshold: float = field(
        default=INVALID_FLOW_THRESHOLD,
        metadata={'description': 'gt components above this magnitude are unknown'},
    )
    border_crop: int = field(
        default=0, metadata={'description': 'pixels excluded from each image edge'}
    )
    pooling: str = field(
        default='sample',
        metadata={'description': 'overall aggregation: sample (mean of sample metrics) or pixel'},
    )

    def check_consistency(self) -> None:
        if self.aae_epsilon <= 0:
            raise ValueError('aae_epsilon must be positive')
        if self.invalid_value_threshold <= 0:
            raise ValueError('invalid_value_threshold must be positive')
        if self.border_crop < 0:
            raise ValueError('border_crop must be nonnegative')
        if self.pooling not in _POOLING:
            raise ValueError(f'pooling={self.pooling} not available')


def _components(flow: FlowLike) -> Tuple[ndarray, ndarray]:
    if isinstance(flow, VelocityField):
        return np.asarray(flow.u, dtype=np.float64), np.asarray(flow.v, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeMismatch(f'expected flow of shape (2, H, W), got {flow.shape}')
    return flow[0], flow[1]


def valid_pixels(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> ndarray:
    """Boolean mask of pixels the metrics average over."""
    opts = opts if opts is not None else MetricOptions()
    gt_u, gt_v = _components(gt)
    pred_u, pred_v = _components(pred)
    for component in (pred_u, pred_v, gt_v):
        if component.shape != gt_u.shape:
            raise ShapeMismatch(f'component shape {component.shape} != gt shape {gt_u.shape}')

    if isinstance(gt, VelocityField):
        mask = gt.valid_mask(opts.invalid_value_threshold)
    else:
        mask = np.isfinite(gt_u) & np.isfinite(gt_v)
        with np.errstate(invalid='ignore'):
            mask &= (np.abs(gt_u) <= opts.invalid_value_threshold) & (
                np.abs(gt_v) <= opts.invalid_value_threshold
            )
    crop = opts.border_crop
    if crop:
        border = np.ones_like(mask)
        border[crop:-crop, crop:-crop] = False
        mask = mask & ~border
    return mask


def endpoint_errors(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> ndarray:
    """Per-pixel error norms at the valid pixels, flattened."""
    mask = valid_pixels(pred, gt, opts)
    if not mask.any():
        raise EmptyValidSet('no valid pixels')
    pred_u, pred_v = _components(pred)
    gt_u, gt_v = _components(gt)
    return np.hypot(pred_u[mask] - gt_u[mask], pred_v[mask] - gt_v[mask])


def aee(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> float:
    """
    Average end-point error.

    Parameters
    ----------
    pred
        Estimated flow.
    gt
        Ground-truth flow.
    opts, optional
        Metric options.

    Returns
    -------
    float
        Mean Euclidean norm of pred - gt, pixels per frame.

    Examples
    --------
    >>> aee(VelocityField.from_array(np.full((4, 4, 2), [3.0, 4.0])),
    ...     VelocityField.zeros(4, 4))
    5.0
    """
    return float(np.mean(endpoint_errors(pred, gt, opts)))


def rmse(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> float:
    """Root mean square of the per-pixel error norms."""
    errors = endpoint_errors(pred, gt, opts)
    return float(np.sqrt(np.mean(errors ** 2)))


def angular_errors(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> Tuple[ndarray, int]:
    """
    Per-pixel angles between pred and gt, excluding zero vectors.

    Returns
    -------
    angles : ndarray
        Angles in radians at valid pixels where both norms reach
        aae_epsilon.
    excluded : int
        Number of valid pixels skipped for a zero-length vector.
    """
    opts = opts if opts is not None else MetricOptions()
    mask = valid_pixels(pred, gt, opts)
    pred_u, pred_v = (component[mask] for component in _components(pred))
    gt_u, gt_v = (component[mask] for component in _components(gt))

    pred_norm = np.hypot(pred_u, pred_v)
    gt_norm = np.hypot(gt_u, gt_v)
    kept = (pred_norm >= opts.aae_epsilon) & (gt_norm >= opts.aae_epsilon)
    excluded = int(np.count_nonzero(~kept))

    dot = pred_u[kept] * gt_u[kept] + pred_v[kept] * gt_v[kept]
    cosine = dot / (pred_norm[kept] * gt_norm[kept])
    return np.arccos(np.clip(cosine, -1.0, 1.0)), excluded


def aae_with_tally(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> Tuple[float, int]:
    """Average angular error and the number of excluded pixels."""
    angles, excluded = angular_errors(pred, gt, opts)
    if angles.size == 0:
        raise EmptyValidSet('all pixels excluded from angular error')
    if excluded:
        logger.debug('%d zero-vector pixels excluded from AAE', excluded)
    return float(np.mean(angles)), excluded


def aae(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> float:
    """Average angular error in radians."""
    return aae_with_tally(pred, gt, opts)[0]


def residual_map(pred: FlowLike, gt: FlowLike, opts: MetricOptions = None) -> ndarray:
    """
    Per-pixel error norm.

    Returns
    -------
    ndarray
        Shape (H, W), nonnegative at valid pixels and RESIDUAL_SENTINEL
        elsewhere.
    """
    mask = valid_pixels(pred, gt, opts)
    pred_u, pred_v = _components(pred)
    gt_u, gt_v = _components(gt)
    residual = np.full(mask.shape, RESIDUAL_SENTINEL)
    residual[mask] = np.hypot(pred_u[mask] - gt_u[mask], pred_v[mask] - gt_v[mask])
    return residual
