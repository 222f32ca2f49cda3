"""Image pairs, velocity fields and samples.

These are the value types shared by every other module. They are
immutable after construction: arrays are copied and marked read-only.
Construction rejects only cheap structural errors; everything else is
reported by :func:`validate_sample`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy import ndarray

from .constants import COORDINATE_SCALES, INVALID_FLOW_THRESHOLD, MIN_IMAGE_SIDE, SPLITS


class CaseLabel(str, enum.Enum):
    """Fluid case of a sample."""

    BACKSTEP = 'Backstep'
    JHTDB = 'JHTDB'
    DNS_TURBULENCE = 'DNS-Turbulence'
    CYLINDER = 'Cylinder'
    SQG = 'SQG'
    UNIFORM = 'Uniform'
    OTHER = 'Other'
    UNLABELED = 'Unlabeled'

    def __str__(self) -> str:
        return self.value


def _frozen_array(array, dtype=None) -> ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ImagePair:
    """Two co-registered grayscale particle frames.

    Parameters
    ----------
    frame_a
        First frame as a 2D array with intensities in [0, 1].
    frame_b
        Second frame, same shape as frame_a.
    source_id
        Provenance string.
    """

    frame_a: ndarray
    frame_b: ndarray
    source_id: str = ''

    def __post_init__(self):
        for name in ('frame_a', 'frame_b'):
            array = _frozen_array(getattr(self, name), dtype=np.float64)
            if array.ndim != 2:
                raise ValueError(f'{name} must be a 2D array')
            object.__setattr__(self, name, array)

    @property
    def height(self) -> int:
        """Image height in pixels."""
        return self.frame_a.shape[0]

    @property
    def width(self) -> int:
        """Image width in pixels."""
        return self.frame_a.shape[1]

    @property
    def shape(self):
        """Shape (height, width) of frame_a."""
        return self.frame_a.shape


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Dense per-pixel displacement field in pixels per frame.

    The image-coordinate convention is used: u is positive rightward
    (increasing column) and v is positive downward (increasing row).

    Parameters
    ----------
    u
        Horizontal displacement as a 2D array.
    v
        Vertical displacement as a 2D array.
    coordinate_scale
        1.0 at native resolution, 2.0 in upsampled coordinates.
    valid
        Optional boolean mask, False where the field is unknown.
    """

    u: ndarray
    v: ndarray
    coordinate_scale: float = 1.0
    valid: Optional[ndarray] = field(default=None)

    def __post_init__(self):
        for name in ('u', 'v'):
            array = np.asarray(getattr(self, name))
            if array.dtype.kind != 'f':
                array = array.astype(np.float64)
            array = _frozen_array(array)
            if array.ndim != 2:
                raise ValueError(f'{name} must be a 2D array')
            object.__setattr__(self, name, array)
        if float(self.coordinate_scale) not in COORDINATE_SCALES:
            raise ValueError(f'coordinate_scale={self.coordinate_scale} not supported')
        object.__setattr__(self, 'coordinate_scale', float(self.coordinate_scale))
        if self.valid is not None:
            valid = _frozen_array(self.valid, dtype=bool)
            if valid.shape != self.u.shape:
                raise ValueError('valid mask must have the shape of u')
            object.__setattr__(self, 'valid', valid)

    @classmethod
    def from_array(cls, flow: ndarray, **kwargs) -> VelocityField:
        """Create from an (H, W, 2) array of (u, v)."""
        flow = np.asarray(flow)
        if flow.ndim != 3 or flow.shape[2] != 2:
            raise ValueError('flow must have shape (H, W, 2)')
        return cls(u=flow[..., 0], v=flow[..., 1], **kwargs)

    @classmethod
    def zeros(cls, height: int, width: int, **kwargs) -> VelocityField:
        """Zero field of the given size."""
        return cls(u=np.zeros((height, width)), v=np.zeros((height, width)), **kwargs)

    @property
    def height(self) -> int:
        """Field height in pixels."""
        return self.u.shape[0]

    @property
    def width(self) -> int:
        """Field width in pixels."""
        return self.u.shape[1]

    @property
    def shape(self):
        """Shape (height, width) of u."""
        return self.u.shape

    @property
    def magnitude(self) -> ndarray:
        """Displacement magnitude per pixel."""
        return np.hypot(self.u, self.v)

    def to_array(self) -> ndarray:
        """Stack into an (H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    def valid_mask(self, threshold: float = INVALID_FLOW_THRESHOLD) -> ndarray:
        """Pixels with known, finite flow below the sentinel threshold."""
        mask = np.isfinite(self.u) & np.isfinite(self.v)
        with np.errstate(invalid='ignore'):
            mask &= (np.abs(self.u) <= threshold) & (np.abs(self.v) <= threshold)
        if self.valid is not None:
            mask &= self.valid
        return mask

    def __eq__(self, other) -> bool:
        if not isinstance(other, VelocityField):
            return NotImplemented
        return (
            self.u.shape == other.u.shape
            and self.v.shape == other.v.shape
            and self.u.dtype == other.u.dtype
            and self.v.dtype == other.v.dtype
            and self.u.tobytes() == other.u.tobytes()
            and self.v.tobytes() == other.v.tobytes()
            and self.coordinate_scale == other.coordinate_scale
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FlowSample:
    """An image pair with optional ground truth and dataset labels.

    Parameters
    ----------
    pair
        The image pair.
    gt
        Ground-truth velocity field, or None for real recordings.
    case_label
        The fluid case, converted to CaseLabel.
    split
        One of 'train', 'val', 'test'.
    """

    pair: ImagePair
    gt: Optional[VelocityField] = None
    case_label: CaseLabel = CaseLabel.UNLABELED
    split: str = 'train'

    def __post_init__(self):
        object.__setattr__(self, 'case_label', CaseLabel(self.case_label))
        if self.split not in SPLITS:
            raise ValueError(f'split={self.split} not in {SPLITS}')

    @property
    def sample_id(self) -> str:
        """Identifier of the sample, the pair's source id."""
        return self.pair.source_id


def validate_sample(sample: FlowSample) -> List[str]:
    """Check a sample against the type invariants.

    Parameters
    ----------
    sample
        The sample to check.

    Returns
    -------
    List[str]
        One description per violated invariant; empty if the sample is
        well formed.

    Examples
    --------
    >>> pair = ImagePair(np.zeros((64, 64)), np.zeros((64, 32)))
    >>> validate_sample(FlowSample(pair))
    ['frame shape mismatch']
    """
    violations = list()
    pair = sample.pair
    frame_a, frame_b = pair.frame_a, pair.frame_b

    if frame_a.shape != frame_b.shape:
        violations.append('frame shape mismatch')
    if not (np.all(np.isfinite(frame_a)) and np.all(np.isfinite(frame_b))):
        violations.append('non-finite intensity value')
    else:
        low = min(frame_a.min(initial=0.0), frame_b.min(initial=0.0))
        high = max(frame_a.max(initial=0.0), frame_b.max(initial=0.0))
        if low < 0.0 or high > 1.0:
            violations.append('intensity out of range')
    if min(frame_a.shape + frame_b.shape) < MIN_IMAGE_SIDE:
        violations.append('image too small')

    gt = sample.gt
    if gt is not None:
        if gt.u.shape != gt.v.shape:
            violations.append('flow component shape mismatch')
        if not (np.all(np.isfinite(gt.u)) and np.all(np.isfinite(gt.v))):
            violations.append('non-finite flow value')
        if gt.u.shape != frame_a.shape:
            violations.append('flow shape mismatch')

    return violations
