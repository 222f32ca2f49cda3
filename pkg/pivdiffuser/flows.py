"""Analytic ground-truth flows."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from numpy import ndarray

from . import geometry
from .defaults import FLOW_KINDS, FLOW_PARAMETERS
from .fields import VelocityField


@dataclass(frozen=True)
class AnalyticFlow:
    """A closed-form displacement field.

    Parameters
    ----------
    kind
        One of 'uniform', 'rotation', 'shear', 'lamb_oseen_vortex',
        'cellular'.
    parameters
        Kind-specific parameters; missing ones take the defaults in
        pivdiffuser.defaults.FLOW_PARAMETERS.

    Examples
    --------
    A Lamb-Oseen vortex in the middle of a 128x128 image.

    >>> flow = AnalyticFlow('lamb_oseen_vortex', {'circulation': 300.0})
    >>> field = sample_flow(flow, 128, 128)
    """

    kind: str
    parameters: Dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ValueError(f'flow kind={self.kind} not available')
        known = FLOW_PARAMETERS[self.kind]
        for name in self.parameters:
            if name not in known:
                raise ValueError(f'parameter {name} not available for {self.kind}')
        resolved = {name: default for name, (default, _) in known.items()}
        resolved.update(self.parameters)
        object.__setattr__(self, 'parameters', resolved)

    def _center(self, height: int, width: int) -> Tuple[float, float]:
        center_x = self.parameters.get('center_x')
        center_y = self.parameters.get('center_y')
        return (
            width / 2 if center_x is None else center_x,
            height / 2 if center_y is None else center_y,
        )

    def evaluate(self, x: ndarray, y: ndarray, height: int, width: int) -> Tuple[ndarray, ndarray]:
        """Displacement (u, v) at image positions (x, y).

        The image size only fixes default centers.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        p = self.parameters

        if self.kind == 'uniform':
            return np.full_like(x, p['u0']), np.full_like(y, p['v0'])

        if self.kind == 'shear':
            _, center_y = self._center(height, width)
            return p['rate'] * (y - center_y), np.zeros_like(y)

        if self.kind == 'cellular':
            k = 2 * np.pi / p['wavelength']
            u = p['amplitude'] * np.sin(k * x) * np.cos(k * y)
            v = -p['amplitude'] * np.cos(k * x) * np.sin(k * y)
            return u, v

        r, phi = geometry.cartesian_to_polar(x, y, self._center(height, width))
        if self.kind == 'rotation':
            v_phi = p['omega'] * r
        else:
            r_safe = np.where(r > 0, r, 1.0)
            v_phi = np.where(
                r > 0,
                p['circulation']
                / (2 * np.pi * r_safe)
                * (1 - np.exp(-(r_safe ** 2) / p['core_radius'] ** 2)),
                0.0,
            )
        return geometry.polar_to_cartesian_velocity(phi, v_phi=v_phi)


def sample_flow(flow: AnalyticFlow, height: int, width: int) -> VelocityField:
    """Evaluate an analytic flow at every pixel center.

    Parameters
    ----------
    flow
        The analytic flow.
    height, width
        Image size in pixels.

    Returns
    -------
    VelocityField
        Field with value at (row, col) equal to the flow at
        (col + 0.5, row + 0.5).
    """
    x, y = geometry.pixel_centers(height, width)
    u, v = flow.evaluate(x, y, height, width)
    return VelocityField(u=u, v=v)
