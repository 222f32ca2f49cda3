"""
PIV diffuser
============

pivdiffuser is a Python package for estimating particle image
velocimetry displacement fields with a conditional denoising diffusion
model, with a window deformation cross-correlation baseline, synthetic
particle images and evaluation tools.
"""

# Canonical version number
__version__ = '0.1.0'

from . import checkpoint, defaults, diffusion, flowio, metrics, synthetic, widim  # noqa: E402
from .config import RunConfig  # noqa: E402
from .diffusion import DiffusionSchedule, FlowNormalizer  # noqa: E402
from .estimator import estimate  # noqa: E402
from .fields import CaseLabel, FlowSample, ImagePair, VelocityField  # noqa: E402
from .network import FlowDiffuser, ModelConfig  # noqa: E402

__all__ = (
    'CaseLabel',
    'DiffusionSchedule',
    'FlowDiffuser',
    'FlowNormalizer',
    'FlowSample',
    'ImagePair',
    'ModelConfig',
    'RunConfig',
    'VelocityField',
    'checkpoint',
    'defaults',
    'diffusion',
    'estimate',
    'flowio',
    'metrics',
    'synthetic',
    'widim',
)
