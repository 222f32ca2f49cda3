"""Synthetic particle image pairs.

Particles are seeded uniformly over the image, rendered as truncated
Gaussian blobs, and advected one step along a ground-truth flow to make
the second frame.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import flowio
from .exceptions import DensityOverflow, ShapeMismatch
from .fields import CaseLabel, FlowSample, ImagePair, VelocityField
from .flows import AnalyticFlow, sample_flow
from .parameters import ParametersBase
from .particles import Particles, uniform_distribution

logger = logging.getLogger(__name__)

MIN_PARTICLES = 4


@dataclass
class GeneratorConfig(ParametersBase):
    """Synthetic image generator parameters."""

    height: int = field(default=256, metadata={'description': 'image height in pixels'})
    width: int = field(default=256, metadata={'description': 'image width in pixels'})
    particle_density: float = field(
        default=0.05, metadata={'description': 'particles per pixel (ppp), in (0, 0.2]'}
    )
    particle_diameter_sigma: float = field(
        default=1.0,
        metadata={'description': 'Gaussian particle image standard deviation in pixels, in [0.5, 3]'},
    )
    peak_intensity_range: Tuple[float, float] = field(
        default=(0.5, 1.0), metadata={'description': 'range of particle peak intensities'}
    )
    noise_std: float = field(
        default=0.0, metadata={'description': 'std of additive Gaussian noise per frame'}
    )
    background_level: float = field(
        default=0.0, metadata={'description': 'constant background intensity'}
    )
    rng_seed: int = field(default=0, metadata={'description': 'random seed'})

    def check_consistency(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError('height and width must be positive')
        if not 0.0 < self.particle_density <= 0.2:
            raise ValueError('particle_density must be in (0, 0.2]')
        if not 0.5 <= self.particle_diameter_sigma <= 3.0:
            raise ValueError('particle_diameter_sigma must be in [0.5, 3.0]')
        low, high = self.peak_intensity_range
        if not 0.0 <= low <= high:
            raise ValueError('peak_intensity_range must be increasing and nonnegative')
        if self.noise_std < 0.0:
            raise ValueError('noise_std must be nonnegative')

    @property
    def number_of_particles(self) -> int:
        """Particle count round(density * H * W)."""
        return int(round(self.particle_density * self.height * self.width))


def seed_particles(cfg: GeneratorConfig, rng: np.random.Generator = None) -> Particles:
    """Seed the first-frame particles.

    Parameters
    ----------
    cfg
        The generator config.
    rng, optional
        The random generator. Default is seeded with cfg.rng_seed.

    Returns
    -------
    Particles
        round(density * H * W) particles.
    """
    number_of_particles = cfg.number_of_particles
    if number_of_particles < MIN_PARTICLES:
        raise DensityOverflow(
            f'{number_of_particles} particles at density {cfg.particle_density}, '
            f'need at least {MIN_PARTICLES}'
        )
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    position, peak_intensity = uniform_distribution(
        number_of_particles=number_of_particles,
        height=cfg.height,
        width=cfg.width,
        intensity_range=cfg.peak_intensity_range,
        rng=rng,
    )
    return Particles().add_particles(position=position, peak_intensity=peak_intensity)


def render_pair(flow: VelocityField, cfg: GeneratorConfig, source_id: str = '') -> FlowSample:
    """Render an image pair moving with a flow.

    Parameters
    ----------
    flow
        Ground-truth displacement, same shape as the config.
    cfg
        The generator config.
    source_id, optional
        Identifier stored on the pair.

    Returns
    -------
    FlowSample
        Unlabeled sample with gt = flow.
    """
    cfg.check_consistency()
    if flow.shape != (cfg.height, cfg.width):
        raise ShapeMismatch(f'flow shape {flow.shape} != config shape {(cfg.height, cfg.width)}')

    rng = np.random.default_rng(cfg.rng_seed)
    particles_a = seed_particles(cfg, rng)
    particles_b = particles_a.advect(flow)

    frames = list()
    for particles in (particles_a, particles_b):
        frame = particles.render(
            cfg.height, cfg.width, cfg.particle_diameter_sigma, cfg.background_level
        )
        frames.append(frame)
    if cfg.noise_std > 0:
        frames = [
            np.clip(frame + rng.normal(0.0, cfg.noise_std, size=frame.shape), 0.0, 1.0)
            for frame in frames
        ]

    pair = ImagePair(frame_a=frames[0], frame_b=frames[1], source_id=source_id)
    return FlowSample(pair=pair, gt=flow, case_label=CaseLabel.UNLABELED)


def make_dataset(
    flows: Sequence[AnalyticFlow], per_flow: int, cfg: GeneratorConfig
) -> List[FlowSample]:
    """Render several samples per analytic flow.

    Sample k (counting over all flows) uses seed cfg.rng_seed + k and
    source id '<kind>_<k>'.

    Parameters
    ----------
    flows
        The analytic flows.
    per_flow
        Number of samples for each flow, at least 1.
    cfg
        The generator config.

    Returns
    -------
    List[FlowSample]
    """
    if per_flow < 1:
        raise ValueError('per_flow must be at least 1')
    samples = list()
    index = 0
    for flow in flows:
        gt = sample_flow(flow, cfg.height, cfg.width)
        for _ in range(per_flow):
            sample_cfg = dataclasses.replace(cfg, rng_seed=cfg.rng_seed + index)
            samples.append(render_pair(gt, sample_cfg, source_id=f'{flow.kind}_{index:05d}'))
            index += 1
    logger.info('rendered %d samples from %d flows', len(samples), len(flows))
    return samples


def write_dataset(
    samples: Sequence[FlowSample],
    root: Union[str, Path],
    *,
    bit_depth: int = 8,
    extension: str = '.png',
) -> List[Path]:
    """Write samples into the dataset directory layout.

    Each sample goes to <root>/<case>/<source_id>_img1<extension>,
    <source_id>_img2<extension> and <source_id>_flow.flo.

    Returns
    -------
    List[Path]
        Paths of the first images written.
    """
    root = Path(root)
    written = list()
    for sample in samples:
        directory = root / str(sample.case_label)
        directory.mkdir(parents=True, exist_ok=True)
        paths = flowio.sample_paths(directory, sample.sample_id, extension)
        flowio.write_image(sample.pair.frame_a, paths[0], bit_depth=bit_depth)
        flowio.write_image(sample.pair.frame_b, paths[1], bit_depth=bit_depth)
        if sample.gt is not None:
            flowio.write_flo(sample.gt, paths[2])
        written.append(paths[0])
    return written
