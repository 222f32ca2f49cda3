"""Diffusion schedule, flow normalization and samplers.

The denoiser predicts the clean normalized flow v0. Sampling starts from
standard Gaussian noise at t = T and applies deterministic (eta = 0) or
stochastic (eta > 0) implicit updates over a short list of time steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from numpy import ndarray
from torch import Tensor

from .exceptions import ScheduleIndexError, ShapeMismatch
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_SCHEDULES = ('cosine', 'linear')

# Cosine schedule offset and beta ceiling
_COSINE_OFFSET = 0.008
_MAX_BETA = 0.999

ArrayLike = Union[Tensor, ndarray, float]


@dataclass
class DiffusionConfig(ParametersBase):
    """Diffusion schedule and sampler parameters."""

    T: int = field(default=1000, metadata={'description': 'number of training time steps'})
    schedule: str = field(
        default='cosine', metadata={'description': 'noise schedule: cosine or linear'}
    )
    inference_steps: int = field(
        default=6, metadata={'description': 'number of sampler steps at inference'}
    )
    eta: float = field(
        default=0.0, metadata={'description': 'sampler stochasticity in [0, 1], 0 is deterministic'}
    )
    scale_max: float = field(
        default=16.0, metadata={'description': 'flow magnitude in pixels mapped to 1'}
    )
    clamp: bool = field(
        default=True, metadata={'description': 'clamp normalized flow to [-1, 1]'}
    )

    def check_consistency(self) -> None:
        if self.T < 1:
            raise ValueError('T must be at least 1')
        if self.schedule not in _SCHEDULES:
            raise ValueError(f'schedule={self.schedule} not available')
        if not 1 <= self.inference_steps <= self.T:
            raise ValueError('inference_steps must be in [1, T]')
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError('eta must be in [0, 1]')
        if self.scale_max <= 0:
            raise ValueError('scale_max must be positive')

    def make_schedule(self) -> DiffusionSchedule:
        """The schedule described by this config."""
        return DiffusionSchedule.create(
            T=self.T,
            schedule=self.schedule,
            inference_step_count=self.inference_steps,
            sampler_eta=self.eta,
        )

    def make_normalizer(self) -> FlowNormalizer:
        """The flow normalizer described by this config."""
        return FlowNormalizer(scale_max=self.scale_max, clamp=self.clamp)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Noise levels of the forward process and the sampler time steps.

    Use DiffusionSchedule.create rather than the constructor.

    Parameters
    ----------
    T
        Number of training time steps.
    betas
        Per-step noise variances for t = 1..T.
    alphas_cumprod
        Cumulative products for t = 0..T, with alphas_cumprod[0] = 1.
    inference_steps
        Decreasing time steps visited by the sampler.
    sampler_eta
        Stochasticity of the sampler.
    """

    T: int
    betas: ndarray
    alphas_cumprod: ndarray
    inference_steps: Tuple[int, ...]
    sampler_eta: float = 0.0

    @classmethod
    def create(
        cls,
        T: int = 1000,
        schedule: str = 'cosine',
        inference_step_count: int = 6,
        sampler_eta: float = 0.0,
    ) -> DiffusionSchedule:
        """
        Build a schedule.

        Parameters
        ----------
        T
            Number of training time steps.
        schedule
            'cosine' or 'linear' betas.
        inference_step_count
            Number of evenly spaced sampler steps, from T down.
        sampler_eta
            Sampler stochasticity in [0, 1].
        """
        if T < 1:
            raise ValueError('T must be at least 1')
        if schedule == 'cosine':
            betas = _cosine_betas(T)
        elif schedule == 'linear':
            scale = 1000 / T
            betas = np.linspace(scale * 1e-4, min(scale * 0.02, _MAX_BETA), T)
        else:
            raise ValueError(f'schedule={schedule} not available')
        alphas_cumprod = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        for array in (betas, alphas_cumprod):
            array.setflags(write=False)
        return cls(
            T=T,
            betas=betas,
            alphas_cumprod=alphas_cumprod,
            inference_steps=evenly_spaced_steps(T, inference_step_count),
            sampler_eta=float(sampler_eta),
        )

    def __post_init__(self):
        if not 0.0 <= self.sampler_eta <= 1.0:
            raise ValueError('sampler_eta must be in [0, 1]')

    def alpha_bar(self, t: Union[int, Tensor, ndarray]) -> Union[float, ndarray]:
        """Cumulative alpha at integer time step(s) t in [0, T]."""
        t_array = np.asarray(t.detach().cpu() if isinstance(t, Tensor) else t)
        if np.any(t_array < 0) or np.any(t_array > self.T):
            raise ScheduleIndexError(f'time step {t} outside [0, {self.T}]')
        if t_array.dtype.kind not in 'iu':
            if np.any(t_array != np.round(t_array)):
                raise ScheduleIndexError(f'time step {t} is not an integer')
            t_array = t_array.astype(np.int64)
        value = self.alphas_cumprod[t_array]
        return float(value) if np.ndim(value) == 0 else value

    def with_inference_steps(self, count: int) -> DiffusionSchedule:
        """Copy with a different number of sampler steps."""
        return DiffusionSchedule(
            T=self.T,
            betas=self.betas,
            alphas_cumprod=self.alphas_cumprod,
            inference_steps=evenly_spaced_steps(self.T, count),
            sampler_eta=self.sampler_eta,
        )


def evenly_spaced_steps(T: int, count: int) -> Tuple[int, ...]:
    """count distinct decreasing time steps from T, the last one >= 1."""
    if not 1 <= count <= T:
        raise ValueError(f'step count {count} must be in [1, {T}]')
    steps = np.round(np.linspace(T, 0, count + 1)[:-1]).astype(int)
    return tuple(int(step) for step in steps)


def _cosine_betas(T: int) -> ndarray:
    def alpha_bar(time):
        return math.cos((time + _COSINE_OFFSET) / (1 + _COSINE_OFFSET) * math.pi / 2) ** 2

    betas = [min(1 - alpha_bar((i + 1) / T) / alpha_bar(i / T), _MAX_BETA) for i in range(T)]
    return np.array(betas, dtype=np.float64)


@dataclass(frozen=True)
class FlowNormalizer:
    """Maps pixel displacements to roughly [-1, 1].

    Parameters
    ----------
    scale_max
        Displacement in pixels mapped to 1.
    clamp
        Whether normalize clamps to [-1, 1].
    """

    scale_max: float = 16.0
    clamp: bool = True

    def __post_init__(self):
        if self.scale_max <= 0:
            raise ValueError('scale_max must be positive')

    def normalize(self, flow: ArrayLike, clamp: Optional[bool] = None) -> ArrayLike:
        """Divide by scale_max, clamping unless told otherwise."""
        clamp = self.clamp if clamp is None else clamp
        out = flow / self.scale_max
        if clamp:
            if isinstance(out, Tensor):
                out = out.clamp(-1.0, 1.0)
            else:
                out = np.clip(out, -1.0, 1.0)
        return out

    def denormalize(self, flow: ArrayLike) -> ArrayLike:
        """Multiply by scale_max."""
        return flow * self.scale_max


def normalize_flow(field: ArrayLike, normalizer: FlowNormalizer) -> ArrayLike:
    """Normalized field in [-1, 1]; see FlowNormalizer.normalize."""
    return normalizer.normalize(field)


def denormalize_flow(field: ArrayLike, normalizer: FlowNormalizer) -> ArrayLike:
    """Inverse of normalize_flow on the unclamped range."""
    return normalizer.denormalize(field)


def _coefficient(values, like: Tensor) -> Tensor:
    """Schedule value(s) broadcast against a batch of (N, C, H, W) tensors."""
    tensor = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if tensor.ndim == 1:
        tensor = tensor.view(-1, *([1] * (like.ndim - 1)))
    return tensor


def forward_noise(
    v0_norm: Tensor, t: Union[int, Tensor], noise: Tensor, schedule: DiffusionSchedule
) -> Tensor:
    """
    Noise a clean normalized flow to time step t.

    Parameters
    ----------
    v0_norm
        Clean normalized flow, batch first.
    t
        Time step in [1, T], or one per batch element.
    noise
        Standard Gaussian noise of the same shape.
    schedule
        The diffusion schedule.

    Returns
    -------
    Tensor
        sqrt(alpha_bar_t) * v0_norm + sqrt(1 - alpha_bar_t) * noise.
    """
    if v0_norm.shape != noise.shape:
        raise ShapeMismatch(f'noise shape {tuple(noise.shape)} != flow shape {tuple(v0_norm.shape)}')
    t_array = np.asarray(t.detach().cpu() if isinstance(t, Tensor) else t)
    if np.any(t_array < 1):
        raise ScheduleIndexError(f'time step {t} outside [1, {schedule.T}]')
    alpha_bar = _coefficient(schedule.alpha_bar(t_array), v0_norm)
    return alpha_bar.sqrt() * v0_norm + (1 - alpha_bar).sqrt() * noise


def reverse_step(
    v_t: Tensor,
    t: int,
    t_prev: int,
    predicted_v0: Tensor,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """
    One sampler update from time t to t_prev.

    Parameters
    ----------
    v_t
        Current noisy normalized flow.
    t, t_prev
        Time steps with t > t_prev >= 0.
    predicted_v0
        The denoiser's clean-flow estimate.
    schedule
        The diffusion schedule; its sampler_eta sets the stochasticity.
    generator, optional
        Source of fresh noise when sampler_eta > 0.

    Returns
    -------
    Tensor
        The flow at t_prev. With eta = 0 and t_prev = 0 this is
        predicted_v0.
    """
    if not schedule.T >= t > t_prev >= 0:
        raise ScheduleIndexError(f'need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}')
    alpha_bar = schedule.alpha_bar(t)
    alpha_bar_prev = schedule.alpha_bar(t_prev)
    eps = (v_t - math.sqrt(alpha_bar) * predicted_v0) / math.sqrt(1 - alpha_bar)

    sigma = 0.0
    if schedule.sampler_eta > 0:
        sigma = (
            schedule.sampler_eta
            * math.sqrt((1 - alpha_bar_prev) / (1 - alpha_bar))
            * math.sqrt(1 - alpha_bar / alpha_bar_prev)
        )
    direction = math.sqrt(max(1 - alpha_bar_prev - sigma ** 2, 0.0))
    v_prev = math.sqrt(alpha_bar_prev) * predicted_v0 + direction * eps
    if sigma > 0:
        noise = torch.randn(v_t.shape, generator=generator, dtype=v_t.dtype).to(v_t.device)
        v_prev = v_prev + sigma * noise
    return v_prev


Denoiser = Callable[[Tensor, int, object], Tensor]


def sample(
    denoiser: Denoiser,
    conditions: object,
    shape: Sequence[int],
    schedule: DiffusionSchedule,
    rng: Union[int, torch.Generator] = 0,
    *,
    dtype: torch.dtype = torch.float32,
    device: Union[str, torch.device] = 'cpu',
) -> Tensor:
    """
    Draw a normalized flow from the reverse process.

    Parameters
    ----------
    denoiser
        Callable (v_t, t, conditions) -> predicted v0.
    conditions
        Passed through to the denoiser.
    shape
        Shape of the flow tensor, e.g. (N, 2, H, W).
    schedule
        The diffusion schedule.
    rng
        Seed or torch generator for the initial noise and any
        stochastic updates.

    Returns
    -------
    Tensor
        The final normalized flow estimate.
    """
    if isinstance(rng, torch.Generator):
        generator = rng
    else:
        generator = torch.Generator(device='cpu').manual_seed(int(rng))
    v_t = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)

    steps = list(schedule.inference_steps) + [0]
    for t, t_prev in zip(steps[:-1], steps[1:]):
        predicted_v0 = denoiser(v_t, t, conditions)
        if predicted_v0.shape != v_t.shape:
            raise ShapeMismatch(
                f'denoiser returned {tuple(predicted_v0.shape)}, expected {tuple(v_t.shape)}'
            )
        v_t = reverse_step(v_t, t, t_prev, predicted_v0, schedule, generator)
    return v_t
