"""Scale-adaptation wrapper turning the denoiser into a flow estimator."""
from __future__ import annotations

import logging
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .constants import FEATURE_STRIDE
from .diffusion import DiffusionSchedule, denormalize_flow, sample
from .fields import ImagePair, VelocityField

logger = logging.getLogger(__name__)


def frames_to_tensor(pair: ImagePair, dtype: torch.dtype = torch.float32, device='cpu') -> Tuple[Tensor, Tensor]:
    """Both frames as (1, 1, H, W) tensors."""
    return tuple(
        torch.as_tensor(np.ascontiguousarray(frame), dtype=dtype, device=device)[None, None]
        for frame in (pair.frame_a, pair.frame_b)
    )


def resize(images: Tensor, factor: float = None, size: Tuple[int, int] = None) -> Tensor:
    """Bilinear resize, pixel centres aligned."""
    if factor == 1 and size is None:
        return images
    return F.interpolate(images, scale_factor=factor, size=size, mode='bilinear', align_corners=False)


def pad_to_multiple(images: Tensor, multiple: int = FEATURE_STRIDE) -> Tensor:
    """Pad bottom and right by edge replication to a multiple of 8."""
    height, width = images.shape[-2:]
    pad_height = -height % multiple
    pad_width = -width % multiple
    if pad_height == 0 and pad_width == 0:
        return images
    return F.pad(images, (0, pad_width, 0, pad_height), mode='replicate')


def estimate(
    pair: ImagePair,
    model,
    schedule: DiffusionSchedule,
    *,
    upsample_factor: int = None,
    seed: int = 0,
    device: Union[str, torch.device] = 'cpu',
) -> VelocityField:
    """
    Estimate the displacement field of an image pair.

    Both frames are upsampled by the factor s, padded to a multiple of
    8, and passed through the full reverse diffusion. The flow is then
    cropped, resized back to the input shape and divided by s.

    Parameters
    ----------
    pair
        The image pair.
    model
        A FlowDiffuser, or any object with encode, denoise_once, config
        and normalizer.
    schedule
        The diffusion schedule, including the sampler steps.

    Optional Parameters
    -------------------
    upsample_factor
        Overrides model.config.upsample_factor.
    seed
        Seed of the initial noise.
    device
        Where to run the model.

    Returns
    -------
    VelocityField
        Displacement in input pixels per frame, same shape as the pair.
    """
    factor = model.config.upsample_factor if upsample_factor is None else upsample_factor
    if factor not in (1, 2):
        raise ValueError('upsample_factor must be 1 or 2')

    frame_a, frame_b = frames_to_tensor(pair, device=device)
    images = resize(torch.cat([frame_a, frame_b], dim=0), factor=factor)
    working_height, working_width = images.shape[-2:]
    images = pad_to_multiple(images)
    frame_a, frame_b = images[0:1], images[1:2]

    with torch.no_grad():
        conditions = model.encode(frame_a, frame_b)
        v0 = sample(
            model.denoise_once,
            conditions,
            (1, 2) + tuple(images.shape[-2:]),
            schedule,
            rng=seed,
            dtype=images.dtype,
            device=device,
        )
        flow = denormalize_flow(v0, model.normalizer)
        flow = flow[..., :working_height, :working_width]
        if factor != 1:
            flow = resize(flow, size=pair.shape) / factor

    flow = flow[0].cpu().numpy()
    logger.debug('estimated %s with factor %d', pair.source_id or 'pair', factor)
    return VelocityField(u=flow[0], v=flow[1])
