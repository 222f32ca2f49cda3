"""All-pairs correlation pyramid and windowed lookup.

Coordinates are pixel indices of the 1/8-resolution feature grid. A
pooled level keeps pixel centers aligned: index x on the finest level
maps to (x + 0.5) * w_l / w - 0.5 on a level of width w_l.
"""
from __future__ import annotations

import math
from typing import List

import torch
import torch.nn.functional as F
from torch import Tensor


def correlation_volume(fmap1: Tensor, fmap2: Tensor) -> Tensor:
    """Dot products between all feature pairs, divided by sqrt(C).

    Parameters
    ----------
    fmap1, fmap2
        Feature maps of shape (N, C, h, w).

    Returns
    -------
    Tensor
        Shape (N * h * w, 1, h, w): for each frame_a location, its
        similarity to every frame_b location.
    """
    if fmap1.shape != fmap2.shape:
        raise ValueError(f'feature maps differ in shape: {tuple(fmap1.shape)} != {tuple(fmap2.shape)}')
    batch, channels, height, width = fmap1.shape
    corr = torch.matmul(
        fmap1.reshape(batch, channels, height * width).transpose(1, 2),
        fmap2.reshape(batch, channels, height * width),
    )
    return corr.reshape(batch * height * width, 1, height, width) / math.sqrt(channels)


def build_correlation_pyramid(fmap1: Tensor, fmap2: Tensor, levels: int = 4) -> List[Tensor]:
    """Correlation volume average-pooled over the frame_b side.

    Level l halves the frame_b side l times; sides that reach 1 stay 1.

    Returns
    -------
    List[Tensor]
        levels tensors of shape (N * h * w, 1, h_l, w_l).
    """
    if levels < 1:
        raise ValueError('levels must be at least 1')
    volume = correlation_volume(fmap1, fmap2)
    pyramid = [volume]
    for _ in range(levels - 1):
        volume = _pool_half(volume)
        pyramid.append(volume)
    return pyramid


def _pool_half(volume: Tensor) -> Tensor:
    height, width = volume.shape[-2:]
    if height % 2 == 0 and width % 2 == 0:
        return F.avg_pool2d(volume, kernel_size=2, stride=2)
    return F.adaptive_avg_pool2d(volume, (max(height // 2, 1), max(width // 2, 1)))


def coords_grid(batch: int, height: int, width: int, like: Tensor) -> Tensor:
    """Pixel index coordinates (x, y) of shape (N, 2, h, w)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=like.dtype, device=like.device),
        torch.arange(width, dtype=like.dtype, device=like.device),
        indexing='ij',
    )
    return torch.stack([xs, ys]).unsqueeze(0).expand(batch, -1, -1, -1)


def window_offsets(radius: int, like: Tensor) -> Tensor:
    """(2r+1, 2r+1, 2) offsets (dx, dy), rows varying dy, columns dx."""
    delta = torch.arange(-radius, radius + 1, dtype=like.dtype, device=like.device)
    dy, dx = torch.meshgrid(delta, delta, indexing='ij')
    return torch.stack([dx, dy], dim=-1)


def lookup_correlation(pyramid: List[Tensor], flow_coarse: Tensor, radius: int = 4) -> Tensor:
    """
    Sample each pyramid level in a window around the displaced target.

    Parameters
    ----------
    pyramid
        Output of build_correlation_pyramid.
    flow_coarse
        Flow (N, 2, h, w) in feature-grid pixels.
    radius
        Window radius r; each level contributes (2r+1)^2 samples.

    Returns
    -------
    Tensor
        Motion features of shape (N, L * (2r+1)^2, h, w). Channel
        (2r+1) * (dy + r) + (dx + r) of each level holds the sample at
        offset (dx, dy). Samples outside a level are zero.
    """
    batch, _, height, width = flow_coarse.shape
    side = 2 * radius + 1
    centroids = coords_grid(batch, height, width, flow_coarse) + flow_coarse
    centroids = centroids.permute(0, 2, 3, 1).reshape(batch * height * width, 1, 1, 2)
    offsets = window_offsets(radius, flow_coarse).view(1, side, side, 2)

    samples = list()
    for volume in pyramid:
        level_height, level_width = volume.shape[-2:]
        scale = centroids.new_tensor([level_width / width, level_height / height])
        level_centroids = (centroids + 0.5) * scale - 0.5
        points = level_centroids + offsets
        size = points.new_tensor([level_width, level_height])
        grid = (2 * points + 1) / size - 1
        sampled = F.grid_sample(volume, grid, mode='bilinear', padding_mode='zeros', align_corners=False)
        samples.append(sampled.view(batch, height, width, side * side))

    return torch.cat(samples, dim=-1).permute(0, 3, 1, 2).contiguous()
