"""The conditional recurrent denoising network.

The layout follows the recurrent all-pairs field transform family of
optical-flow models: a feature encoder applied to both frames, a context
encoder applied to the first frame, an update block iterated at 1/8
resolution, and a convex upsampler. The update block gains an embedding
enhancement stage that injects the diffusion time step and the current
noisy flow.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Type, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torchvision.ops import Conv2dNormActivation

from .constants import FEATURE_STRIDE
from .correlation import build_correlation_pyramid, lookup_correlation
from .diffusion import FlowNormalizer
from .exceptions import DimensionNotDivisible, ShapeMismatch
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_EE_FUSIONS = ('add', 'concat')
_ACTIVATIONS = {'relu': nn.ReLU, 'silu': nn.SiLU}

# Convex upsampling neighbourhood is 3 x 3
_NEIGHBOURS = 9


@dataclass
class ModelConfig(ParametersBase):
    """Network architecture parameters."""

    feature_dim: int = field(
        default=256, metadata={'description': 'channels of the feature encoder output'}
    )
    context_dim: int = field(default=128, metadata={'description': 'channels of x_c'})
    hidden_dim: int = field(default=128, metadata={'description': 'channels of x_h'})
    motion_dim: int = field(
        default=128, metadata={'description': 'channels of the encoded motion features'}
    )
    pyramid_levels: int = field(
        default=4, metadata={'description': 'levels L of the correlation pyramid'}
    )
    lookup_radius: int = field(
        default=4, metadata={'description': 'correlation lookup window radius r'}
    )
    inner_iterations: int = field(
        default=4,
        metadata={'description': 'recurrent iterations K per denoising step'},
    )
    time_embed_dim: int = field(
        default=128, metadata={'description': 'width of the sinusoidal time embedding'}
    )
    upsample_factor: int = field(
        default=2, metadata={'description': 'input upsampling factor of the estimate wrapper, 1 or 2'}
    )
    ee_fusion: str = field(
        default='concat',
        metadata={'description': 'embedding enhancement fusion: add or concat'},
    )
    activation: str = field(
        default='relu', metadata={'description': 'hidden activation: relu or silu'}
    )
    reset_hidden: bool = field(
        default=False,
        metadata={'description': 're-initialise x_h at every outer denoising step'},
    )
    mask_multiplier: float = field(
        default=0.25, metadata={'description': 'scale applied to the upsampling mask logits'}
    )

    def check_consistency(self) -> None:
        dims = (
            self.feature_dim,
            self.context_dim,
            self.hidden_dim,
            self.motion_dim,
            self.time_embed_dim,
        )
        if any(dim < 1 for dim in dims):
            raise ValueError('all dims must be positive')
        if self.feature_dim % 8 != 0:
            raise ValueError('feature_dim must be a multiple of 8')
        if self.motion_dim < 4 or self.motion_dim % 2 != 0:
            raise ValueError('motion_dim must be even and at least 4')
        if self.time_embed_dim % 2 != 0:
            raise ValueError('time_embed_dim must be even')
        if self.pyramid_levels < 1:
            raise ValueError('pyramid_levels must be at least 1')
        if self.lookup_radius < 0:
            raise ValueError('lookup_radius must be nonnegative')
        if self.inner_iterations < 1:
            raise ValueError('inner_iterations must be at least 1')
        if self.upsample_factor not in (1, 2):
            raise ValueError('upsample_factor must be 1 or 2')
        if self.ee_fusion not in _EE_FUSIONS:
            raise ValueError(f'ee_fusion={self.ee_fusion} not available')
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f'activation={self.activation} not available')

    @classmethod
    def toy(cls, **kwargs) -> ModelConfig:
        """Small configuration for CPU tests and smoke runs."""
        values = dict(
            feature_dim=32,
            context_dim=16,
            hidden_dim=16,
            motion_dim=16,
            time_embed_dim=16,
            pyramid_levels=4,
            lookup_radius=2,
        )
        values.update(kwargs)
        config = cls(**values)
        config.check_consistency()
        return config

    @property
    def correlation_channels(self) -> int:
        return self.pyramid_levels * (2 * self.lookup_radius + 1) ** 2


@dataclass(eq=False)
class ConditionSet:
    """
    Encoder products conditioning the denoiser for one image pair batch.

    Parameters
    ----------
    x_c
        Context features (N, context_dim, h, w), h = H/8.
    x_cv
        Correlation pyramid; level l has shape (N * h * w, 1, h_l, w_l).
    x_h
        Recurrent hidden state (N, hidden_dim, h, w). Updated in place
        by each denoise_once call.
    hidden_init
        Initial hidden state from the context encoder.
    x_o
        Latest enhanced embedding, None before the first denoising step.
    """

    x_c: Tensor
    x_cv: List[Tensor]
    x_h: Tensor
    hidden_init: Tensor
    x_o: Optional[Tensor] = None

    @property
    def coarse_shape(self) -> Tuple[int, int]:
        return tuple(self.x_c.shape[-2:])

    def reset(self) -> ConditionSet:
        """Restore the initial hidden state."""
        self.x_h = self.hidden_init
        self.x_o = None
        return self


class ResidualBlock(nn.Module):
    """Two 3x3 conv-norm-activation layers with a projected shortcut."""

    def __init__(self, in_channels, out_channels, *, norm_layer, activation, stride=1):
        super().__init__()
        self.convnormrelu1 = Conv2dNormActivation(
            in_channels,
            out_channels,
            norm_layer=norm_layer,
            activation_layer=activation,
            kernel_size=3,
            stride=stride,
            bias=True,
        )
        self.convnormrelu2 = Conv2dNormActivation(
            out_channels,
            out_channels,
            norm_layer=norm_layer,
            activation_layer=activation,
            kernel_size=3,
            bias=True,
        )
        if stride == 1 and in_channels == out_channels:
            self.downsample = nn.Identity()
        else:
            self.downsample = Conv2dNormActivation(
                in_channels,
                out_channels,
                norm_layer=norm_layer,
                kernel_size=1,
                stride=stride,
                bias=True,
                activation_layer=None,
            )
        self.activation = activation()

    def forward(self, x):
        y = self.convnormrelu2(self.convnormrelu1(x))
        return self.activation(self.downsample(x) + y)


class FeatureEncoder(nn.Module):
    """Encoder downsampling its three-channel input by 8.

    Used with instance norm for the matching features and without norm
    for the context features.
    """

    def __init__(
        self,
        *,
        layers: Tuple[int, int, int, int, int],
        norm_layer: Optional[Type[nn.Module]],
        activation: Type[nn.Module],
        strides: Tuple[int, int, int, int] = (2, 1, 2, 2),
    ):
        super().__init__()
        if len(layers) != 5:
            raise ValueError(f'expected 5 layer widths, got {len(layers)}')
        self.convnormrelu = Conv2dNormActivation(
            3,
            layers[0],
            norm_layer=norm_layer,
            activation_layer=activation,
            kernel_size=7,
            stride=strides[0],
            bias=True,
        )
        blocks = list()
        for index in range(3):
            blocks.append(
                nn.Sequential(
                    ResidualBlock(
                        layers[index],
                        layers[index + 1],
                        norm_layer=norm_layer,
                        activation=activation,
                        stride=strides[index + 1],
                    ),
                    ResidualBlock(
                        layers[index + 1],
                        layers[index + 1],
                        norm_layer=norm_layer,
                        activation=activation,
                    ),
                )
            )
        self.layer1, self.layer2, self.layer3 = blocks
        self.conv = nn.Conv2d(layers[3], layers[4], kernel_size=1)

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode='fan_out', nonlinearity='relu')

    def forward(self, x):
        x = self.convnormrelu(x)
        x = self.layer3(self.layer2(self.layer1(x)))
        return self.conv(x)


def encoder_widths(out_channels: int) -> Tuple[int, int, int, int, int]:
    """Layer widths scaled from the output width, (64, 64, 96, 128, 256) at 256."""
    base = max(out_channels // 4, 1)
    return (base, base, max(3 * out_channels // 8, 1), max(out_channels // 2, 1), out_channels)


class MotionEncoder(nn.Module):
    """Encodes correlation features together with the current coarse flow."""

    def __init__(self, *, in_channels_corr: int, out_channels: int, activation: Type[nn.Module]):
        super().__init__()
        corr_layers = (2 * out_channels, 3 * out_channels // 2)
        flow_layers = (out_channels, out_channels // 2)
        kwargs = dict(norm_layer=None, activation_layer=activation)
        self.convcorr1 = Conv2dNormActivation(in_channels_corr, corr_layers[0], kernel_size=1, **kwargs)
        self.convcorr2 = Conv2dNormActivation(corr_layers[0], corr_layers[1], kernel_size=3, **kwargs)
        self.convflow1 = Conv2dNormActivation(2, flow_layers[0], kernel_size=7, **kwargs)
        self.convflow2 = Conv2dNormActivation(flow_layers[0], flow_layers[1], kernel_size=3, **kwargs)
        # the flow itself is appended as the last two channels
        self.conv = Conv2dNormActivation(
            corr_layers[-1] + flow_layers[-1], out_channels - 2, kernel_size=3, **kwargs
        )
        self.out_channels = out_channels

    def forward(self, flow, corr_features):
        corr = self.convcorr2(self.convcorr1(corr_features))
        flow_features = self.convflow2(self.convflow1(flow))
        motion = self.conv(torch.cat([corr, flow_features], dim=1))
        return torch.cat([motion, flow], dim=1)


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    """
    Sinusoidal code of time steps.

    Parameters
    ----------
    t
        Time steps, shape (N,).
    dim
        Even embedding width.

    Returns
    -------
    Tensor
        Shape (N, dim): sines then cosines at geometrically spaced
        frequencies from 1 to 1/10000.
    """
    half = dim // 2
    frequencies = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    arguments = t[:, None] * frequencies[None, :]
    return torch.cat([torch.sin(arguments), torch.cos(arguments)], dim=1)


class EmbeddingEnhancement(nn.Module):
    """
    Fuses the noisy flow, motion features and context, then adds the
    projected time embedding.

    With fusion 'add' each input is projected to motion_dim and summed;
    with 'concat' the inputs are concatenated and mixed by a 1x1 conv.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        activation = _ACTIVATIONS[cfg.activation]
        self.fusion = cfg.ee_fusion
        self.time_embed_dim = cfg.time_embed_dim
        flow_channels = cfg.motion_dim // 2

        self.motion_encoder = MotionEncoder(
            in_channels_corr=cfg.correlation_channels,
            out_channels=cfg.motion_dim,
            activation=activation,
        )
        self.encode_flow = nn.Sequential(
            Conv2dNormActivation(2, flow_channels, kernel_size=3, norm_layer=None, activation_layer=activation),
            nn.Conv2d(flow_channels, flow_channels, kernel_size=3, padding=1),
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            activation(),
            nn.Linear(cfg.time_embed_dim, cfg.motion_dim),
        )
        if self.fusion == 'add':
            self.proj_flow = nn.Conv2d(flow_channels, cfg.motion_dim, kernel_size=1)
            self.proj_motion = nn.Conv2d(cfg.motion_dim, cfg.motion_dim, kernel_size=1)
            self.proj_context = nn.Conv2d(cfg.context_dim, cfg.motion_dim, kernel_size=1)
        else:
            self.fuse = nn.Conv2d(
                flow_channels + cfg.motion_dim + cfg.context_dim, cfg.motion_dim, kernel_size=1
            )
        self.activation = activation()
        self.out_channels = cfg.motion_dim

    def forward(self, t, v_t_coarse, x_c, corr_features, flow):
        """
        Parameters
        ----------
        t
            Time steps, shape (N,).
        v_t_coarse
            Noisy normalized flow pooled to 1/8 resolution.
        x_c
            Context features.
        corr_features
            Output of lookup_correlation at the current flow.
        flow
            Current coarse flow in 1/8-resolution pixels.

        Returns
        -------
        Tensor
            x_o of shape (N, motion_dim, h, w).
        """
        motion = self.motion_encoder(flow, corr_features)
        encoded_flow = self.encode_flow(v_t_coarse)
        if self.fusion == 'add':
            fused = (
                self.proj_flow(encoded_flow)
                + self.proj_motion(motion)
                + self.proj_context(x_c)
            )
        else:
            fused = self.fuse(torch.cat([encoded_flow, motion, x_c], dim=1))
        time = self.time_mlp(sinusoidal_embedding(t.to(fused.dtype), self.time_embed_dim))
        return self.activation(fused) + time[:, :, None, None]


class ConvGRU(nn.Module):
    """Convolutional GRU cell."""

    def __init__(self, *, input_size, hidden_size, kernel_size, padding):
        super().__init__()
        channels = hidden_size + input_size
        self.convz = nn.Conv2d(channels, hidden_size, kernel_size=kernel_size, padding=padding)
        self.convr = nn.Conv2d(channels, hidden_size, kernel_size=kernel_size, padding=padding)
        self.convq = nn.Conv2d(channels, hidden_size, kernel_size=kernel_size, padding=padding)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class RecurrentBlock(nn.Module):
    """Horizontal then vertical separable GRU."""

    def __init__(self, *, input_size, hidden_size):
        super().__init__()
        self.convgru1 = ConvGRU(
            input_size=input_size, hidden_size=hidden_size, kernel_size=(1, 5), padding=(0, 2)
        )
        self.convgru2 = ConvGRU(
            input_size=input_size, hidden_size=hidden_size, kernel_size=(5, 1), padding=(2, 0)
        )
        self.hidden_size = hidden_size

    def forward(self, h, x):
        return self.convgru2(self.convgru1(h, x), x)


class FlowHead(nn.Module):
    """Emits the flow increment from the hidden state."""

    def __init__(self, *, in_channels, hidden_size, activation: Type[nn.Module]):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden_size, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden_size, 2, 3, padding=1)
        self.activation = activation()

    def forward(self, x):
        return self.conv2(self.activation(self.conv1(x)))


class UpdateBlock(nn.Module):
    """Embedding enhancement, recurrent update and flow head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        activation = _ACTIVATIONS[cfg.activation]
        self.embedding = EmbeddingEnhancement(cfg)
        self.recurrent_block = RecurrentBlock(
            input_size=self.embedding.out_channels + cfg.context_dim, hidden_size=cfg.hidden_dim
        )
        self.flow_head = FlowHead(
            in_channels=cfg.hidden_dim, hidden_size=2 * cfg.hidden_dim, activation=activation
        )

    def forward(self, hidden_state, context, corr_features, flow, t, v_t_coarse):
        x_o = self.embedding(t, v_t_coarse, context, corr_features, flow)
        hidden_state = self.recurrent_block(hidden_state, torch.cat([x_o, context], dim=1))
        return hidden_state, self.flow_head(hidden_state), x_o


class MaskPredictor(nn.Module):
    """Logits of the convex upsampling weights, 8 * 8 * 9 per coarse pixel."""

    def __init__(self, *, in_channels, hidden_size, activation: Type[nn.Module], multiplier=0.25):
        super().__init__()
        self.convrelu = Conv2dNormActivation(
            in_channels, hidden_size, norm_layer=None, activation_layer=activation, kernel_size=3
        )
        self.conv = nn.Conv2d(hidden_size, FEATURE_STRIDE * FEATURE_STRIDE * _NEIGHBOURS, 1, padding=0)
        self.multiplier = multiplier

    def forward(self, x):
        return self.multiplier * self.conv(self.convrelu(x))


def convex_weights(mask: Tensor, factor: int = FEATURE_STRIDE) -> Tensor:
    """Softmax of mask logits over the 3x3 neighbourhood.

    Returns
    -------
    Tensor
        Shape (N, 1, 9, factor, factor, h, w); sums to 1 over axis 2.
    """
    batch, _, height, width = mask.shape
    mask = mask.view(batch, 1, _NEIGHBOURS, factor, factor, height, width)
    return torch.softmax(mask, dim=2)


def convex_upsample(flow: Tensor, mask: Tensor, factor: int = FEATURE_STRIDE) -> Tensor:
    """
    Upsample a coarse flow by a learned convex combination of neighbours.

    Parameters
    ----------
    flow
        Coarse flow (N, 2, h, w) in coarse pixels.
    mask
        Mask logits (N, factor * factor * 9, h, w).

    Returns
    -------
    Tensor
        Flow (N, 2, factor * h, factor * w) in full-resolution pixels.
    """
    batch, _, height, width = flow.shape
    weights = convex_weights(mask, factor)
    neighbours = F.unfold(factor * flow, kernel_size=3, padding=1)
    neighbours = neighbours.view(batch, 2, _NEIGHBOURS, 1, 1, height, width)
    upsampled = torch.sum(weights * neighbours, dim=2)
    upsampled = upsampled.permute(0, 1, 4, 2, 5, 3)
    return upsampled.reshape(batch, 2, factor * height, factor * width)


class FlowDiffuser(nn.Module):
    """
    Conditional denoiser of normalized flow fields.

    Parameters
    ----------
    cfg
        The architecture.
    normalizer, optional
        Maps pixel flow to normalized flow. Default scale 16 px.

    Examples
    --------
    Denoise one step for a 64x64 pair.

    >>> model = FlowDiffuser(ModelConfig.toy())
    >>> conditions = model.encode(frame_a, frame_b)
    >>> v0 = model.denoise_once(v_t, 1000, conditions)
    """

    def __init__(self, cfg: ModelConfig = None, normalizer: FlowNormalizer = None):
        super().__init__()
        self.config = cfg if cfg is not None else ModelConfig()
        self.config.check_consistency()
        self.normalizer = normalizer if normalizer is not None else FlowNormalizer()
        activation = _ACTIVATIONS[self.config.activation]

        self.feature_encoder = FeatureEncoder(
            layers=encoder_widths(self.config.feature_dim),
            norm_layer=nn.InstanceNorm2d,
            activation=activation,
        )
        self.context_encoder = FeatureEncoder(
            layers=encoder_widths(self.config.context_dim + self.config.hidden_dim),
            norm_layer=None,
            activation=activation,
        )
        self.update_block = UpdateBlock(self.config)
        self.mask_predictor = MaskPredictor(
            in_channels=self.config.hidden_dim,
            hidden_size=2 * self.config.hidden_dim,
            activation=activation,
            multiplier=self.config.mask_multiplier,
        )
        self.context_activation = activation()

    def encode(self, frame_a: Tensor, frame_b: Tensor) -> ConditionSet:
        """
        Build the conditions for a batch of image pairs.

        Parameters
        ----------
        frame_a, frame_b
            Intensities in [0, 1], shape (N, 1, H, W) or (N, 3, H, W).
            Single-channel input is replicated to three channels.

        Returns
        -------
        ConditionSet
        """
        if frame_a.shape != frame_b.shape:
            raise ShapeMismatch(f'frame shapes differ: {tuple(frame_a.shape)} != {tuple(frame_b.shape)}')
        height, width = frame_a.shape[-2:]
        if height % FEATURE_STRIDE or width % FEATURE_STRIDE:
            raise DimensionNotDivisible(f'image size {height}x{width} not divisible by {FEATURE_STRIDE}')
        images = [pseudo_color(frame) for frame in (frame_a, frame_b)]
        images = [2 * image - 1 for image in images]

        fmaps = self.feature_encoder(torch.cat(images, dim=0))
        fmap1, fmap2 = torch.chunk(fmaps, chunks=2, dim=0)
        pyramid = build_correlation_pyramid(fmap1, fmap2, self.config.pyramid_levels)

        context = self.context_encoder(images[0])
        hidden, x_c = torch.split(context, [self.config.hidden_dim, self.config.context_dim], dim=1)
        hidden = torch.tanh(hidden)
        x_c = self.context_activation(x_c)
        return ConditionSet(x_c=x_c, x_cv=pyramid, x_h=hidden, hidden_init=hidden)

    def embed_enhance(
        self, t: Union[int, Tensor], v_t_coarse: Tensor, x_c: Tensor, x_cv_features: Tensor, flow: Tensor = None
    ) -> Tensor:
        """The enhanced embedding x_o; flow defaults to the pixel value of v_t_coarse."""
        t = _time_tensor(t, v_t_coarse)
        if flow is None:
            flow = self.normalizer.denormalize(v_t_coarse) / FEATURE_STRIDE
        return self.update_block.embedding(t, v_t_coarse, x_c, x_cv_features, flow)

    def denoise_once(self, v_t: Tensor, t: Union[int, Tensor], conditions: ConditionSet) -> Tensor:
        """
        Predict the clean normalized flow from a noisy one.

        Parameters
        ----------
        v_t
            Noisy normalized flow (N, 2, H, W) at the encoded resolution.
        t
            Time step, or one per batch element.
        conditions
            From encode on the same pair. Its hidden state is carried
            over to the next call unless reset_hidden is set.

        Returns
        -------
        Tensor
            Predicted normalized v0, same shape as v_t, not clamped.
        """
        coarse_height, coarse_width = conditions.coarse_shape
        expected = (coarse_height * FEATURE_STRIDE, coarse_width * FEATURE_STRIDE)
        if v_t.ndim != 4 or v_t.shape[1] != 2 or tuple(v_t.shape[-2:]) != expected:
            raise ShapeMismatch(f'v_t shape {tuple(v_t.shape)} does not match conditions at {expected}')
        if self.config.reset_hidden:
            conditions.reset()
        t = _time_tensor(t, v_t)

        v_t_coarse = F.avg_pool2d(v_t, FEATURE_STRIDE)
        flow = self.normalizer.denormalize(v_t_coarse) / FEATURE_STRIDE
        hidden = conditions.x_h
        x_o = None
        for _ in range(self.config.inner_iterations):
            corr_features = lookup_correlation(conditions.x_cv, flow, self.config.lookup_radius)
            hidden, delta_flow, x_o = self.update_block(
                hidden, conditions.x_c, corr_features, flow, t, v_t_coarse
            )
            flow = flow + delta_flow
        conditions.x_h = hidden
        conditions.x_o = x_o

        flow_full = convex_upsample(flow, self.mask_predictor(hidden))
        return self.normalizer.normalize(flow_full, clamp=False)

    def forward(self, v_t, t, conditions):
        return self.denoise_once(v_t, t, conditions)


def pseudo_color(frame: Tensor) -> Tensor:
    """Replicate single-channel images to three channels."""
    if frame.ndim != 4:
        raise ValueError('frames must have shape (N, C, H, W)')
    if frame.shape[1] == 1:
        return frame.expand(-1, 3, -1, -1)
    if frame.shape[1] != 3:
        raise ValueError(f'frames must have 1 or 3 channels, got {frame.shape[1]}')
    return frame


def _time_tensor(t: Union[int, Tensor], like: Tensor) -> Tensor:
    if isinstance(t, Tensor):
        t = t.to(dtype=like.dtype, device=like.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(like.shape[0])
        return t
    return torch.full((like.shape[0],), float(t), dtype=like.dtype, device=like.device)
