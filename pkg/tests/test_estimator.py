from types import SimpleNamespace

import numpy as np
import pytest
import torch

from pivdiffuser.diffusion import DiffusionSchedule, FlowNormalizer
from pivdiffuser.estimator import estimate, pad_to_multiple, resize
from pivdiffuser.fields import ImagePair
from pivdiffuser.network import FlowDiffuser, ModelConfig

SCHEDULE = DiffusionSchedule.create(1000, 'cosine', 6)


class ConstantDenoiser:
    """Predicts the normalized form of a fixed flow at the working resolution."""

    def __init__(self, flow, upsample_factor):
        self.config = SimpleNamespace(upsample_factor=upsample_factor)
        self.normalizer = FlowNormalizer()
        self.flow = flow
        self.encoded_shapes = []

    def encode(self, frame_a, frame_b):
        self.encoded_shapes.append(tuple(frame_a.shape))
        return None

    def denoise_once(self, v_t, t, conditions):
        flow = torch.empty_like(v_t)
        flow[:, 0], flow[:, 1] = self.flow
        return self.normalizer.normalize(flow)


@pytest.fixture
def pair():
    rng = np.random.default_rng(2)
    return ImagePair(rng.random((21, 30)), rng.random((21, 30)))


def test_scale_adaptation_restores_input_units(pair):
    # At twice the resolution a 1.5 px shift reads as 3 px
    model = ConstantDenoiser((3.0, -1.5), upsample_factor=2)
    flow = estimate(pair, model, SCHEDULE)
    assert model.encoded_shapes == [(1, 1, 48, 64)]
    assert flow.shape == (21, 30)
    assert np.allclose(flow.u, 1.5, atol=1e-6)
    assert np.allclose(flow.v, -0.75, atol=1e-6)


@pytest.mark.parametrize('shape', [(64, 64), (96, 64), (64, 96)])
def test_scale_adaptation_at_common_sizes(shape):
    rng = np.random.default_rng(3)
    model = ConstantDenoiser((3.0, -1.5), upsample_factor=2)
    flow = estimate(ImagePair(rng.random(shape), rng.random(shape)), model, SCHEDULE)
    assert model.encoded_shapes == [(1, 1, 2 * shape[0], 2 * shape[1])]
    assert flow.shape == shape
    assert np.abs(flow.u - 1.5).max() <= 1e-6
    assert np.abs(flow.v + 0.75).max() <= 1e-6


def test_factor_one_keeps_flow(pair):
    model = ConstantDenoiser((3.0, -1.5), upsample_factor=2)
    flow = estimate(pair, model, SCHEDULE, upsample_factor=1)
    assert model.encoded_shapes == [(1, 1, 24, 32)]
    assert np.allclose(flow.u, 3.0, atol=1e-6)
    assert np.allclose(flow.v, -1.5, atol=1e-6)


def test_rejects_other_factors(pair):
    with pytest.raises(ValueError):
        estimate(pair, ConstantDenoiser((0.0, 0.0), 2), SCHEDULE, upsample_factor=3)


def test_same_seed_same_estimate():
    torch.manual_seed(0)
    model = FlowDiffuser(ModelConfig.toy(upsample_factor=1)).eval()
    rng = np.random.default_rng(0)
    pair = ImagePair(rng.random((32, 32)), rng.random((32, 32)))
    first = estimate(pair, model, SCHEDULE, seed=5)
    second = estimate(pair, model, SCHEDULE, seed=5)
    assert first == second
    assert first.shape == (32, 32)
    assert np.isfinite(first.to_array()).all()


def test_resize_and_pad():
    images = torch.arange(12.0).view(1, 1, 3, 4)
    assert resize(images, factor=1) is images
    assert resize(images, factor=2).shape == (1, 1, 6, 8)
    padded = pad_to_multiple(images)
    assert padded.shape == (1, 1, 8, 8)
    assert torch.equal(padded[0, 0, :3, :4], images[0, 0])
    assert torch.equal(padded[0, 0, 7, :4], images[0, 0, 2])
    assert torch.equal(padded[0, 0, :3, 7], images[0, 0, :, 3])
    assert pad_to_multiple(padded) is padded
