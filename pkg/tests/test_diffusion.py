import math

import numpy as np
import pytest
import torch

from pivdiffuser.diffusion import (
    DiffusionConfig,
    DiffusionSchedule,
    FlowNormalizer,
    denormalize_flow,
    evenly_spaced_steps,
    forward_noise,
    normalize_flow,
    reverse_step,
    sample,
)
from pivdiffuser.exceptions import ScheduleIndexError, ShapeMismatch

SCHEDULE = DiffusionSchedule.create(T=1000, schedule='cosine', inference_step_count=6)


def _constant_denoiser(value):
    def denoiser(v_t, t, conditions):
        return torch.full_like(v_t, value)

    return denoiser


def test_normalizer():
    normalizer = FlowNormalizer(scale_max=16.0)
    assert normalizer.normalize(np.array(16.0)) == 1.0
    assert normalizer.normalize(np.array(40.0)) == 1.0
    assert normalizer.normalize(np.array(-40.0)) == -1.0
    assert normalizer.normalize(np.array(40.0), clamp=False) == 2.5

    flow = torch.linspace(-30.0, 30.0, 11)
    assert torch.allclose(normalizer.denormalize(normalizer.normalize(flow, clamp=False)), flow)
    with pytest.raises(ValueError):
        FlowNormalizer(scale_max=0.0)


def test_normalize_flow_round_trip_within_range():
    normalizer = FlowNormalizer()
    field = np.linspace(-16.0, 16.0, 33).reshape(3, 11)
    normalized = normalize_flow(field, normalizer)
    assert np.abs(normalized).max() == 1.0
    assert np.array_equal(denormalize_flow(normalized, normalizer), field)
    assert normalize_flow(np.array([-20.0, 20.0]), normalizer).tolist() == [-1.0, 1.0]


def test_schedule_shape():
    assert SCHEDULE.alpha_bar(0) == 1.0
    values = SCHEDULE.alphas_cumprod
    assert values.shape == (1001,)
    assert np.all(np.diff(values) < 0)
    assert values[-1] < 1e-3
    assert np.all(SCHEDULE.betas <= 0.999)


def test_linear_schedule():
    schedule = DiffusionSchedule.create(T=1000, schedule='linear')
    assert np.isclose(schedule.betas[0], 1e-4)
    assert np.isclose(schedule.betas[-1], 0.02)


def test_schedule_index_errors():
    with pytest.raises(ScheduleIndexError):
        SCHEDULE.alpha_bar(1001)
    with pytest.raises(ScheduleIndexError):
        SCHEDULE.alpha_bar(-1)
    with pytest.raises(ScheduleIndexError):
        reverse_step(torch.zeros(1), 5, 5, torch.zeros(1), SCHEDULE)
    with pytest.raises(ScheduleIndexError):
        forward_noise(torch.zeros(1, 2), 0, torch.zeros(1, 2), SCHEDULE)


def test_inference_steps():
    assert SCHEDULE.inference_steps == (1000, 833, 667, 500, 333, 167)
    assert evenly_spaced_steps(10, 10) == tuple(range(10, 0, -1))
    assert SCHEDULE.with_inference_steps(12).inference_steps[0] == 1000
    with pytest.raises(ValueError):
        evenly_spaced_steps(10, 0)


def test_forward_noise_without_noise():
    v0 = torch.tensor([[[[0.5, -0.25], [1.0, 0.0]]]], dtype=torch.float64)
    v_t = forward_noise(v0, 300, torch.zeros_like(v0), SCHEDULE)
    assert torch.allclose(v_t, math.sqrt(SCHEDULE.alpha_bar(300)) * v0)


def test_forward_noise_elementwise():
    rng = np.random.default_rng(1)
    v0 = rng.normal(size=(1, 1, 2, 2))
    noise = rng.normal(size=(1, 1, 2, 2))
    v_t = forward_noise(torch.from_numpy(v0), 400, torch.from_numpy(noise), SCHEDULE).numpy()
    alpha_bar = SCHEDULE.alphas_cumprod[400]
    for index in np.ndindex(v0.shape):
        expected = math.sqrt(alpha_bar) * v0[index] + math.sqrt(1 - alpha_bar) * noise[index]
        assert abs(v_t[index] - expected) < 1e-7


def test_forward_noise_per_sample_time_steps():
    v0 = torch.ones(2, 2, 4, 4, dtype=torch.float64)
    v_t = forward_noise(v0, torch.tensor([10, 900]), torch.zeros_like(v0), SCHEDULE)
    assert torch.allclose(v_t[0], torch.full((2, 4, 4), math.sqrt(SCHEDULE.alpha_bar(10)), dtype=torch.float64))
    assert torch.allclose(v_t[1], torch.full((2, 4, 4), math.sqrt(SCHEDULE.alpha_bar(900)), dtype=torch.float64))
    with pytest.raises(ShapeMismatch):
        forward_noise(v0, 10, torch.zeros(2, 2, 4, 3), SCHEDULE)


def test_forward_noise_at_last_step_is_mostly_noise():
    v0 = torch.ones(1, 2, 4, 4, dtype=torch.float64)
    noise = torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    v_t = forward_noise(v0, 1000, noise, SCHEDULE)
    assert (v_t - noise).abs().max() <= math.sqrt(SCHEDULE.alpha_bar(1000)) + 1e-3


def test_reverse_step_to_zero_returns_prediction():
    v_t = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    predicted = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    assert torch.equal(reverse_step(v_t, 167, 0, predicted, SCHEDULE), predicted)


def test_reverse_step_scalar():
    alpha_bar, alpha_bar_prev = SCHEDULE.alphas_cumprod[500], SCHEDULE.alphas_cumprod[333]
    v_t, predicted = 0.3, -0.7
    eps = (v_t - math.sqrt(alpha_bar) * predicted) / math.sqrt(1 - alpha_bar)
    expected = math.sqrt(alpha_bar_prev) * predicted + math.sqrt(1 - alpha_bar_prev) * eps
    out = reverse_step(
        torch.tensor([v_t], dtype=torch.float64), 500, 333, torch.tensor([predicted], dtype=torch.float64), SCHEDULE
    )
    assert abs(out.item() - expected) < 1e-7


def test_chain_with_true_v0_recovers_v0():
    generator = torch.Generator().manual_seed(3)
    v0 = torch.rand(1, 2, 8, 8, generator=generator) * 2 - 1
    v_t = forward_noise(v0, 1000, torch.randn(1, 2, 8, 8, generator=generator), SCHEDULE)
    steps = list(SCHEDULE.inference_steps) + [0]
    for t, t_prev in zip(steps[:-1], steps[1:]):
        v_t = reverse_step(v_t, t, t_prev, v0, SCHEDULE)
    assert torch.allclose(v_t, v0, atol=1e-5)


@pytest.mark.parametrize('count', [6, 12])
def test_sample_with_constant_denoiser(count):
    schedule = SCHEDULE.with_inference_steps(count)
    out = sample(_constant_denoiser(0.25), None, (2, 2, 8, 8), schedule, rng=5)
    assert torch.allclose(out, torch.full((2, 2, 8, 8), 0.25), atol=1e-5)


def test_sample_is_deterministic():
    def denoiser(v_t, t, conditions):
        return 0.5 * v_t

    first = sample(denoiser, None, (1, 2, 8, 8), SCHEDULE, rng=7)
    second = sample(denoiser, None, (1, 2, 8, 8), SCHEDULE, rng=7)
    other = sample(denoiser, None, (1, 2, 8, 8), SCHEDULE, rng=8)
    assert torch.equal(first, second)
    assert not torch.equal(first, other)


def test_stochastic_sampler_depends_on_seed():
    schedule = DiffusionSchedule.create(T=100, inference_step_count=5, sampler_eta=1.0)

    def denoiser(v_t, t, conditions):
        return torch.zeros_like(v_t)

    first = sample(denoiser, None, (1, 2, 4, 4), schedule, rng=0)
    second = sample(denoiser, None, (1, 2, 4, 4), schedule, rng=0)
    assert torch.equal(first, second)


def test_sample_checks_denoiser_shape():
    def denoiser(v_t, t, conditions):
        return v_t[..., :4]

    with pytest.raises(ShapeMismatch):
        sample(denoiser, None, (1, 2, 8, 8), SCHEDULE)


@pytest.mark.parametrize(
    'values', [{'T': 0}, {'schedule': 'sigmoid'}, {'inference_steps': 0}, {'eta': 1.5}, {'scale_max': -1.0}]
)
def test_config_ranges(values):
    with pytest.raises(ValueError):
        DiffusionConfig.from_dict(values)


def test_config_makes_schedule_and_normalizer():
    cfg = DiffusionConfig(T=100, inference_steps=4, scale_max=8.0)
    schedule = cfg.make_schedule()
    assert schedule.T == 100
    assert len(schedule.inference_steps) == 4
    assert cfg.make_normalizer() == FlowNormalizer(scale_max=8.0)
