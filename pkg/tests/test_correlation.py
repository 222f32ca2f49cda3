import math

import torch
import torch.nn.functional as F

from pivdiffuser.correlation import build_correlation_pyramid, correlation_volume, lookup_correlation


def _features(channels=8, height=8, width=8, seed=0, batch=1):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(batch, channels, height, width, generator=generator, dtype=torch.float64)


def test_volume_matches_pairwise_dot_products():
    fmap1, fmap2 = _features(seed=0, height=2, width=2), _features(seed=1, height=2, width=2)
    volume = correlation_volume(fmap1, fmap2)
    assert volume.shape == (4, 1, 2, 2)
    for y1 in range(2):
        for x1 in range(2):
            for y2 in range(2):
                for x2 in range(2):
                    expected = torch.dot(fmap1[0, :, y1, x1], fmap2[0, :, y2, x2]) / math.sqrt(8)
                    assert torch.isclose(volume[2 * y1 + x1, 0, y2, x2], expected)


def test_identical_unit_features_peak_at_zero_displacement():
    fmap = F.normalize(_features(height=4, width=4), dim=1)
    volume = correlation_volume(fmap, fmap).view(16, 16)
    assert torch.equal(volume.argmax(dim=1), torch.arange(16))


def test_pyramid_shapes():
    pyramid = build_correlation_pyramid(_features(), _features(seed=1), levels=4)
    assert [tuple(level.shape) for level in pyramid] == [(64, 1, 8, 8), (64, 1, 4, 4), (64, 1, 2, 2), (64, 1, 1, 1)]


def test_pyramid_beyond_single_pixel():
    pyramid = build_correlation_pyramid(_features(height=2, width=6), _features(seed=1, height=2, width=6), levels=4)
    assert [tuple(level.shape[-2:]) for level in pyramid] == [(2, 6), (1, 3), (1, 1), (1, 1)]


def test_lookup_zero_flow_reads_own_window():
    volume = correlation_volume(_features(), _features(seed=1))
    radius = 1
    features = lookup_correlation([volume], torch.zeros(1, 2, 8, 8, dtype=torch.float64), radius)
    assert features.shape == (1, 9, 8, 8)
    for y in range(8):
        for x in range(8):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    channel = 3 * (dy + 1) + (dx + 1)
                    inside = 0 <= y + dy < 8 and 0 <= x + dx < 8
                    expected = volume[8 * y + x, 0, y + dy, x + dx] if inside else 0.0
                    assert torch.isclose(features[0, channel, y, x], torch.as_tensor(expected, dtype=torch.float64))


def test_lookup_integer_flow_shifts_window():
    volume = correlation_volume(_features(), _features(seed=1))
    flow = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    flow[:, 0] = 2.0
    flow[:, 1] = -1.0
    features = lookup_correlation([volume], flow, radius=1)
    for y in range(1, 7):
        for x in range(0, 5):
            center = volume[8 * y + x, 0, y - 1, x + 2]
            assert torch.isclose(features[0, 4, y, x], center)
            assert torch.isclose(features[0, 5, y, x], volume[8 * y + x, 0, y - 1, x + 3] if x + 3 < 8 else torch.tensor(0.0, dtype=torch.float64))


def test_lookup_channels_per_level():
    pyramid = build_correlation_pyramid(_features(batch=2), _features(seed=1, batch=2), levels=3)
    features = lookup_correlation(pyramid, torch.randn(2, 2, 8, 8, dtype=torch.float64), radius=2)
    assert features.shape == (2, 3 * 25, 8, 8)
    assert torch.isfinite(features).all()
