import doctest
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivdiffuser import metrics
from pivdiffuser.exceptions import EmptyValidSet, ShapeMismatch
from pivdiffuser.fields import VelocityField
from pivdiffuser.metrics import (
    RESIDUAL_SENTINEL,
    MetricOptions,
    aae,
    aae_with_tally,
    aee,
    residual_map,
    rmse,
    valid_pixels,
)


def constant(u, v, shape=(6, 5)):
    return VelocityField(u=np.full(shape, float(u)), v=np.full(shape, float(v)))


@pytest.mark.parametrize(
    'pred, gt, expected',
    [
        ((1.0, 2.0), (1.0, 2.0), 0.0),
        ((1.0, 0.0), (0.0, 0.0), 1.0),
        ((3.0, 4.0), (0.0, 0.0), 5.0),
        ((2.0, 2.0), (1.0, 1.0), math.sqrt(2.0)),
    ],
)
def test_aee_and_rmse_of_constant_fields(pred, gt, expected):
    assert aee(constant(*pred), constant(*gt)) == pytest.approx(expected)
    assert rmse(constant(*pred), constant(*gt)) == pytest.approx(expected)


@pytest.mark.parametrize(
    'pred, expected', [((1.0, 0.0), 0.0), ((0.0, 1.0), math.pi / 2), ((-1.0, 0.0), math.pi)]
)
def test_aae(pred, expected):
    assert abs(aae(constant(*pred), constant(1.0, 0.0)) - expected) <= 1e-12


def test_zero_vectors_are_excluded_from_aae():
    pred = constant(0.0, 2.0)
    gt_u = np.ones((6, 5))
    gt_u[0] = 0.0
    gt = VelocityField(u=gt_u, v=np.zeros((6, 5)))
    angle, excluded = aae_with_tally(pred, gt)
    assert excluded == 5
    assert abs(angle - math.pi / 2) <= 1e-12

    antiparallel = VelocityField(u=-gt_u, v=np.zeros((6, 5)))
    angle, excluded = aae_with_tally(constant(1.0, 0.0), antiparallel)
    assert excluded == 5
    assert abs(angle - math.pi) <= 1e-12
    with pytest.raises(EmptyValidSet):
        aae(constant(0.0, 0.0), constant(1.0, 0.0))


def _loop_metrics(pred, gt):
    height, width = gt.shape[1:]
    errors, angles = [], []
    for row in range(height):
        for column in range(width):
            pu, pv = pred[0, row, column], pred[1, row, column]
            gu, gv = gt[0, row, column], gt[1, row, column]
            errors.append(math.hypot(pu - gu, pv - gv))
            cosine = (pu * gu + pv * gv) / (math.hypot(pu, pv) * math.hypot(gu, gv))
            angles.append(math.acos(min(1.0, max(-1.0, cosine))))
    count = len(errors)
    return (
        sum(errors) / count,
        math.sqrt(sum(error * error for error in errors) / count),
        sum(angles) / count,
    )


def test_metrics_match_explicit_loops():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, gt = rng.normal(scale=3.0, size=(2, 2, 16, 16))
        expected_aee, expected_rmse, expected_aae = _loop_metrics(pred, gt)
        assert abs(aee(pred, gt) - expected_aee) <= 1e-6
        assert abs(rmse(pred, gt) - expected_rmse) <= 1e-6
        assert abs(aae(pred, gt) - expected_aae) <= 1e-6


@settings(deadline=None, max_examples=50)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_metrics_ignore_pixel_order(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 2, 8, 12))
    order = rng.permutation(8 * 12)
    shuffled_pred = pred.reshape(2, -1)[:, order].reshape(2, 8, 12)
    shuffled_gt = gt.reshape(2, -1)[:, order].reshape(2, 8, 12)
    for metric in (aee, rmse, aae):
        assert metric(shuffled_pred, shuffled_gt) == pytest.approx(metric(pred, gt), rel=1e-12, abs=1e-12)


@settings(deadline=None, max_examples=50)
@given(
    st.integers(min_value=0, max_value=2 ** 32 - 1),
    st.floats(min_value=0.1, max_value=10.0),
    st.booleans(),
)
def test_scaling_both_fields(seed, magnitude, negative):
    scale = -magnitude if negative else magnitude
    pred, gt = np.random.default_rng(seed).normal(size=(2, 2, 8, 8))
    assert aee(scale * pred, scale * gt) == pytest.approx(magnitude * aee(pred, gt), rel=1e-9)
    assert aae(scale * pred, scale * gt) == pytest.approx(aae(pred, gt), rel=1e-9, abs=1e-12)


def test_residual_map_mean_is_aee():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(2, 2, 10, 9))
    gt[:, 4, 4] = np.nan
    residual = residual_map(pred, gt)
    mask = valid_pixels(pred, gt)
    assert residual[~mask].tolist() == [RESIDUAL_SENTINEL]
    assert np.mean(residual[mask]) == pytest.approx(aee(pred, gt), rel=1e-12)


def test_docstring_examples():
    assert doctest.testmod(metrics, extraglobs={'np': np, 'VelocityField': VelocityField}).failed == 0


def test_invalid_and_border_pixels_are_skipped():
    gt = np.zeros((2, 6, 6))
    gt[:, 2, 3] = np.nan
    gt[0, 3, 2] = 2e9
    pred = np.ones((2, 6, 6))
    mask = valid_pixels(pred, gt)
    assert mask.sum() == 34
    assert aee(pred, gt) == pytest.approx(math.sqrt(2.0))

    cropped = valid_pixels(pred, gt, MetricOptions(border_crop=1))
    assert cropped.sum() == 14
    assert not cropped[0].any() and not cropped[:, -1].any()

    residual = residual_map(pred, gt)
    assert residual[2, 3] == RESIDUAL_SENTINEL and residual[3, 2] == RESIDUAL_SENTINEL
    assert residual[0, 0] == pytest.approx(math.sqrt(2.0))


def test_metric_errors():
    with pytest.raises(ShapeMismatch):
        aee(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))
    mismatched_v = VelocityField(u=np.zeros((4, 4)), v=np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        aee(mismatched_v, VelocityField.zeros(4, 4))
    with pytest.raises(ShapeMismatch):
        aee(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(EmptyValidSet):
        aee(np.zeros((2, 4, 4)), np.full((2, 4, 4), np.nan))
    with pytest.raises(ValueError):
        MetricOptions.from_dict({'pooling': 'case'})
