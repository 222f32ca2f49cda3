import numpy as np
import pytest

from pivdiffuser.fields import CaseLabel, FlowSample, ImagePair, VelocityField, validate_sample


def _pair(shape_a=(64, 64), shape_b=(64, 64)):
    rng = np.random.default_rng(0)
    return ImagePair(rng.random(shape_a), rng.random(shape_b), source_id='pair')


def test_well_formed_sample_has_no_violations():
    gt = VelocityField.zeros(64, 64)
    assert validate_sample(FlowSample(_pair(), gt)) == []


def test_frame_shape_mismatch():
    assert validate_sample(FlowSample(_pair(shape_b=(64, 32)))) == ['frame shape mismatch']


def test_non_finite_flow_value():
    u = np.zeros((64, 64))
    u[3, 5] = np.nan
    gt = VelocityField(u=u, v=np.zeros((64, 64)))
    assert validate_sample(FlowSample(_pair(), gt)) == ['non-finite flow value']


@pytest.mark.parametrize(
    'frame, violation',
    [
        (np.full((64, 64), 1.5), 'intensity out of range'),
        (np.full((8, 8), 0.5), 'image too small'),
    ],
)
def test_frame_violations(frame, violation):
    sample = FlowSample(ImagePair(frame, frame))
    assert violation in validate_sample(sample)


def test_flow_shape_mismatch():
    sample = FlowSample(_pair(), VelocityField.zeros(32, 64))
    assert validate_sample(sample) == ['flow shape mismatch']


def test_arrays_are_read_only_copies():
    frame = np.zeros((16, 16))
    pair = ImagePair(frame, frame)
    frame[0, 0] = 1.0
    assert pair.frame_a[0, 0] == 0.0
    with pytest.raises(ValueError):
        pair.frame_a[0, 0] = 1.0


def test_velocity_field_array_conversion():
    flow = np.arange(24, dtype=np.float32).reshape(3, 4, 2)
    field = VelocityField.from_array(flow)
    assert field.shape == (3, 4)
    assert np.allclose(field.u, flow[..., 0])
    assert np.allclose(field.v, flow[..., 1])
    assert np.array_equal(field.to_array(), flow)
    assert np.allclose(field.magnitude, np.hypot(flow[..., 0], flow[..., 1]))


def test_valid_mask_excludes_sentinels():
    u = np.zeros((2, 2))
    u[0, 0] = 1e10
    u[1, 1] = np.inf
    valid = np.array([[True, False], [True, True]])
    field = VelocityField(u=u, v=np.zeros((2, 2)), valid=valid)
    assert np.array_equal(field.valid_mask(), [[False, False], [True, False]])


def test_coordinate_scale_restricted():
    VelocityField.zeros(4, 4, coordinate_scale=2.0)
    with pytest.raises(ValueError):
        VelocityField.zeros(4, 4, coordinate_scale=3.0)


def test_sample_labels():
    sample = FlowSample(_pair(), case_label='Cylinder', split='val')
    assert sample.case_label is CaseLabel.CYLINDER
    assert str(sample.case_label) == 'Cylinder'
    assert sample.sample_id == 'pair'
    with pytest.raises(ValueError):
        FlowSample(_pair(), split='holdout')
    with pytest.raises(ValueError):
        FlowSample(_pair(), case_label='Vortex street')
