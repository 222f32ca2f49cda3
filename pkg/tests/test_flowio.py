import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pivdiffuser import flowio
from pivdiffuser.exceptions import EmptyDataset, MagicMismatch, MultiChannelInput, OrphanFile, TruncatedFile
from pivdiffuser.fields import CaseLabel, VelocityField


def _flo_bytes(width, height, payload, magic=202021.25):
    return struct.pack('<fii', magic, width, height) + struct.pack(f'<{len(payload)}f', *payload)


def test_read_hand_made_flo(tmp_path):
    path = tmp_path / 'a.flo'
    path.write_bytes(_flo_bytes(2, 1, [1.0, -2.0, 3.5, 0.0]))
    field = flowio.read_flo(path)
    assert np.array_equal(field.u, [[1.0, 3.5]])
    assert np.array_equal(field.v, [[-2.0, 0.0]])
    assert field.coordinate_scale == 1.0


def test_write_zero_pixel(tmp_path):
    path = tmp_path / 'zero.flo'
    flowio.write_flo(VelocityField.zeros(1, 1), path)
    data = path.read_bytes()
    assert len(data) == 20
    assert struct.unpack('<f', data[:4])[0] == 202021.25


@settings(deadline=None, max_examples=1000)
@given(
    st.integers(min_value=1, max_value=8),
    st.integers(min_value=1, max_value=8),
    st.integers(min_value=0, max_value=2 ** 32 - 1),
)
def test_flo_file_survives_read_and_write(tmp_path_factory, height, width, seed):
    directory = tmp_path_factory.mktemp('flo')
    payload = np.random.default_rng(seed).normal(size=height * width * 2).astype('<f4')
    original = directory / 'original.flo'
    original.write_bytes(struct.pack('<fii', 202021.25, width, height) + payload.tobytes())
    copy = directory / 'copy.flo'
    flowio.write_flo(flowio.read_flo(original), copy)
    assert copy.read_bytes() == original.read_bytes()


def test_bad_flo_files(tmp_path):
    path = tmp_path / 'bad.flo'
    path.write_bytes(_flo_bytes(2, 1, [1.0, 2.0, 3.0, 4.0], magic=0.0))
    with pytest.raises(MagicMismatch):
        flowio.read_flo(path)
    path.write_bytes(_flo_bytes(2, 2, [1.0, 2.0, 3.0]))
    with pytest.raises(TruncatedFile):
        flowio.read_flo(path)


def test_unknown_flow_is_masked(tmp_path):
    path = tmp_path / 'unknown.flo'
    path.write_bytes(_flo_bytes(2, 1, [1e10, 1e10, 1.0, 1.0]))
    field = flowio.read_flo(path)
    assert np.array_equal(field.valid_mask(), [[False, True]])


def test_write_upsampled_field_rejected(tmp_path):
    with pytest.raises(ValueError):
        flowio.write_flo(VelocityField.zeros(4, 4, coordinate_scale=2.0), tmp_path / 'a.flo')


def test_read_images(tmp_path):
    Image.fromarray(np.array([[0, 255]], dtype=np.uint8)).save(tmp_path / 'a.png')
    assert np.array_equal(flowio.read_image(tmp_path / 'a.png'), [[0.0, 1.0]])

    Image.fromarray(np.array([[0, 65535]], dtype=np.uint16)).save(tmp_path / 'b.png')
    assert np.allclose(flowio.read_image(tmp_path / 'b.png'), [[0.0, 1.0]])

    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / 'c.png')
    with pytest.raises(MultiChannelInput):
        flowio.read_image(tmp_path / 'c.png')


@pytest.mark.parametrize('bit_depth, extension', [(8, '.png'), (16, '.png'), (16, '.tif')])
def test_image_quantization(tmp_path, bit_depth, extension):
    intensities = np.linspace(0.0, 1.0, 16).reshape(4, 4)
    path = tmp_path / f'image{extension}'
    flowio.write_image(intensities, path, bit_depth=bit_depth)
    maximum = 255 if bit_depth == 8 else 65535
    assert np.allclose(flowio.read_image(path), np.round(intensities * maximum) / maximum)


def _write_case(root, case, names, with_flow=True):
    directory = root / case
    directory.mkdir(parents=True, exist_ok=True)
    for name in names:
        image1, image2, flow = flowio.sample_paths(directory, name)
        flowio.write_image(np.zeros((4, 4)), image1)
        flowio.write_image(np.zeros((4, 4)), image2)
        if with_flow:
            flowio.write_flo(VelocityField.zeros(4, 4), flow)


def test_manifest_splits_eight_one_one(tmp_path):
    _write_case(tmp_path, 'backstep', [f'frame{i:02d}' for i in range(10)])
    manifest = flowio.build_manifest(tmp_path, split_seed=3)
    assert len(manifest) == 10
    assert [len(manifest.split(name)) for name in ('train', 'val', 'test')] == [8, 1, 1]
    assert {entry.case_label for entry in manifest.entries} == {CaseLabel.BACKSTEP}
    assert manifest.split_assignment == flowio.build_manifest(tmp_path, split_seed=3).split_assignment


@settings(deadline=None, max_examples=30)
@given(st.integers(min_value=1, max_value=200), st.integers(min_value=0, max_value=1000))
def test_split_proportions(number, split_seed):
    splits = flowio.assign_splits([f's{i}' for i in range(number)], split_seed)
    train = sum(split == 'train' for split in splits.values())
    val = sum(split == 'val' for split in splits.values())
    assert train == int(np.ceil(0.8 * number - 1e-9))
    assert train + val == int(np.ceil(0.9 * number - 1e-9))


def test_manifest_write_and_read(tmp_path):
    _write_case(tmp_path, 'Cylinder', ['a', 'b', 'c'])
    _write_case(tmp_path, 'recordings', ['real'], with_flow=False)
    manifest = flowio.build_manifest(tmp_path)
    manifest.write()

    again = flowio.DatasetManifest.read(tmp_path / 'manifest.txt')
    assert again.entries == manifest.entries
    real = [entry for entry in again.entries if entry.sample_id == 'recordings/real'][0]
    assert real.flow is None
    assert real.split == 'test'
    assert real.case_label is CaseLabel.OTHER

    sample = again.load_sample(again.entries[0])
    assert sample.sample_id == 'Cylinder/a'
    assert sample.gt.shape == (4, 4)


def test_orphan_and_empty_datasets(tmp_path):
    (tmp_path / 'empty').mkdir()
    with pytest.raises(EmptyDataset):
        flowio.build_manifest(tmp_path)

    _write_case(tmp_path, 'uniform', ['a'])
    (tmp_path / 'uniform' / 'a_img2.png').unlink()
    with pytest.raises(OrphanFile):
        flowio.build_manifest(tmp_path)
