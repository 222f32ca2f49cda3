import shutil

import numpy as np
import pytest

from pivdiffuser import flowio
from pivdiffuser.checkpoint import Checkpoint, save_checkpoint
from pivdiffuser.cli import main
from pivdiffuser.config import RunConfig
from pivdiffuser.diffusion import DiffusionConfig
from pivdiffuser.flowio import DatasetManifest
from pivdiffuser.network import FlowDiffuser, ModelConfig
from pivdiffuser.report import read_report

SIZE = ['--set', 'generator.height=64', '--set', 'generator.width=64']


def _files(directory):
    return {path.relative_to(directory): path.read_bytes() for path in directory.rglob('*') if path.is_file()}


@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp('dataset')
    args = ['gen', '--out', str(out), '--flows', 'uniform,rotation', '--per-flow', '4', '--seed', '3']
    assert main(args + SIZE) == 0
    return out


@pytest.fixture(scope='module')
def gt_copies(dataset, tmp_path_factory):
    """Prediction directory holding the ground truth itself."""
    out = tmp_path_factory.mktemp('gt_copies')
    manifest = DatasetManifest.read(dataset / 'manifest.txt')
    for entry in manifest.entries:
        target = out / f'{entry.sample_id}_flow.flo'
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy(manifest.path(entry.flow), target)
    return out


def test_gen_writes_indexed_dataset(dataset):
    lines = (dataset / 'manifest.txt').read_text().splitlines()
    assert len(lines) == 8
    assert {line.split('\t')[4] for line in lines} == {'Unlabeled'}
    assert (dataset / 'config.toml').exists()
    assert flowio.read_image(dataset / 'Unlabeled' / 'uniform_00000_img1.png').shape == (64, 64)


def test_gen_is_reproducible(dataset, tmp_path):
    args = ['gen', '--out', str(tmp_path), '--flows', 'uniform,rotation', '--per-flow', '4', '--seed', '3']
    assert main(args + SIZE) == 0
    assert _files(tmp_path) == _files(dataset)


def test_missing_manifest_is_a_usage_error(tmp_path, capsys):
    code = main(['eval', '--pred-dir', str(tmp_path), '--manifest', str(tmp_path / 'manifest.txt')])
    assert code == 2
    assert 'error:' in capsys.readouterr().err


def test_bad_override_is_a_usage_error(dataset):
    assert main(['gen', '--out', str(dataset), '--set', 'generator.colour=1']) == 2


def test_baseline_on_still_particles(tmp_path):
    data = tmp_path / 'still'
    args = ['gen', '--out', str(data), '--per-flow', '2', '--set', 'flow_parameters.uniform.u0=0.0']
    assert main(args + SIZE) == 0
    out = tmp_path / 'widim'
    assert main(['baseline', '--manifest', str(data / 'manifest.txt'), '--split', 'all', '--out', str(out)]) == 0
    flows = sorted(out.rglob('*.flo'))
    assert len(flows) == 2
    for path in flows:
        flow = flowio.read_flo(path)
        assert flow.shape == (64, 64)
        assert np.abs(flow.to_array()).mean() < 0.1
    assert (out / 'timing.tsv').exists()


def test_eval_of_ground_truth(dataset, gt_copies, tmp_path):
    manifest = str(dataset / 'manifest.txt')
    out = tmp_path / 'eval'
    args = ['eval', '--pred-dir', str(gt_copies), '--manifest', manifest, '--split', 'all', '--out', str(out)]
    assert main(args) == 0
    report = read_report(out)
    assert report.overall.aee == 0.0
    assert report.overall.rmse == 0.0
    assert report.overall.count == 8
    assert report.overall.aae == pytest.approx(0.0, abs=1e-5)
    assert (out / 'report.txt').exists()
    assert len(list((out / 'figures').rglob('*.png'))) == 8

    merged = tmp_path / 'merged'
    assert main(['report', str(out), str(out), '--out', str(merged)]) == 0
    assert 'AEE per case' in (merged / 'report.txt').read_text()


def test_eval_with_missing_prediction(dataset, gt_copies, tmp_path):
    partial = tmp_path / 'partial'
    shutil.copytree(gt_copies, partial)
    next(partial.rglob('*.flo')).unlink()
    args = ['eval', '--pred-dir', str(partial), '--manifest', str(dataset / 'manifest.txt'), '--split', 'all']
    assert main(args + ['--out', str(tmp_path / 'eval')]) == 4


def test_plot(dataset, gt_copies, tmp_path):
    out = tmp_path / 'figures'
    args = ['plot', str(gt_copies), '--manifest', str(dataset / 'manifest.txt'), '--split', 'all']
    assert main(args + ['--out', str(out), '--set', 'plot.max_figures=2']) == 0
    assert len(list(out.rglob('*.png'))) == 4


def test_infer_with_toy_checkpoint(dataset, tmp_path):
    config = RunConfig(model=ModelConfig.toy(upsample_factor=1), diffusion=DiffusionConfig(inference_steps=2))
    config_path = config.write(tmp_path / 'toy.toml')
    model = FlowDiffuser(config.model, config.diffusion.make_normalizer())
    checkpoint = save_checkpoint(Checkpoint.from_model(model), tmp_path / 'toy.h5')

    out = tmp_path / 'predictions'
    args = ['infer', '--config', str(config_path), '--checkpoint', str(checkpoint), '--out', str(out)]
    assert main(args + ['--manifest', str(dataset / 'manifest.txt'), '--split', 'all']) == 0
    flows = sorted(out.rglob('*.flo'))
    assert len(flows) == 8
    assert flowio.read_flo(flows[0]).shape == (64, 64)

    image1 = dataset / 'Unlabeled' / 'uniform_00000_img1.png'
    image2 = dataset / 'Unlabeled' / 'uniform_00000_img2.png'
    pair_out = tmp_path / 'pair'
    args = ['infer', '--config', str(config_path), '--checkpoint', str(checkpoint), '--out', str(pair_out)]
    assert main(args + ['--pair', str(image1), str(image2)]) == 0
    assert (pair_out / 'uniform_00000_flow.flo').exists()
