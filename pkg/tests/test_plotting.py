import numpy as np
import pytest

from pivdiffuser.fields import VelocityField
from pivdiffuser.metrics import residual_map
from pivdiffuser.plotting import PlotConfig, plot_comparison, plot_components, plot_residual


@pytest.fixture
def fields():
    y, x = np.mgrid[0:32, 0:32].astype(float)
    gt_u = -(y - 16) * 0.1
    gt_u[0, 0] = np.nan
    gt = VelocityField(u=gt_u, v=(x - 16) * 0.1)
    pred = VelocityField(u=np.nan_to_num(gt_u) + 0.2, v=(x - 16) * 0.1)
    return gt, pred


def test_figures_are_written(tmp_path, fields):
    gt, pred = fields
    cfg = PlotConfig(quiver_stride=4, dpi=50)
    paths = [
        plot_comparison(gt, {'ours': pred, 'widim': gt}, tmp_path / 'comparison.png', cfg, title='rotation'),
        plot_components(gt, pred, tmp_path / 'components.png', cfg),
        plot_residual(residual_map(pred, gt), tmp_path / 'sub' / 'residual.png', cfg),
    ]
    for path in paths:
        assert path.read_bytes()[:8] == b'\x89PNG\r\n\x1a\n'


def test_figures_are_reproducible(tmp_path, fields):
    gt, pred = fields
    first = plot_comparison(gt, {'ours': pred}, tmp_path / 'first.png')
    second = plot_comparison(gt, {'ours': pred}, tmp_path / 'second.png')
    assert first.read_bytes() == second.read_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        PlotConfig.from_dict({'quiver_stride': 0})
    with pytest.raises(ValueError):
        PlotConfig.from_dict({'magnitude_colormap': 'no-such-map'})
