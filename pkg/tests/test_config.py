import pytest

from pivdiffuser.config import RunConfig
from pivdiffuser.network import ModelConfig
from pivdiffuser.training import TrainConfig


def test_defaults_round_trip_through_file(tmp_path):
    config = RunConfig()
    filename = config.write(tmp_path / 'config.toml')
    assert RunConfig.load(filename) == config


def test_written_file_documents_every_section(tmp_path):
    text = RunConfig().dumps(header='resolved run config')
    for section in ('model', 'diffusion', 'train', 'data', 'generator', 'widim', 'metrics', 'plot'):
        assert f'[{section}]' in text
    assert '# resolved run config' in text
    assert '# recurrent iterations K per denoising step' in text


def test_overrides_are_typed():
    config = RunConfig().with_overrides(
        ['train.total_steps=10', 'model.ee_fusion="add"', 'widim.window_sizes=[32, 16]', 'model.reset_hidden=true']
    )
    assert config.train.total_steps == 10
    assert config.model.ee_fusion == 'add'
    assert config.widim.window_sizes == (32, 16)
    assert config.model.reset_hidden is True
    assert config.diffusion == RunConfig().diffusion


def test_overrides_on_a_loaded_file(tmp_path):
    filename = tmp_path / 'config.toml'
    filename.write_text('[model]\ninner_iterations = 2\n')
    config = RunConfig.load(filename, ['train.seed=7'])
    assert config.model == ModelConfig(inner_iterations=2)
    assert config.train == TrainConfig(seed=7)


@pytest.mark.parametrize(
    'override, message',
    [
        ('optimizer.lr=1', "unknown config section 'optimizer'"),
        ('train.learning_rate=1', "unknown config key 'train.learning_rate'"),
        ('train.total_steps', 'section.key=value'),
        ('total_steps=3', 'section.key'),
        ('train.total_steps=0', 'total_steps must be at least 1'),
        ('flow_parameters.vortex.circulation=3', "unknown config key 'flow_parameters.vortex'"),
    ],
)
def test_bad_overrides(override, message):
    with pytest.raises(ValueError, match=message):
        RunConfig().with_overrides([override])


def test_unknown_section_in_file(tmp_path):
    filename = tmp_path / 'config.toml'
    filename.write_text('[schedule]\nT = 10\n')
    with pytest.raises(ValueError, match="unknown config section 'schedule'"):
        RunConfig.load(filename)


def test_flow_parameters_feed_analytic_flows(tmp_path):
    config = RunConfig().with_overrides(['flow_parameters.uniform.u0=3.25', 'flow_parameters.uniform.v0=-2.5'])
    (flow,) = config.analytic_flows(['uniform'])
    assert flow.parameters == {'u0': 3.25, 'v0': -2.5}

    filename = config.write(tmp_path / 'config.toml')
    assert RunConfig.load(filename).flow_parameters == {'uniform': {'u0': 3.25, 'v0': -2.5}}
