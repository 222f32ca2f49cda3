import zlib

import numpy as np
import pytest

from pivdiffuser.fields import CaseLabel, FlowSample, ImagePair, VelocityField


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running test, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_sample(
    sample_id='case/sample', flow=(1.0, 0.0), shape=(16, 16), case_label=CaseLabel.UNIFORM, split='test'
):
    """Sample with random frames and a constant ground-truth flow."""
    rng = np.random.default_rng(zlib.crc32(sample_id.encode()))
    pair = ImagePair(rng.random(shape), rng.random(shape), source_id=sample_id)
    gt = VelocityField(u=np.full(shape, flow[0]), v=np.full(shape, flow[1]))
    return FlowSample(pair=pair, gt=gt, case_label=case_label, split=split)


@pytest.fixture
def sample_factory():
    return make_sample
