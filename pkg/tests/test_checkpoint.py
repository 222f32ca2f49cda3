import numpy as np
import pytest
import torch

from pivdiffuser.checkpoint import (
    Checkpoint,
    load_checkpoint,
    remap_checkpoint,
    rename,
    restore_optimizer,
    save_checkpoint,
)
from pivdiffuser.network import FlowDiffuser, ModelConfig

HEAD_BIAS = 'update_block.flow_head.conv2.bias'


def _model(seed=0, **kwargs):
    torch.manual_seed(seed)
    return FlowDiffuser(ModelConfig.toy(**kwargs))


@pytest.fixture
def source():
    return _model(seed=0)


@pytest.fixture
def target():
    return _model(seed=1)


def _entries(model):
    return Checkpoint.from_model(model).entries


def test_save_and_load(tmp_path, source):
    optimizer = torch.optim.AdamW(source.parameters(), lr=1e-3)
    source.zero_grad()
    sum(parameter.sum() for parameter in source.parameters()).backward()
    optimizer.step()

    checkpoint = Checkpoint.from_model(source, optimizer=optimizer, step=7, config_text='[model]')
    filename = save_checkpoint(checkpoint, tmp_path / 'run' / 'step.h5')
    assert not list(filename.parent.glob('*.tmp'))

    loaded = load_checkpoint(filename)
    assert loaded.step == 7
    assert loaded.metadata['config'] == '[model]'
    assert loaded.entries.keys() == checkpoint.entries.keys()
    for name, array in checkpoint.entries.items():
        assert np.array_equal(loaded.entries[name], array)
    assert loaded.optimizer_state.keys() == checkpoint.optimizer_state.keys()

    fresh = _model(seed=3)
    fresh.load_state_dict(source.state_dict())
    fresh_optimizer = torch.optim.AdamW(fresh.parameters(), lr=1e-3)
    restore_optimizer(fresh, fresh_optimizer, loaded)
    for (_, mine), (_, theirs) in zip(fresh.named_parameters(), source.named_parameters()):
        assert torch.equal(fresh_optimizer.state[mine]['exp_avg'], optimizer.state[theirs]['exp_avg'])


def test_load_errors(tmp_path):
    with pytest.raises(ValueError, match='cannot find'):
        load_checkpoint(tmp_path / 'absent.h5')
    unknown = tmp_path / 'weights.bin'
    unknown.write_bytes(b'')
    with pytest.raises(ValueError, match='suffix'):
        load_checkpoint(unknown)


def test_non_finite_entries_rejected():
    with pytest.raises(ValueError, match='non-finite'):
        Checkpoint(entries={'weight': np.array([1.0, np.nan])})


@pytest.mark.parametrize(
    'name, expected',
    [
        ('module.fnet.conv1.weight', 'feature_encoder.convnormrelu.0.weight'),
        ('fnet.layer2.1.conv2.bias', 'feature_encoder.layer2.1.convnormrelu2.0.bias'),
        ('cnet.conv2.weight', 'context_encoder.conv.weight'),
        ('update_block.encoder.convc1.weight', 'update_block.embedding.motion_encoder.convcorr1.0.weight'),
        ('update_block.encoder.convf2.bias', 'update_block.embedding.motion_encoder.convflow2.0.bias'),
        ('update_block.encoder.conv.weight', 'update_block.embedding.motion_encoder.conv.0.weight'),
        ('update_block.gru.convz1.weight', 'update_block.recurrent_block.convgru1.convz.weight'),
        ('update_block.gru.convq2.bias', 'update_block.recurrent_block.convgru2.convq.bias'),
        ('update_block.mask.0.weight', 'mask_predictor.convrelu.0.weight'),
        ('update_block.mask.2.bias', 'mask_predictor.conv.bias'),
        ('update_block.flow_head.conv1.weight', 'update_block.flow_head.conv1.weight'),
    ],
)
def test_rename(name, expected):
    assert rename(name) == expected


def test_remap_same_architecture(source, target):
    audit = remap_checkpoint(Checkpoint.from_model(source), target)
    assert audit.loaded_by('exact') == sorted(source.state_dict())
    assert not audit.missing and not audit.skipped and not audit.ambiguous
    assert audit.ee_fusion == 'add'
    for name, tensor in source.state_dict().items():
        assert torch.equal(target.state_dict()[name], tensor)


def test_remap_detects_concat_fusion():
    checkpoint = Checkpoint.from_model(_model(ee_fusion='concat'))
    audit = remap_checkpoint(checkpoint, _model(seed=1, ee_fusion='concat'))
    assert audit.ee_fusion == 'concat'


def test_remap_by_rule(source, target):
    entries = _entries(source)
    entries['fnet.conv1.weight'] = entries.pop('feature_encoder.convnormrelu.0.weight')
    audit = remap_checkpoint(Checkpoint(entries), target)
    assert audit.loaded['feature_encoder.convnormrelu.0.weight'] == ('fnet.conv1.weight', 'rule')
    assert torch.equal(
        target.feature_encoder.convnormrelu[0].weight, source.feature_encoder.convnormrelu[0].weight
    )
    assert not audit.missing


def test_missing_parameter_keeps_initialization(source, target):
    before = target.state_dict()[HEAD_BIAS].clone()
    entries = _entries(source)
    del entries[HEAD_BIAS]
    audit = remap_checkpoint(Checkpoint(entries), target)
    assert audit.missing == [HEAD_BIAS]
    assert torch.equal(target.state_dict()[HEAD_BIAS], before)


def test_shape_mismatch_is_skipped(source, target):
    entries = _entries(source)
    entries[HEAD_BIAS] = np.zeros(3, dtype=np.float32)
    audit = remap_checkpoint(Checkpoint(entries), target)
    assert [name for name, _ in audit.skipped] == [HEAD_BIAS]
    assert audit.missing == [HEAD_BIAS]


def test_unique_shape_is_loaded(source, target):
    entries = _entries(source)
    entries['head_bias'] = entries.pop(HEAD_BIAS)
    audit = remap_checkpoint(Checkpoint(entries), target)
    assert audit.loaded[HEAD_BIAS] == ('head_bias', 'shape')
    assert torch.equal(target.state_dict()[HEAD_BIAS], source.state_dict()[HEAD_BIAS])


def test_shared_shape_is_ambiguous(source, target):
    entries = _entries(source)
    del entries[HEAD_BIAS]
    entries['extra_b'] = np.ones(2, dtype=np.float32)
    entries['extra_a'] = np.zeros(2, dtype=np.float32)
    audit = remap_checkpoint(Checkpoint(entries), target)
    assert audit.ambiguous == ['extra_a', 'extra_b']
    assert audit.missing == [HEAD_BIAS]


def test_torch_state_dict_with_prefix(tmp_path, source, target):
    filename = tmp_path / 'raft.pth'
    state = {f'module.{name}': tensor for name, tensor in source.state_dict().items()}
    torch.save({'state_dict': state}, filename)
    audit = remap_checkpoint(load_checkpoint(filename), target)
    assert audit.loaded_by('rule') == sorted(source.state_dict())
    assert not audit.missing
