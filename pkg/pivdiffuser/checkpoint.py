"""Named-parameter checkpoint archives and name remapping.

Native archives are HDF5 files:

    /parameters/<name>            one dataset per state_dict entry
    /optimizer/<name>/<key>       optimizer state per parameter
    attrs: format_version, source, step, config

Plain torch state_dict files (.pth, .pt) are read too, so pretrained
optical-flow weights with a different naming scheme can be remapped onto
a FlowDiffuser.
"""
from __future__ import annotations

import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import h5py
import numpy as np
import torch
from numpy import ndarray

from .exceptions import ShapeMismatch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SOURCE_TAG = 'pivdiffuser'

_HDF5_SUFFIXES = ('.h5', '.hdf5')
_TORCH_SUFFIXES = ('.pth', '.pt')

# Applied in order to every checkpoint name that has no exact match.
# Maps the reference optical-flow naming onto this package's modules.
RENAME_RULES: Tuple[Tuple[str, str], ...] = (
    (r'^module\.', ''),
    (r'^fnet\.', 'feature_encoder.'),
    (r'^cnet\.', 'context_encoder.'),
    (r'^update_block\.encoder\.', 'update_block.embedding.motion_encoder.'),
    (r'^update_block\.gru\.', 'update_block.recurrent_block.'),
    (r'^update_block\.mask\.', 'mask_predictor.'),
    (r'^mask_predictor\.0\.(weight|bias)$', r'mask_predictor.convrelu.0.\1'),
    (r'^mask_predictor\.2\.(weight|bias)$', r'mask_predictor.conv.\1'),
    (r'_encoder\.conv1\.(weight|bias)$', r'_encoder.convnormrelu.0.\1'),
    (r'_encoder\.conv2\.(weight|bias)$', r'_encoder.conv.\1'),
    (r'\.(layer\d\.\d)\.conv(\d)\.(weight|bias)$', r'.\1.convnormrelu\2.0.\3'),
    (r'motion_encoder\.convc(\d)\.(weight|bias)$', r'motion_encoder.convcorr\1.0.\2'),
    (r'motion_encoder\.convf(\d)\.(weight|bias)$', r'motion_encoder.convflow\1.0.\2'),
    (r'motion_encoder\.conv\.(weight|bias)$', r'motion_encoder.conv.0.\1'),
    (r'recurrent_block\.conv([zrq])1\.', r'recurrent_block.convgru1.conv\1.'),
    (r'recurrent_block\.conv([zrq])2\.', r'recurrent_block.convgru2.conv\1.'),
)

_FUSION_MARKERS = {
    'update_block.embedding.fuse.': 'concat',
    'update_block.embedding.proj_flow.': 'add',
}


@dataclass
class Checkpoint:
    """
    Named parameter arrays plus metadata.

    Parameters
    ----------
    entries
        Parameter name to array.
    metadata
        Free-form attributes: source, format_version, step, config.
    optimizer_state
        Parameter name to optimizer state arrays, when saved from a
        training run.
    """

    entries: Dict[str, ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    optimizer_state: Dict[str, Dict[str, ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        for name, array in self.entries.items():
            if np.issubdtype(array.dtype, np.floating) and not np.all(np.isfinite(array)):
                raise ValueError(f'non-finite values in checkpoint entry \'{name}\'')

    @property
    def step(self) -> int:
        return int(self.metadata.get('step', 0))

    @classmethod
    def from_model(
        cls,
        model: torch.nn.Module,
        *,
        optimizer: torch.optim.Optimizer = None,
        step: int = 0,
        config_text: str = '',
    ) -> Checkpoint:
        """Snapshot a model, and optionally its optimizer state."""
        entries = {
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in model.state_dict().items()
        }
        metadata = {
            'format_version': FORMAT_VERSION,
            'source': SOURCE_TAG,
            'step': int(step),
            'config': config_text,
        }
        optimizer_state = dict()
        if optimizer is not None:
            optimizer_state = optimizer_state_by_name(model, optimizer)
        return cls(entries=entries, metadata=metadata, optimizer_state=optimizer_state)


def optimizer_state_by_name(
    model: torch.nn.Module, optimizer: torch.optim.Optimizer
) -> Dict[str, Dict[str, ndarray]]:
    """Optimizer state keyed by parameter name instead of by index."""
    names = {id(parameter): name for name, parameter in model.named_parameters()}
    state = dict()
    for parameter, values in optimizer.state.items():
        name = names.get(id(parameter))
        if name is None:
            continue
        state[name] = {
            key: torch.as_tensor(value).detach().cpu().numpy().copy()
            for key, value in values.items()
        }
    return state


def restore_optimizer(
    model: torch.nn.Module, optimizer: torch.optim.Optimizer, checkpoint: Checkpoint
) -> None:
    """Load optimizer state saved by Checkpoint.from_model.

    The optimizer must hold the model's parameters in a single group, in
    named_parameters order.
    """
    index_by_name = {name: index for index, (name, _) in enumerate(model.named_parameters())}
    state_dict = optimizer.state_dict()
    state = dict()
    for name, values in checkpoint.optimizer_state.items():
        if name not in index_by_name:
            raise ValueError(f'optimizer state for unknown parameter \'{name}\'')
        state[index_by_name[name]] = {key: torch.from_numpy(np.array(value)) for key, value in values.items()}
    state_dict['state'] = state
    optimizer.load_state_dict(state_dict)


def save_checkpoint(checkpoint: Checkpoint, filename: Union[str, Path]) -> Path:
    """
    Write a checkpoint atomically to an HDF5 file.

    The archive is written to a temporary file in the same directory
    and then renamed over the target.

    Parameters
    ----------
    checkpoint
        The checkpoint.
    filename
        Destination, normally with suffix '.h5'.

    Returns
    -------
    Path
        The written file.
    """
    filename = Path(filename)
    filename.parent.mkdir(parents=True, exist_ok=True)
    temporary = filename.with_name(filename.name + '.tmp')

    with h5py.File(temporary, 'w') as file_handle:
        file_handle.attrs['format_version'] = FORMAT_VERSION
        for key, value in checkpoint.metadata.items():
            if key != 'format_version':
                file_handle.attrs[key] = value
        group = file_handle.create_group('parameters')
        for name, array in checkpoint.entries.items():
            group.create_dataset(name, data=array)
        group = file_handle.create_group('optimizer')
        for name, values in checkpoint.optimizer_state.items():
            subgroup = group.create_group(name)
            for key, array in values.items():
                subgroup.create_dataset(key, data=array)

    os.replace(temporary, filename)
    logger.info('wrote checkpoint %s', filename)
    return filename


def load_checkpoint(filename: Union[str, Path]) -> Checkpoint:
    """
    Read a native HDF5 archive or a torch state_dict file.

    Raises
    ------
    ValueError
        If the file is missing or the suffix is not recognized.
    """
    filename = Path(filename)
    if not filename.exists():
        raise ValueError(f'cannot find checkpoint {filename}')
    suffix = filename.suffix.lower()
    if suffix in _HDF5_SUFFIXES:
        return _load_hdf5(filename)
    if suffix in _TORCH_SUFFIXES:
        return _load_torch(filename)
    raise ValueError(f'unknown checkpoint suffix \'{filename.suffix}\'')


def _load_hdf5(filename: Path) -> Checkpoint:
    with h5py.File(filename, 'r') as file_handle:
        metadata = {key: _attr_value(value) for key, value in file_handle.attrs.items()}
        version = int(metadata.get('format_version', -1))
        if version != FORMAT_VERSION:
            raise ValueError(f'checkpoint format version {version} not supported')
        entries = {name: np.array(dataset[()]) for name, dataset in file_handle['parameters'].items()}
        optimizer_state = dict()
        if 'optimizer' in file_handle:
            for name, group in file_handle['optimizer'].items():
                optimizer_state[name] = {key: np.array(dataset[()]) for key, dataset in group.items()}
    return Checkpoint(entries=entries, metadata=metadata, optimizer_state=optimizer_state)


def _load_torch(filename: Path) -> Checkpoint:
    state = torch.load(filename, map_location='cpu')
    for key in ('state_dict', 'model'):
        if isinstance(state, dict) and isinstance(state.get(key), dict):
            state = state[key]
    if not isinstance(state, dict):
        raise ValueError(f'{filename} does not hold a state_dict')
    entries = {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in state.items()
        if isinstance(tensor, torch.Tensor)
    }
    metadata = {'format_version': FORMAT_VERSION, 'source': str(filename.name), 'step': 0}
    return Checkpoint(entries=entries, metadata=metadata)


def _attr_value(value):
    if isinstance(value, bytes):
        return value.decode()
    if isinstance(value, np.generic):
        return value.item()
    return value


def rename(name: str, rules: Tuple[Tuple[str, str], ...] = RENAME_RULES) -> str:
    """Apply every rename rule in turn."""
    for pattern, replacement in rules:
        name = re.sub(pattern, replacement, name)
    return name


@dataclass
class RemapAudit:
    """
    What remap_checkpoint did.

    Parameters
    ----------
    loaded
        Model parameter name to (checkpoint name, method), where method
        is 'exact', 'rule' or 'shape'.
    skipped
        Checkpoint entries not loaded, as (name, reason).
    missing
        Model parameters left at their fresh initialization.
    ambiguous
        Checkpoint entries sharing a shape with several candidates.
    ee_fusion
        'add' or 'concat' when the checkpoint holds an embedding
        enhancement block, otherwise None.
    """

    loaded: Dict[str, Tuple[str, str]] = field(default_factory=dict)
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    ambiguous: List[str] = field(default_factory=list)
    ee_fusion: str = None

    @property
    def loaded_count(self) -> int:
        return len(self.loaded)

    def loaded_by(self, method: str) -> List[str]:
        """Model names loaded with a given method."""
        return sorted(name for name, (_, how) in self.loaded.items() if how == method)

    def summary(self) -> str:
        text = (
            f'loaded {self.loaded_count} (exact {len(self.loaded_by("exact"))}, '
            f'rule {len(self.loaded_by("rule"))}, shape {len(self.loaded_by("shape"))}), '
            f'skipped {len(self.skipped)}, missing {len(self.missing)}, '
            f'ambiguous {len(self.ambiguous)}'
        )
        if self.ee_fusion is not None:
            text += f', ee_fusion {self.ee_fusion}'
        return text


def remap_checkpoint(checkpoint: Checkpoint, model: torch.nn.Module) -> RemapAudit:
    """
    Load checkpoint entries into a model, matching names leniently.

    Entries are matched by exact name first, then by RENAME_RULES, then
    by unique shape among whatever is left on both sides. An entry whose
    name matches but whose shape differs is skipped. Arrays are never
    reshaped. Unmatched model parameters keep their current values.

    Parameters
    ----------
    checkpoint
        The checkpoint.
    model
        The model to load into.

    Returns
    -------
    RemapAudit
    """
    targets = model.state_dict()
    audit = RemapAudit()
    assignments: Dict[str, ndarray] = dict()
    remaining = dict(checkpoint.entries)

    for name in list(remaining):
        if name in targets:
            array = remaining.pop(name)
            if tuple(array.shape) == tuple(targets[name].shape):
                assignments[name] = array
                audit.loaded[name] = (name, 'exact')
            else:
                audit.skipped.append((name, f'shape {array.shape} != {tuple(targets[name].shape)}'))

    renamed_names = dict()
    for name in list(remaining):
        candidate = rename(name)
        renamed_names[name] = candidate
        if candidate == name or candidate not in targets:
            continue
        if candidate in assignments:
            audit.skipped.append((name, f'duplicate of {candidate}'))
            remaining.pop(name)
            continue
        array = remaining.pop(name)
        if tuple(array.shape) == tuple(targets[candidate].shape):
            assignments[candidate] = array
            audit.loaded[candidate] = (name, 'rule')
        else:
            audit.skipped.append((name, f'shape {array.shape} != {tuple(targets[candidate].shape)}'))

    open_targets = [name for name in targets if name not in assignments]
    targets_by_shape = defaultdict(list)
    for name in open_targets:
        targets_by_shape[tuple(targets[name].shape)].append(name)
    entries_by_shape = defaultdict(list)
    for name, array in remaining.items():
        entries_by_shape[tuple(array.shape)].append(name)

    for shape, names in entries_by_shape.items():
        candidates = targets_by_shape.get(shape, [])
        if not candidates:
            audit.skipped.extend((name, 'no match') for name in names)
        elif len(names) == 1 and len(candidates) == 1:
            assignments[candidates[0]] = remaining[names[0]]
            audit.loaded[candidates[0]] = (names[0], 'shape')
        else:
            audit.ambiguous.extend(names)

    audit.missing = [name for name in targets if name not in assignments]
    audit.ambiguous.sort()
    audit.ee_fusion = _detect_fusion(renamed_names.get(name, name) for name in checkpoint.entries)

    with torch.no_grad():
        for name, array in assignments.items():
            target = targets[name]
            if tuple(array.shape) != tuple(target.shape):
                raise ShapeMismatch(f'{name}: {array.shape} != {tuple(target.shape)}')
            target.copy_(torch.from_numpy(np.array(array)).to(dtype=target.dtype))

    for name, reason in audit.skipped:
        logger.warning('skipped checkpoint entry %s: %s', name, reason)
    if audit.ambiguous:
        logger.warning('ambiguous shape matches: %s', ', '.join(audit.ambiguous))
    logger.info(audit.summary())
    return audit


def _detect_fusion(names) -> str:
    for name in names:
        for prefix, fusion in _FUSION_MARKERS.items():
            if name.startswith(prefix):
                return fusion
    return None
