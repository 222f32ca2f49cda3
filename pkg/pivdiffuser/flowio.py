"""Flow files, particle images and dataset manifests.

Flow files use the Middlebury .flo layout: a little-endian float32
magic number 202021.25, int32 width, int32 height, then row-major
interleaved (u, v) float32 values, all little-endian.
"""
from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy import ndarray
from PIL import Image

from . import defaults
from .constants import BIT_DEPTH_MAX, FLO_HEADER_BYTES, FLO_MAGIC, INVALID_FLOW_THRESHOLD, SPLITS
from .exceptions import (
    EmptyDataset,
    MagicMismatch,
    MultiChannelInput,
    OrphanFile,
    TruncatedFile,
    UnsupportedFormat,
)
from .fields import CaseLabel, FlowSample, ImagePair, VelocityField
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_IMAGE_FORMATS = ('PNG', 'TIFF')
_MODES_16_BIT = ('I;16', 'I;16B', 'I;16L', 'I;16N')
_MODES_MULTI_CHANNEL = ('RGB', 'RGBA', 'RGBX', 'LA', 'La', 'P', 'PA', 'CMYK', 'YCbCr', 'LAB', 'HSV')

# Quantiles separating the train, val and test splits
_SPLIT_THRESHOLDS = (0.8, 0.9)


def read_flo(path: Union[str, Path]) -> VelocityField:
    """
    Read a Middlebury flow file.

    Values that are non-finite or above 1e9 in magnitude are kept, and
    marked invalid in the field's valid mask.

    Parameters
    ----------
    path
        The .flo file.

    Returns
    -------
    VelocityField
        float32 field with coordinate_scale 1.0.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or np.frombuffer(data[:4], dtype='<f4')[0] != FLO_MAGIC:
        raise MagicMismatch(f'{path} is not a flow file')
    if len(data) < FLO_HEADER_BYTES:
        raise TruncatedFile(f'{path} has a truncated header')
    width, height = (int(n) for n in np.frombuffer(data[4:FLO_HEADER_BYTES], dtype='<i4'))
    if width <= 0 or height <= 0:
        raise TruncatedFile(f'{path} has invalid size {width}x{height}')
    payload = width * height * 2 * 4
    if len(data) - FLO_HEADER_BYTES < payload:
        raise TruncatedFile(
            f'{path} payload is {len(data) - FLO_HEADER_BYTES} bytes, expected {payload}'
        )
    if len(data) - FLO_HEADER_BYTES > payload:
        logger.warning('%s has %d trailing bytes', path, len(data) - FLO_HEADER_BYTES - payload)

    flow = np.frombuffer(data, dtype='<f4', count=width * height * 2, offset=FLO_HEADER_BYTES)
    flow = flow.astype(np.float32).reshape(height, width, 2)
    u, v = flow[..., 0], flow[..., 1]

    valid = np.isfinite(u) & np.isfinite(v)
    with np.errstate(invalid='ignore'):
        valid &= (np.abs(u) <= INVALID_FLOW_THRESHOLD) & (np.abs(v) <= INVALID_FLOW_THRESHOLD)
    if not valid.all():
        logger.warning('%s: %d pixels with unknown flow', path, int((~valid).sum()))
        return VelocityField(u=u, v=v, valid=valid)
    return VelocityField(u=u, v=v)


def write_flo(field: VelocityField, path: Union[str, Path]) -> None:
    """
    Write a Middlebury flow file.

    Parameters
    ----------
    field
        Field at native resolution (coordinate_scale 1.0).
    path
        The output file.
    """
    if field.coordinate_scale != 1.0:
        raise ValueError('only native-resolution fields (coordinate_scale=1.0) can be written')
    height, width = field.shape
    header = np.array([FLO_MAGIC], dtype='<f4').tobytes()
    header += np.array([width, height], dtype='<i4').tobytes()
    payload = np.stack([field.u, field.v], axis=-1).astype('<f4').tobytes()
    Path(path).write_bytes(header + payload)


def read_image(path: Union[str, Path]) -> ndarray:
    """
    Read a single-channel 8- or 16-bit PNG or TIFF image.

    Parameters
    ----------
    path
        The image file.

    Returns
    -------
    ndarray
        float64 intensities divided by the bit-depth maximum, in [0, 1].
    """
    try:
        image = Image.open(path)
    except Image.UnidentifiedImageError as err:
        raise UnsupportedFormat(f'{path} is not a readable image') from err
    with image:
        if image.format not in _IMAGE_FORMATS:
            raise UnsupportedFormat(f'{path}: format {image.format} not supported')
        mode = image.mode
        if mode in _MODES_MULTI_CHANNEL:
            raise MultiChannelInput(f'{path}: {mode} image, expected a single channel')
        array = np.asarray(image)

    if mode == 'L':
        maximum = BIT_DEPTH_MAX[8]
    elif mode in _MODES_16_BIT or mode == 'I':
        maximum = BIT_DEPTH_MAX[16]
        if array.min() < 0 or array.max() > maximum:
            raise UnsupportedFormat(f'{path}: values outside the 16-bit range')
    else:
        raise UnsupportedFormat(f'{path}: pixel mode {mode} not supported')
    if array.ndim != 2:
        raise MultiChannelInput(f'{path}: image has shape {array.shape}')

    return array.astype(np.float64) / maximum


def write_image(array: ndarray, path: Union[str, Path], bit_depth: int = 8) -> None:
    """
    Write intensities in [0, 1] as a grayscale image.

    Parameters
    ----------
    array
        2D intensity array, clipped to [0, 1] before quantization.
    path
        Output file; the container follows the extension.
    bit_depth
        8 or 16.
    """
    if bit_depth not in BIT_DEPTH_MAX:
        raise ValueError(f'bit_depth={bit_depth} not available')
    maximum = BIT_DEPTH_MAX[bit_depth]
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    quantized = np.round(np.clip(array, 0.0, 1.0) * maximum).astype(dtype)
    Image.fromarray(quantized).save(path)


def sample_paths(directory: Union[str, Path], name: str, extension: str = '.png') -> Tuple[Path, Path, Path]:
    """Paths of the first image, second image and flow file of a sample."""
    directory = Path(directory)
    return (
        directory / f'{name}{defaults.IMAGE1_SUFFIX}{extension}',
        directory / f'{name}{defaults.IMAGE2_SUFFIX}{extension}',
        directory / f'{name}{defaults.FLOW_SUFFIX}.flo',
    )


@dataclass
class DataConfig(ParametersBase):
    """Dataset location and file naming parameters."""

    root: str = field(default='', metadata={'description': 'dataset root directory'})
    manifest: str = field(
        default='', metadata={'description': 'manifest file; empty to index the root directory'}
    )
    split_seed: int = field(default=0, metadata={'description': 'seed of the hash-based split'})
    image1_suffix: str = field(
        default=defaults.IMAGE1_SUFFIX, metadata={'description': 'file name suffix of first frames'}
    )
    image2_suffix: str = field(
        default=defaults.IMAGE2_SUFFIX, metadata={'description': 'file name suffix of second frames'}
    )
    flow_suffix: str = field(
        default=defaults.FLOW_SUFFIX, metadata={'description': 'file name suffix of flow files'}
    )
    image_extensions: Tuple[str, ...] = field(
        default=defaults.IMAGE_EXTENSIONS, metadata={'description': 'accepted image extensions'}
    )
    bit_depth: int = field(
        default=8, metadata={'description': 'bit depth of generated images (8 or 16)'}
    )

    def check_consistency(self) -> None:
        if self.bit_depth not in BIT_DEPTH_MAX:
            raise ValueError('bit_depth must be 8 or 16')
        if len({self.image1_suffix, self.image2_suffix, self.flow_suffix}) != 3:
            raise ValueError('file name suffixes must differ')


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset sample.

    Paths are relative to the manifest root, with '/' separators. The
    sample id is '<case directory>/<name>'.
    """

    sample_id: str
    image1: str
    image2: str
    flow: Optional[str]
    case_label: CaseLabel
    split: str

    def to_line(self) -> str:
        """Tab-separated manifest line."""
        return '\t'.join(
            [
                self.sample_id,
                self.image1,
                self.image2,
                self.flow or '-',
                str(self.case_label),
                self.split,
            ]
        )

    @classmethod
    def from_line(cls, line: str) -> ManifestEntry:
        """Parse a tab-separated manifest line."""
        parts = line.rstrip('\n').split('\t')
        if len(parts) != 6:
            raise ValueError(f'malformed manifest line: {line!r}')
        sample_id, image1, image2, flow, case_label, split = parts
        if split not in SPLITS:
            raise ValueError(f'malformed manifest line, split={split}')
        try:
            case_label = CaseLabel(case_label)
        except ValueError as err:
            raise ValueError(f'malformed manifest line, case={case_label}') from err
        return cls(sample_id, image1, image2, None if flow == '-' else flow, case_label, split)


@dataclass
class DatasetManifest:
    """Index of a dataset directory.

    Parameters
    ----------
    root_path
        The dataset root.
    entries
        The samples, sorted by case directory then name.
    """

    root_path: Path
    entries: List[ManifestEntry]

    def __len__(self):
        """Number of entries."""
        return len(self.entries)

    @property
    def split_assignment(self) -> Dict[str, str]:
        """Map of sample id to split."""
        return {entry.sample_id: entry.split for entry in self.entries}

    def split(self, name: str) -> List[ManifestEntry]:
        """Entries of a split, or all entries for 'all'."""
        if name == 'all':
            return list(self.entries)
        if name not in SPLITS:
            raise ValueError(f'split={name} not available')
        return [entry for entry in self.entries if entry.split == name]

    def path(self, relative: str) -> Path:
        """Absolute path of a manifest-relative path."""
        return self.root_path / relative

    def load_sample(self, entry: ManifestEntry) -> FlowSample:
        """Read the images and flow of an entry."""
        pair = ImagePair(
            frame_a=read_image(self.path(entry.image1)),
            frame_b=read_image(self.path(entry.image2)),
            source_id=entry.sample_id,
        )
        gt = read_flo(self.path(entry.flow)) if entry.flow is not None else None
        return FlowSample(pair=pair, gt=gt, case_label=entry.case_label, split=entry.split)

    def write(self, filename: Union[str, Path] = None) -> Path:
        """Write the line-oriented index, by default to <root>/manifest.txt."""
        if filename is None:
            filename = self.root_path / defaults.MANIFEST_FILENAME
        lines = [entry.to_line() + '\n' for entry in self.entries]
        Path(filename).write_text(''.join(lines))
        return Path(filename)

    @classmethod
    def read(cls, filename: Union[str, Path]) -> DatasetManifest:
        """Read a manifest; paths are relative to the file's directory."""
        filename = Path(filename)
        if not filename.is_file():
            raise ValueError(f'manifest {filename} does not exist')
        entries = [
            ManifestEntry.from_line(line)
            for line in filename.read_text().splitlines()
            if line.strip()
        ]
        manifest = cls(root_path=filename.parent, entries=entries)
        for entry in entries:
            for relative in (entry.image1, entry.image2, entry.flow):
                if relative is not None and not manifest.path(relative).is_file():
                    raise ValueError(f'manifest lists missing file {manifest.path(relative)}')
        if not entries:
            raise EmptyDataset(f'manifest {filename} has no entries')
        return manifest


def case_label_for_directory(name: str) -> CaseLabel:
    """Case label of a case directory name; unknown names map to Other."""
    return defaults.CASE_DIRECTORIES.get(name.lower(), CaseLabel.OTHER)


def split_rank(name: str, split_seed: int) -> int:
    """Deterministic hash of a sample name used to order the split."""
    digest = hashlib.blake2b(f'{split_seed}:{name}'.encode(), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def assign_splits(names: List[str], split_seed: int) -> Dict[str, str]:
    """Assign names to train/val/test in 8:1:1 proportion.

    Names are ordered by their seeded hash; the name at rank i of n
    goes to train if i/n < 0.8, to val if i/n < 0.9, else to test.
    """
    ordered = sorted(names, key=lambda name: (split_rank(name, split_seed), name))
    number = len(ordered)
    splits = dict()
    for rank, name in enumerate(ordered):
        quantile = rank / number
        if quantile < _SPLIT_THRESHOLDS[0]:
            splits[name] = 'train'
        elif quantile < _SPLIT_THRESHOLDS[1]:
            splits[name] = 'val'
        else:
            splits[name] = 'test'
    return splits


def build_manifest(
    root_path: Union[str, Path], split_seed: int = 0, pattern: DataConfig = None
) -> DatasetManifest:
    """
    Index a dataset directory.

    The layout is <case>/<name>_img1.ext, <case>/<name>_img2.ext and
    optionally <case>/<name>_flow.flo, with the suffixes configurable.
    Files directly under the root are ignored.

    Parameters
    ----------
    root_path
        The dataset root.
    split_seed
        Seed of the split hash.
    pattern, optional
        File naming; default DataConfig().

    Returns
    -------
    DatasetManifest
        Entries sorted by case directory then name. Within each case,
        entries with ground truth are split 8:1:1; entries without it
        go to the test split.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ValueError(f'dataset root {root} is not a directory')
    if pattern is None:
        pattern = DataConfig()
    extensions = tuple(ext.lower() for ext in pattern.image_extensions)

    entries = list()
    for case_dir in sorted(path for path in root.iterdir() if path.is_dir()):
        files: Dict[str, Dict[str, Path]] = defaultdict(dict)
        for path in sorted(case_dir.iterdir()):
            if not path.is_file():
                continue
            kind, name = _classify(path, pattern, extensions)
            if kind is None:
                logger.debug('ignoring %s', path)
                continue
            if kind in files[name]:
                raise ValueError(f'duplicate {kind} files for {case_dir.name}/{name}')
            files[name][kind] = path

        case_label = case_label_for_directory(case_dir.name)
        labeled = [name for name, found in files.items() if 'flow' in found]
        splits = assign_splits(labeled, split_seed) if labeled else {}
        for name in sorted(files):
            found = files[name]
            for kind, partner in (('image1', 'image2'), ('image2', 'image1'), ('flow', 'image1')):
                if kind in found and partner not in found:
                    raise OrphanFile(f'{found[kind]} has no {partner} partner')
            entries.append(
                ManifestEntry(
                    sample_id=f'{case_dir.name}/{name}',
                    image1=found['image1'].relative_to(root).as_posix(),
                    image2=found['image2'].relative_to(root).as_posix(),
                    flow=found['flow'].relative_to(root).as_posix() if 'flow' in found else None,
                    case_label=case_label,
                    split=splits.get(name, 'test'),
                )
            )

    if not entries:
        raise EmptyDataset(f'no samples found under {root}')
    logger.info('indexed %d samples under %s', len(entries), root)
    return DatasetManifest(root_path=root, entries=entries)


def _classify(path: Path, pattern: DataConfig, extensions: Tuple[str, ...]):
    suffix = path.suffix.lower()
    stem = path.name[: -len(path.suffix)] if path.suffix else path.name
    if suffix == '.flo':
        if stem.endswith(pattern.flow_suffix):
            return 'flow', stem[: -len(pattern.flow_suffix)]
        return None, None
    if suffix in extensions:
        if stem.endswith(pattern.image1_suffix):
            return 'image1', stem[: -len(pattern.image1_suffix)]
        if stem.endswith(pattern.image2_suffix):
            return 'image2', stem[: -len(pattern.image2_suffix)]
    return None, None
