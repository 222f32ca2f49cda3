"""Error types.

Each error subclasses the builtin exception it refines, so callers can
catch either the specific type or the plain ValueError.
"""

from typing import Iterable, Sequence


class MagicMismatch(ValueError):
    """File does not start with the flow-file magic number."""


class TruncatedFile(ValueError):
    """File payload is shorter than its header promises."""


class UnsupportedFormat(ValueError):
    """Image container or pixel format is not supported."""


class MultiChannelInput(ValueError):
    """Image has more than one channel."""


class OrphanFile(ValueError):
    """A dataset file is missing its partner."""


class EmptyDataset(ValueError):
    """No samples found."""


class DensityOverflow(ValueError):
    """Particle density gives too few particles to render."""


class ImageTooSmall(ValueError):
    """Image is smaller than the largest interrogation window."""


class ShapeMismatch(ValueError):
    """Array shapes that must agree do not."""


class ScheduleIndexError(IndexError):
    """Diffusion time step outside the schedule."""


class DimensionNotDivisible(ValueError):
    """Spatial dimension not divisible by the encoder stride."""


class EmptyMask(ValueError):
    """Loss mask selects no pixels."""


class EmptyValidSet(ValueError):
    """No valid pixels left to evaluate a metric on."""


class CaseMismatch(ValueError):
    """Two result sets cover different samples."""

    def __init__(self, missing: Iterable[str], message: str = None):
        self.missing = sorted(missing)
        if message is None:
            message = 'missing samples: ' + ', '.join(self.missing)
        super().__init__(message)


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN or infinite."""

    def __init__(self, step: int, batch_ids: Sequence[str], dump_path: str = None):
        self.step = step
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path
        super().__init__(f'non-finite loss at step {step}')
