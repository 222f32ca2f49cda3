"""Fine-tuning loop for the diffusion flow estimator."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from tqdm import tqdm

from . import defaults
from .checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from .diffusion import DiffusionSchedule, denormalize_flow, forward_noise, normalize_flow
from .estimator import estimate
from .exceptions import EmptyDataset, EmptyMask, NonFiniteLoss, ShapeMismatch
from .fields import FlowSample
from .flowio import DatasetManifest
from .metrics import MetricOptions, aee
from .parameters import ParametersBase

logger = logging.getLogger(__name__)

_ANNEAL_STRATEGIES = ('linear', 'cos')


@dataclass
class TrainConfig(ParametersBase):
    """Fine-tuning parameters."""

    total_steps: int = field(default=10000, metadata={'description': 'number of optimizer steps'})
    batch_size: int = field(default=4, metadata={'description': 'samples per step'})
    peak_lr: float = field(default=1.25e-4, metadata={'description': 'one-cycle peak learning rate'})
    warmup_fraction: float = field(
        default=0.05, metadata={'description': 'fraction of steps spent ramping up'}
    )
    anneal_strategy: str = field(
        default='linear', metadata={'description': 'one-cycle shape: linear or cos'}
    )
    div_factor: float = field(
        default=25.0, metadata={'description': 'initial learning rate is peak_lr / div_factor'}
    )
    final_div_factor: float = field(
        default=1e4, metadata={'description': 'final learning rate is peak_lr / final_div_factor'}
    )
    weight_decay: float = field(default=1e-5, metadata={'description': 'AdamW weight decay'})
    gradient_clip_norm: float = field(
        default=1.0, metadata={'description': 'gradient norm clip, 0 disables'}
    )
    crop_size: int = field(
        default=64, metadata={'description': 'square crop side in native pixels, 0 uses full images'}
    )
    augment_flip: bool = field(
        default=True, metadata={'description': 'random horizontal and vertical flips'}
    )
    seed: int = field(default=0, metadata={'description': 'seed of batches, time steps and noise'})
    eval_every: int = field(
        default=500, metadata={'description': 'steps between validation runs, 0 disables'}
    )
    val_samples: int = field(
        default=8, metadata={'description': 'maximum validation samples per run'}
    )
    checkpoint_every: int = field(
        default=1000, metadata={'description': 'steps between checkpoints, 0 keeps only the last'}
    )
    resume_from: str = field(
        default='', metadata={'description': 'checkpoint holding model and optimizer state to resume'}
    )
    prefetch: bool = field(
        default=True, metadata={'description': 'prepare the next batch in a background thread'}
    )
    device: str = field(default='cpu', metadata={'description': 'torch device'})

    def check_consistency(self) -> None:
        if self.total_steps < 1:
            raise ValueError('total_steps must be at least 1')
        if self.batch_size < 1:
            raise ValueError('batch_size must be at least 1')
        if self.peak_lr <= 0:
            raise ValueError('peak_lr must be positive')
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError('warmup_fraction must be in [0, 1)')
        if self.anneal_strategy not in _ANNEAL_STRATEGIES:
            raise ValueError(f'anneal_strategy={self.anneal_strategy} not available')
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ValueError('div factors must be positive')
        if self.weight_decay < 0 or self.gradient_clip_norm < 0:
            raise ValueError('weight_decay and gradient_clip_norm must be nonnegative')
        if self.crop_size < 0 or self.crop_size % 8 != 0:
            raise ValueError('crop_size must be a nonnegative multiple of 8')
        for name in ('eval_every', 'val_samples', 'checkpoint_every'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be nonnegative')


def one_cycle_lr(step: int, cfg: TrainConfig) -> float:
    """
    Learning rate of the one-cycle schedule.

    Parameters
    ----------
    step
        Step in [0, total_steps].
    cfg
        Training config.

    Returns
    -------
    float
        peak_lr / div_factor at step 0, peak_lr at the end of warmup,
        peak_lr / final_div_factor at total_steps.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f'step {step} outside [0, {cfg.total_steps}]')
    initial = cfg.peak_lr / cfg.div_factor
    final = cfg.peak_lr / cfg.final_div_factor
    warmup_end = cfg.warmup_fraction * cfg.total_steps

    if step < warmup_end:
        return _anneal(initial, cfg.peak_lr, step / warmup_end, cfg.anneal_strategy)
    if step == warmup_end or cfg.total_steps == warmup_end:
        return cfg.peak_lr
    fraction = (step - warmup_end) / (cfg.total_steps - warmup_end)
    return _anneal(cfg.peak_lr, final, fraction, cfg.anneal_strategy)


def _anneal(start: float, end: float, fraction: float, strategy: str) -> float:
    if fraction >= 1.0:
        return end
    if strategy == 'cos':
        return end + (start - end) / 2.0 * (math.cos(math.pi * fraction) + 1.0)
    return start + (end - start) * fraction


def l1_flow_loss(predicted: Tensor, gt: Tensor, valid_mask: Tensor = None) -> Tensor:
    """
    Mean absolute flow error over valid pixels and both components.

    Parameters
    ----------
    predicted, gt
        Flows of shape (N, 2, H, W).
    valid_mask, optional
        Boolean (N, H, W). Default all valid.

    Returns
    -------
    Tensor
        Scalar loss.
    """
    if predicted.shape != gt.shape:
        raise ShapeMismatch(f'prediction {tuple(predicted.shape)} != gt {tuple(gt.shape)}')
    error = (predicted - gt).abs()
    if valid_mask is None:
        return error.mean()
    mask = valid_mask.to(dtype=error.dtype).unsqueeze(1).expand_as(error)
    count = mask.sum()
    if count == 0:
        raise EmptyMask('no valid pixels in batch')
    return (error * mask).sum() / count


class Batch(NamedTuple):
    frame_a: Tensor
    frame_b: Tensor
    gt: Tensor
    valid: Tensor
    sample_ids: List[str]
    t: Tensor
    noise: Tensor


class TrainResult(NamedTuple):
    losses: List[float]
    log_path: Optional[Path]
    checkpoint_path: Optional[Path]
    final_val_aee: float


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Random generator owned by one training step."""
    return np.random.default_rng([seed, step])


def make_batch(
    samples: Sequence[FlowSample],
    step: int,
    cfg: TrainConfig,
    schedule: DiffusionSchedule,
    working_shape_factor: int = 1,
) -> Batch:
    """
    Deterministic batch for a training step.

    Sample choice, crops, flips, time steps and noise depend only on
    (cfg.seed, step).
    """
    rng = step_rng(cfg.seed, step)
    indices = rng.integers(0, len(samples), size=cfg.batch_size)

    frames_a, frames_b, flows, masks, ids = list(), list(), list(), list(), list()
    for index in indices:
        sample = samples[int(index)]
        frame_a = np.asarray(sample.pair.frame_a, dtype=np.float32)
        frame_b = np.asarray(sample.pair.frame_b, dtype=np.float32)
        flow = sample.gt.to_array().transpose(2, 0, 1).astype(np.float32)
        valid = sample.gt.valid_mask()

        if cfg.crop_size:
            height, width = frame_a.shape
            if cfg.crop_size > min(height, width):
                raise ValueError(f'crop_size {cfg.crop_size} larger than image {height}x{width}')
            y0 = int(rng.integers(0, height - cfg.crop_size + 1))
            x0 = int(rng.integers(0, width - cfg.crop_size + 1))
            window = np.s_[y0 : y0 + cfg.crop_size, x0 : x0 + cfg.crop_size]
            frame_a, frame_b, valid = frame_a[window], frame_b[window], valid[window]
            flow = flow[(slice(None),) + window]

        if cfg.augment_flip:
            flip_x, flip_y = rng.random(2) < 0.5
            if flip_x:
                frame_a, frame_b, valid = frame_a[:, ::-1], frame_b[:, ::-1], valid[:, ::-1]
                flow = flow[:, :, ::-1] * np.array([-1.0, 1.0], dtype=np.float32)[:, None, None]
            if flip_y:
                frame_a, frame_b, valid = frame_a[::-1], frame_b[::-1], valid[::-1]
                flow = flow[:, ::-1] * np.array([1.0, -1.0], dtype=np.float32)[:, None, None]

        flow = np.where(valid[None], flow, 0.0).astype(np.float32)
        frames_a.append(np.ascontiguousarray(frame_a))
        frames_b.append(np.ascontiguousarray(frame_b))
        flows.append(np.ascontiguousarray(flow))
        masks.append(np.ascontiguousarray(valid))
        ids.append(sample.sample_id)

    shapes = {frame.shape for frame in frames_a}
    if len(shapes) > 1:
        raise ShapeMismatch(f'batch mixes image shapes {sorted(shapes)}, set crop_size')
    height, width = frames_a[0].shape
    t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=cfg.batch_size))
    noise_shape = (cfg.batch_size, 2, height * working_shape_factor, width * working_shape_factor)
    noise = torch.from_numpy(rng.standard_normal(noise_shape).astype(np.float32))

    return Batch(
        frame_a=torch.from_numpy(np.stack(frames_a))[:, None],
        frame_b=torch.from_numpy(np.stack(frames_b))[:, None],
        gt=torch.from_numpy(np.stack(flows)),
        valid=torch.from_numpy(np.stack(masks)),
        sample_ids=ids,
        t=t,
        noise=noise,
    )


def training_loss(model, batch: Batch, schedule: DiffusionSchedule) -> Tensor:
    """
    L1 loss of one denoising step on a batch, in native pixels.

    Frames and gt are upsampled by the model's factor s (gt values
    multiplied by s), the normalized gt is noised to the batch time
    steps, and the prediction is brought back to native pixels before
    comparing.
    """
    factor = model.config.upsample_factor
    frame_a, frame_b, gt = batch.frame_a, batch.frame_b, batch.gt
    if factor != 1:
        frame_a, frame_b = (
            F.interpolate(frame, scale_factor=factor, mode='bilinear', align_corners=False)
            for frame in (frame_a, frame_b)
        )
        gt_working = F.interpolate(gt, scale_factor=factor, mode='bilinear', align_corners=False) * factor
    else:
        gt_working = gt

    conditions = model.encode(frame_a, frame_b)
    v0 = normalize_flow(gt_working, model.normalizer)
    v_t = forward_noise(v0, batch.t, batch.noise.to(v0.dtype), schedule)
    predicted = denormalize_flow(model.denoise_once(v_t, batch.t, conditions), model.normalizer)
    if factor != 1:
        predicted = F.interpolate(predicted, size=gt.shape[-2:], mode='bilinear', align_corners=False) / factor
    return l1_flow_loss(predicted, gt, batch.valid)


def validation_aee(
    model, samples: Sequence[FlowSample], schedule: DiffusionSchedule, seed: int = 0, device='cpu'
) -> float:
    """Mean AEE of estimate over samples with ground truth."""
    if not samples:
        return float('nan')
    was_training = model.training
    model.eval()
    errors = [
        aee(estimate(sample.pair, model, schedule, seed=seed, device=device), sample.gt, MetricOptions())
        for sample in samples
    ]
    model.train(was_training)
    return float(np.mean(errors))


def _load_samples(source: Union[DatasetManifest, Sequence[FlowSample]], split: str) -> List[FlowSample]:
    if isinstance(source, DatasetManifest):
        samples = [source.load_sample(entry) for entry in source.split(split)]
    else:
        samples = [sample for sample in source if sample.split == split]
    return [sample for sample in samples if sample.gt is not None]


def _write_dump(run_dir: Path, step: int, batch: Batch, lr: float) -> Path:
    path = run_dir / f'nonfinite_step{step}.txt'
    lines = [f'step\t{step}', f'lr\t{lr!r}'] + [f'sample\t{sample_id}' for sample_id in batch.sample_ids]
    path.write_text('\n'.join(lines) + '\n')
    return path


def _start_log(log_path: Path, start_step: int) -> None:
    header = 'step\tloss\tlr\tval_aee\n'
    if start_step == 0 or not log_path.exists():
        log_path.write_text(header)
        return
    # Rows past the resumed step are rewritten by this run
    kept = list()
    for line in log_path.read_text().splitlines(keepends=True)[1:]:
        step = line.split('\t', 1)[0]
        if step.isdigit() and int(step) <= start_step:
            kept.append(line)
    log_path.write_text(header + ''.join(kept))


def train(
    model,
    source: Union[DatasetManifest, Sequence[FlowSample]],
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    run_dir: Union[str, Path] = None,
    *,
    config_text: str = '',
    progress: bool = False,
) -> TrainResult:
    """
    Fine-tune every parameter of a model on the train split.

    Parameters
    ----------
    model
        A FlowDiffuser.
    source
        A DatasetManifest, or samples carrying their split.
    schedule
        The diffusion schedule; validation uses its sampler steps.
    cfg
        Training config.
    run_dir, optional
        Directory for the training log, checkpoints and dumps. Nothing
        is written when None.

    Optional Parameters
    -------------------
    config_text
        Resolved run config stored in checkpoints.
    progress
        Show a progress bar.

    Returns
    -------
    TrainResult
        Per-step losses from the first step run, the log path, the last
        checkpoint and the last validation AEE.
    """
    cfg.check_consistency()
    train_samples = _load_samples(source, 'train')
    if not train_samples:
        raise EmptyDataset('train split has no samples with ground truth')
    val_samples = _load_samples(source, 'val')[: cfg.val_samples]

    device = torch.device(cfg.device)
    model.to(device)
    model.train()
    for parameter in model.parameters():
        parameter.requires_grad_(True)
    optimizer = torch.optim.AdamW(model.parameters(), lr=one_cycle_lr(0, cfg), weight_decay=cfg.weight_decay)

    start_step = 0
    if cfg.resume_from:
        checkpoint = load_checkpoint(cfg.resume_from)
        state = {name: torch.from_numpy(array) for name, array in checkpoint.entries.items()}
        model.load_state_dict(state)
        restore_optimizer(model, optimizer, checkpoint)
        start_step = checkpoint.step
        logger.info('resuming from %s at step %d', cfg.resume_from, start_step)
        if start_step >= cfg.total_steps:
            raise ValueError(f'checkpoint step {start_step} already reaches total_steps')

    log_path = checkpoint_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)
        log_path = run_dir / defaults.TRAIN_LOG_FILENAME
        _start_log(log_path, start_step)

    factor = model.config.upsample_factor

    def prepare(step):
        return make_batch(train_samples, step, cfg, schedule, factor)

    executor = ThreadPoolExecutor(max_workers=1) if cfg.prefetch else None
    pending = executor.submit(prepare, start_step) if executor else None

    losses = list()
    val_aee = float('nan')
    steps = range(start_step, cfg.total_steps)
    try:
        for step in tqdm(steps, disable=not progress, desc='train'):
            batch = pending.result() if executor else prepare(step)
            if executor and step + 1 < cfg.total_steps:
                pending = executor.submit(prepare, step + 1)
            batch = batch._replace(
                frame_a=batch.frame_a.to(device),
                frame_b=batch.frame_b.to(device),
                gt=batch.gt.to(device),
                valid=batch.valid.to(device),
                noise=batch.noise.to(device),
            )

            lr = one_cycle_lr(step, cfg)
            for group in optimizer.param_groups:
                group['lr'] = lr

            loss = training_loss(model, batch, schedule)
            if not torch.isfinite(loss):
                dump = _write_dump(run_dir, step + 1, batch, lr) if run_dir is not None else None
                raise NonFiniteLoss(step + 1, batch.sample_ids, dump)

            optimizer.zero_grad()
            loss.backward()
            if cfg.gradient_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.gradient_clip_norm)
            optimizer.step()

            completed = step + 1
            losses.append(float(loss.item()))

            evaluate_now = cfg.eval_every and (completed % cfg.eval_every == 0 or completed == cfg.total_steps)
            val_text = ''
            if evaluate_now and val_samples:
                val_aee = validation_aee(model, val_samples, schedule, seed=cfg.seed, device=device)
                val_text = repr(val_aee)
                logger.info('step %d: val AEE %.4f', completed, val_aee)

            if log_path is not None:
                with open(log_path, 'a') as file_handle:
                    file_handle.write(f'{completed}\t{losses[-1]!r}\t{lr!r}\t{val_text}\n')

            save_now = completed == cfg.total_steps or (
                cfg.checkpoint_every and completed % cfg.checkpoint_every == 0
            )
            if run_dir is not None and save_now:
                checkpoint = Checkpoint.from_model(
                    model, optimizer=optimizer, step=completed, config_text=config_text
                )
                checkpoint_path = save_checkpoint(
                    checkpoint, run_dir / 'checkpoints' / f'step_{completed:06d}.h5'
                )
                if completed == cfg.total_steps:
                    checkpoint_path = save_checkpoint(checkpoint, run_dir / 'checkpoints' / 'final.h5')
    finally:
        if executor:
            executor.shutdown(wait=True, cancel_futures=True)

    logger.info('trained %d steps, last loss %.4f', len(losses), losses[-1] if losses else float('nan'))
    return TrainResult(
        losses=losses, log_path=log_path, checkpoint_path=checkpoint_path, final_val_aee=val_aee
    )

