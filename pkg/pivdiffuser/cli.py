"""Command-line interface.

Subcommands::

    pivdiffuser gen       render a synthetic dataset with a manifest
    pivdiffuser train     fine-tune the diffusion estimator
    pivdiffuser infer     predict flows with a checkpoint
    pivdiffuser baseline  predict flows with window deformation correlation
    pivdiffuser eval      compare predictions with ground truth
    pivdiffuser report    merge reports of several runs
    pivdiffuser plot      draw field and residual figures

Exit codes: 0 success, 2 usage or input error, 3 training failure,
4 evaluation sample mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from . import __version__, defaults, flowio
from .checkpoint import load_checkpoint, remap_checkpoint
from .config import RunConfig
from .estimator import estimate
from .exceptions import CaseMismatch, NonFiniteLoss
from .fields import CaseLabel, FlowSample, ImagePair, VelocityField
from .flowio import DatasetManifest, build_manifest
from .metrics import residual_map
from .network import FlowDiffuser
from .plotting import plot_comparison, plot_components, plot_residual
from .report import (
    build_report,
    format_report,
    read_report,
    read_timing,
    write_report,
    write_timing,
)
from .synthetic import make_dataset, write_dataset
from .training import train
from .widim import widim_estimate

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_MISMATCH = 4


def _progress() -> bool:
    return sys.stderr.isatty()


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f'train.seed={args.seed}', f'generator.rng_seed={args.seed}']
    return RunConfig.load(args.config, overrides)


def _output_dir(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _manifest(args, config: RunConfig) -> DatasetManifest:
    path = getattr(args, 'manifest', None) or config.data.manifest
    if path:
        return DatasetManifest.read(path)
    if config.data.root:
        return build_manifest(config.data.root, config.data.split_seed, pattern=config.data)
    raise ValueError('no dataset: pass --manifest or set data.manifest or data.root')


def _input_samples(args, config: RunConfig) -> List[FlowSample]:
    """Samples from --pair arguments, or from a manifest split."""
    if getattr(args, 'pair', None):
        samples = list()
        for image1, image2 in args.pair:
            name = Path(image1).stem
            if name.endswith(config.data.image1_suffix):
                name = name[: -len(config.data.image1_suffix)]
            pair = ImagePair(
                frame_a=flowio.read_image(image1),
                frame_b=flowio.read_image(image2),
                source_id=name,
            )
            samples.append(FlowSample(pair=pair, split='test'))
        return samples
    manifest = _manifest(args, config)
    return [manifest.load_sample(entry) for entry in manifest.split(args.split)]


def _flow_path(directory: Path, sample_id: str) -> Path:
    return directory / f'{sample_id}{defaults.FLOW_SUFFIX}.flo'


def _write_predictions(
    out: Path, predictions: Dict[str, VelocityField], timing: Dict[str, float], config: RunConfig
) -> None:
    for sample_id, flow in predictions.items():
        path = _flow_path(out, sample_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        flowio.write_flo(flow, path)
    write_timing(timing, out / defaults.TIMING_FILENAME)
    config.write(out / defaults.CONFIG_FILENAME)


def cmd_gen(args) -> int:
    """Render analytic-flow samples and index them."""
    config = _load_config(args)
    out = _output_dir(args, 'dataset')
    kinds = [kind.strip() for kind in args.flows.split(',') if kind.strip()]
    flows = config.analytic_flows(kinds)

    samples = make_dataset(flows, args.per_flow, config.generator)
    case_label = CaseLabel(args.case)
    samples = [dataclasses.replace(sample, case_label=case_label) for sample in samples]

    out.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out, bit_depth=config.data.bit_depth, extension=args.extension)
    manifest = build_manifest(out, split_seed=config.data.split_seed)
    manifest.write()
    config.write(out / defaults.CONFIG_FILENAME)

    counts = {split: len(manifest.split(split)) for split in ('train', 'val', 'test')}
    print(
        f'generated {len(samples)} samples in {out} '
        f'(train {counts["train"]}, val {counts["val"]}, test {counts["test"]})'
    )
    return 0


def _build_model(config: RunConfig, upsample_factor: int = None) -> FlowDiffuser:
    model_config = config.model
    if upsample_factor is not None:
        model_config = dataclasses.replace(model_config, upsample_factor=upsample_factor)
    return FlowDiffuser(model_config, config.diffusion.make_normalizer())


def cmd_train(args) -> int:
    """Fine-tune, optionally starting from a remapped checkpoint."""
    config = _load_config(args)
    torch.manual_seed(config.train.seed)
    manifest = _manifest(args, config)
    model = _build_model(config)

    if args.init_from:
        audit = remap_checkpoint(load_checkpoint(args.init_from), model)
        print(
            f'init from {args.init_from}: loaded {audit.loaded_count}, '
            f'skipped {len(audit.skipped)}, missing {len(audit.missing)}, '
            f'ambiguous {len(audit.ambiguous)}'
        )
        if audit.ee_fusion is not None and audit.ee_fusion != config.model.ee_fusion:
            logger.warning(
                'checkpoint uses %s fusion but model.ee_fusion is %s', audit.ee_fusion, config.model.ee_fusion
            )

    run_name = args.run_name or datetime.datetime.now().strftime('%Y%m%d-%H%M%S')
    run_dir = _output_dir(args, 'runs') / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    config.write(run_dir / defaults.CONFIG_FILENAME)

    result = train(
        model,
        manifest,
        config.diffusion.make_schedule(),
        config.train,
        run_dir,
        config_text=config.dumps(),
        progress=_progress(),
    )
    print(f'trained {len(result.losses)} steps; final checkpoint {result.checkpoint_path}')
    return 0


def cmd_infer(args) -> int:
    """Predict flows with the diffusion estimator."""
    if args.steps is not None:
        args.set = list(args.set or []) + [f'diffusion.inference_steps={args.steps}']
    config = _load_config(args)
    out = _output_dir(args, 'predictions')
    model = _build_model(config, args.upsample_factor)
    audit = remap_checkpoint(load_checkpoint(args.checkpoint), model)
    if audit.missing or audit.skipped or audit.ambiguous:
        print(f'checkpoint {args.checkpoint}: {audit.summary()}')
    model.eval()
    schedule = config.diffusion.make_schedule()
    samples = _input_samples(args, config)

    predictions, timing = dict(), dict()
    for sample in tqdm(samples, disable=not _progress(), desc='infer'):
        start = time.perf_counter()
        predictions[sample.sample_id] = estimate(
            sample.pair, model, schedule, seed=config.train.seed, device=config.train.device
        )
        timing[sample.sample_id] = time.perf_counter() - start

    _write_predictions(out, predictions, timing, config)
    print(f'wrote {len(predictions)} flows to {out}')
    return 0


def cmd_baseline(args) -> int:
    """Predict flows with window deformation cross-correlation."""
    config = _load_config(args)
    out = _output_dir(args, 'baseline')
    samples = _input_samples(args, config)

    def run(sample: FlowSample) -> Tuple[str, VelocityField, float]:
        start = time.perf_counter()
        flow = widim_estimate(sample.pair, config.widim)
        return sample.sample_id, flow, time.perf_counter() - start

    predictions, timing = dict(), dict()
    with ThreadPoolExecutor(max_workers=args.threads or 1) as executor:
        results = executor.map(run, samples)
        for sample_id, flow, seconds in tqdm(results, total=len(samples), disable=not _progress(), desc='baseline'):
            predictions[sample_id] = flow
            timing[sample_id] = seconds

    _write_predictions(out, predictions, timing, config)
    mean_u = sum(float(flow.u.mean()) for flow in predictions.values()) / max(len(predictions), 1)
    print(f'wrote {len(predictions)} flows to {out} (mean u {mean_u:.3f} px)')
    return 0


def _load_predictions(directory: Path, samples: Sequence[FlowSample]) -> List[Tuple[FlowSample, VelocityField]]:
    missing = [sample.sample_id for sample in samples if not _flow_path(directory, sample.sample_id).is_file()]
    if missing:
        raise CaseMismatch(missing, f'{directory} lacks predictions for: ' + ', '.join(sorted(missing)))
    return [(sample, flowio.read_flo(_flow_path(directory, sample.sample_id))) for sample in samples]


def _labeled_samples(args, config: RunConfig) -> Tuple[DatasetManifest, List[FlowSample]]:
    manifest = _manifest(args, config)
    samples = [manifest.load_sample(entry) for entry in manifest.split(args.split) if entry.flow is not None]
    if not samples:
        raise ValueError(f'split {args.split} has no samples with ground truth')
    return manifest, samples


def cmd_eval(args) -> int:
    """Report metrics of a prediction directory, optionally against a baseline."""
    config = _load_config(args)
    out = _output_dir(args, 'eval')
    pred_dir = Path(args.pred_dir)
    manifest, samples = _labeled_samples(args, config)

    results = _load_predictions(pred_dir, samples)
    baseline_results = None
    if args.baseline_dir:
        baseline_results = _load_predictions(Path(args.baseline_dir), samples)
    method = args.method or pred_dir.name
    report = build_report(
        results,
        baseline_results,
        config.metrics,
        method=method,
        baseline_method=args.baseline_method or (Path(args.baseline_dir).name if args.baseline_dir else 'baseline'),
    )
    timing = read_timing(pred_dir / defaults.TIMING_FILENAME)
    if timing:
        report.mean_time = sum(timing.values()) / len(timing)
    report.meta['pred_dir'] = str(pred_dir)
    report.meta['manifest'] = str(manifest.root_path / defaults.MANIFEST_FILENAME)
    report.meta['split'] = args.split

    write_report(report, out)
    config.write(out / defaults.CONFIG_FILENAME)
    for sample, pred in results[: config.plot.max_figures]:
        plot_residual(
            residual_map(pred, sample.gt, config.metrics),
            out / 'figures' / f'{sample.sample_id}_residual.png',
            config.plot,
            title=sample.sample_id,
        )
    print(format_report([report]), end='')
    return 0


def cmd_report(args) -> int:
    """Merge the reports of several eval directories into one table."""
    reports = [read_report(Path(run_dir)) for run_dir in args.run_dirs]
    text = format_report(reports)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / defaults.REPORT_TABLE_FILENAME).write_text(text)
    print(text, end='')
    return 0


def cmd_plot(args) -> int:
    """Draw ground truth next to each prediction directory's fields."""
    config = _load_config(args)
    out = _output_dir(args, 'figures')
    _, samples = _labeled_samples(args, config)
    samples = samples[: config.plot.max_figures]
    methods = {Path(run_dir).name: dict(_by_id(_load_predictions(Path(run_dir), samples))) for run_dir in args.run_dirs}

    for sample in samples:
        predictions = {name: flows[sample.sample_id] for name, flows in methods.items()}
        plot_comparison(
            sample.gt, predictions, out / f'{sample.sample_id}_comparison.png', config.plot, title=sample.sample_id
        )
        first = next(iter(predictions.values()))
        plot_components(sample.gt, first, out / f'{sample.sample_id}_components.png', config.plot)
    print(f'wrote {2 * len(samples)} figures to {out}')
    return 0


def _by_id(results):
    return ((sample.sample_id, flow) for sample, flow in results)


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config', help='TOML config file')
    parser.add_argument('--seed', type=int, help='seed for generation, training and sampling')
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--threads', type=int, help='torch threads and parallel workers')
    parser.add_argument(
        '--set', action='append', metavar='SECTION.KEY=VALUE', help='override a config value (repeatable)'
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log progress')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log errors only')
    return parser


def _add_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--manifest', help='dataset manifest file')
    parser.add_argument('--split', default='test', help='train, val, test or all')
    parser.add_argument('--pair', nargs=2, action='append', metavar=('IMAGE1', 'IMAGE2'), help='an image pair')


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='pivdiffuser', description='Diffusion-based PIV flow estimation.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)

    gen = subparsers.add_parser('gen', parents=[common], help='render a synthetic dataset')
    gen.add_argument('--flows', default='uniform', help='comma-separated analytic flow kinds')
    gen.add_argument('--per-flow', type=int, default=4, help='samples per flow kind')
    gen.add_argument('--case', default=str(CaseLabel.UNLABELED), choices=[str(label) for label in CaseLabel])
    gen.add_argument('--extension', default='.png', choices=['.png', '.tif'])
    gen.set_defaults(handler=cmd_gen)

    train_parser = subparsers.add_parser('train', parents=[common], help='fine-tune the estimator')
    train_parser.add_argument('--manifest', help='dataset manifest file')
    train_parser.add_argument('--init-from', help='checkpoint to remap before training')
    train_parser.add_argument('--run-name', help='run directory name, default a timestamp')
    train_parser.set_defaults(handler=cmd_train)

    infer = subparsers.add_parser('infer', parents=[common], help='predict flows with a checkpoint')
    infer.add_argument('--checkpoint', required=True, help='model checkpoint (.h5 or .pth)')
    infer.add_argument('--upsample-factor', type=int, choices=[1, 2], help='override model.upsample_factor')
    infer.add_argument('--steps', type=int, help='override diffusion.inference_steps')
    _add_inputs(infer)
    infer.set_defaults(handler=cmd_infer)

    baseline = subparsers.add_parser('baseline', parents=[common], help='predict flows with WIDIM')
    _add_inputs(baseline)
    baseline.set_defaults(handler=cmd_baseline)

    evaluate = subparsers.add_parser('eval', parents=[common], help='evaluate predictions')
    evaluate.add_argument('--pred-dir', required=True, help='directory of predicted .flo files')
    evaluate.add_argument('--baseline-dir', help='baseline predictions to compare against')
    evaluate.add_argument('--method', help='method label, default the directory name')
    evaluate.add_argument('--baseline-method', help='baseline label, default the directory name')
    evaluate.add_argument('--manifest', help='dataset manifest file')
    evaluate.add_argument('--split', default='test', help='train, val, test or all')
    evaluate.set_defaults(handler=cmd_eval)

    report = subparsers.add_parser('report', parents=[common], help='merge eval reports')
    report.add_argument('run_dirs', nargs='+', help='eval output directories')
    report.set_defaults(handler=cmd_report)

    plot = subparsers.add_parser('plot', parents=[common], help='draw comparison figures')
    plot.add_argument('run_dirs', nargs='+', help='prediction directories')
    plot.add_argument('--manifest', help='dataset manifest file')
    plot.add_argument('--split', default='test', help='train, val, test or all')
    plot.set_defaults(handler=cmd_plot)
    return parser


def _configure_logging(args) -> None:
    level = logging.WARNING
    if args.verbose:
        level = logging.INFO
    elif args.quiet:
        level = logging.ERROR
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    if args.threads:
        torch.set_num_threads(args.threads)

    try:
        return args.handler(args)
    except NonFiniteLoss as error:
        print(f'error: {error}; diagnostics in {error.dump_path}', file=sys.stderr)
        return EXIT_TRAINING
    except CaseMismatch as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, OSError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_USAGE
