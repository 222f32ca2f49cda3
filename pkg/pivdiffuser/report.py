"""Evaluation reports: per-sample metrics, per-case tables, reductions."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import defaults
from .exceptions import CaseMismatch, EmptyValidSet
from .fields import CaseLabel, FlowSample, VelocityField
from .metrics import MetricOptions, aae_with_tally, angular_errors, endpoint_errors

logger = logging.getLogger(__name__)

_CASE_ORDER = tuple(str(label) for label in CaseLabel)


class SampleMetrics(NamedTuple):
    sample_id: str
    case_label: str
    aee: float
    rmse: float
    aae: float
    aae_excluded: int


class CaseMetrics(NamedTuple):
    aee: float
    rmse: float
    aae: float
    count: int


@dataclass
class EvalReport:
    """
    Metrics of one method over a set of samples.

    Parameters
    ----------
    method
        Label of the method in tables.
    per_sample
        Metrics of each sample.
    per_case
        Case label to the mean metrics of its samples.
    overall
        Metrics over all samples, aggregated as given by pooling.
    pooling
        'sample' or 'pixel'.
    reduction_vs_baseline, optional
        (AEE_base - AEE) / AEE_base when a baseline was given.
    baseline_method, optional
        Label of that baseline.
    mean_time, optional
        Mean inference seconds per sample.
    """

    method: str
    per_sample: List[SampleMetrics]
    per_case: Dict[str, CaseMetrics]
    overall: CaseMetrics
    pooling: str = 'sample'
    reduction_vs_baseline: Optional[float] = None
    baseline_method: Optional[str] = None
    mean_time: Optional[float] = None
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def aae_excluded(self) -> int:
        return sum(metrics.aae_excluded for metrics in self.per_sample)

    @property
    def sample_ids(self) -> List[str]:
        return [metrics.sample_id for metrics in self.per_sample]


def percent_reduction(new: float, old: float) -> str:
    """
    Relative reduction from old to new, as a percentage string.

    Examples
    --------
    >>> percent_reduction(0.0352, 0.0866)
    '59.4%'
    >>> percent_reduction(2, 21)
    '90.5%'
    """
    if old == 0:
        raise ValueError('reference value must be nonzero')
    return f'{100.0 * (old - new) / old:.1f}%'


def sample_metrics(sample: FlowSample, pred: VelocityField, opts: MetricOptions) -> SampleMetrics:
    """AEE, RMSE and AAE of one prediction."""
    errors = endpoint_errors(pred, sample.gt, opts)
    try:
        angle, excluded = aae_with_tally(pred, sample.gt, opts)
    except EmptyValidSet:
        angle, excluded = float('nan'), int(errors.size)
        logger.warning('%s: no pixels left for the angular error', sample.sample_id)
    return SampleMetrics(
        sample_id=sample.sample_id,
        case_label=str(sample.case_label),
        aee=float(np.mean(errors)),
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        aae=angle,
        aae_excluded=excluded,
    )


def _mean_metrics(rows: Sequence[SampleMetrics]) -> CaseMetrics:
    angles = [row.aae for row in rows if np.isfinite(row.aae)]
    return CaseMetrics(
        aee=float(np.mean([row.aee for row in rows])),
        rmse=float(np.mean([row.rmse for row in rows])),
        aae=float(np.mean(angles)) if angles else float('nan'),
        count=len(rows),
    )


def _pixel_pooled(results: Sequence[Tuple[FlowSample, VelocityField]], opts: MetricOptions) -> CaseMetrics:
    errors = np.concatenate([endpoint_errors(pred, sample.gt, opts) for sample, pred in results])
    angles = np.concatenate([angular_errors(pred, sample.gt, opts)[0] for sample, pred in results])
    return CaseMetrics(
        aee=float(np.mean(errors)),
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        aae=float(np.mean(angles)) if angles.size else float('nan'),
        count=len(results),
    )


def aggregate(per_sample: Sequence[SampleMetrics]) -> Dict[str, CaseMetrics]:
    """Per-case means with equal weight per sample, in case order."""
    groups = defaultdict(list)
    for row in per_sample:
        groups[row.case_label].append(row)
    return {case: _mean_metrics(groups[case]) for case in sorted(groups, key=_case_key)}


def _case_key(case: str):
    return (_CASE_ORDER.index(case) if case in _CASE_ORDER else len(_CASE_ORDER), case)


def build_report(
    results: Sequence[Tuple[FlowSample, VelocityField]],
    baseline_results: Sequence[Tuple[FlowSample, VelocityField]] = None,
    opts: MetricOptions = None,
    *,
    method: str = 'ours',
    baseline_method: str = 'baseline',
) -> EvalReport:
    """
    Evaluate predictions against ground truth.

    Parameters
    ----------
    results
        (sample, prediction) pairs; samples must carry ground truth.
    baseline_results, optional
        The same samples predicted by a baseline.
    opts, optional
        Metric options; opts.pooling selects the overall aggregation.

    Optional Parameters
    -------------------
    method, baseline_method
        Labels used in tables.

    Returns
    -------
    EvalReport

    Raises
    ------
    CaseMismatch
        If the baseline covers a different sample set.
    """
    opts = opts if opts is not None else MetricOptions()
    opts.check_consistency()
    if not results:
        raise ValueError('need at least one result')
    for sample, _ in results:
        if sample.gt is None:
            raise ValueError(f'{sample.sample_id} has no ground truth')

    per_sample = [sample_metrics(sample, pred, opts) for sample, pred in results]
    if opts.pooling == 'pixel':
        overall = _pixel_pooled(results, opts)
    else:
        overall = _mean_metrics(per_sample)
    report = EvalReport(
        method=method,
        per_sample=per_sample,
        per_case=aggregate(per_sample),
        overall=overall,
        pooling=opts.pooling,
    )

    if baseline_results is not None:
        ours = {sample.sample_id for sample, _ in results}
        theirs = {sample.sample_id for sample, _ in baseline_results}
        if ours != theirs:
            raise CaseMismatch(ours ^ theirs)
        baseline = build_report(baseline_results, opts=opts, method=baseline_method)
        report.baseline_method = baseline_method
        report.reduction_vs_baseline = (baseline.overall.aee - overall.aee) / baseline.overall.aee
        report.meta['baseline_aee'] = repr(baseline.overall.aee)
    return report


def format_case_table(reports: Sequence[EvalReport]) -> str:
    """AEE per case, one row per method, plus the overall column."""
    cases = sorted({case for report in reports for case in report.per_case}, key=_case_key)
    header = ['method'] + cases + ['Overall']
    rows = [header]
    for report in reports:
        row = [report.method]
        for case in cases:
            metrics = report.per_case.get(case)
            row.append(f'{metrics.aee:.4f}' if metrics is not None else '-')
        row.append(f'{report.overall.aee:.4f}')
        rows.append(row)
    return _format_rows(rows)


def format_overall_table(reports: Sequence[EvalReport]) -> str:
    """AEE, RMSE and AAE over all samples, one row per method."""
    timed = any(report.mean_time is not None for report in reports)
    header = ['method', 'AEE', 'RMSE', 'AAE (rad)', 'samples']
    if timed:
        header.append('avg time (s)')
    rows = [header]
    for report in reports:
        overall = report.overall
        row = [report.method, f'{overall.aee:.4f}', f'{overall.rmse:.4f}', f'{overall.aae:.4f}', str(overall.count)]
        if timed:
            row.append(f'{report.mean_time:.3f}' if report.mean_time is not None else '-')
        rows.append(row)
    return _format_rows(rows)


def _format_rows(rows: List[List[str]]) -> str:
    widths = [max(len(row[index]) for row in rows) for index in range(len(rows[0]))]
    lines = list()
    for number, row in enumerate(rows):
        lines.append('  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        if number == 0:
            lines.append('  '.join('-' * width for width in widths))
    return '\n'.join(lines)


def format_report(reports: Sequence[EvalReport]) -> str:
    """Human-readable report text for one or more methods."""
    pooling = sorted({report.pooling for report in reports})
    parts = [
        'AEE per case (pixels per frame)',
        format_case_table(reports),
        '',
        f'Overall ({"/".join(pooling)} pooling)',
        format_overall_table(reports),
    ]
    for report in reports:
        if report.reduction_vs_baseline is not None:
            parts.append('')
            parts.append(
                f'AEE reduction of {report.method} vs {report.baseline_method}: '
                f'{100.0 * report.reduction_vs_baseline:.1f}%'
            )
        if report.aae_excluded:
            parts.append(f'{report.method}: {report.aae_excluded} zero-vector pixels excluded from AAE')
    return '\n'.join(parts) + '\n'


def write_report(report: EvalReport, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write report.txt and report.tsv into a directory.

    The tsv file holds one record per line, the first column naming the
    record kind: meta, sample, case, overall or reduction.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table_path = directory / defaults.REPORT_TABLE_FILENAME
    table_path.write_text(format_report([report]))

    lines = [f'meta\tmethod\t{report.method}', f'meta\tpooling\t{report.pooling}']
    if report.mean_time is not None:
        lines.append(f'meta\tmean_time\t{report.mean_time!r}')
    lines += [f'meta\t{key}\t{value}' for key, value in report.meta.items()]
    for row in report.per_sample:
        lines.append(
            f'sample\t{row.sample_id}\t{row.case_label}\t{row.aee!r}\t{row.rmse!r}\t{row.aae!r}\t{row.aae_excluded}'
        )
    for case, metrics in report.per_case.items():
        lines.append(f'case\t{case}\t{metrics.aee!r}\t{metrics.rmse!r}\t{metrics.aae!r}\t{metrics.count}')
    overall = report.overall
    lines.append(f'overall\t-\t{overall.aee!r}\t{overall.rmse!r}\t{overall.aae!r}\t{overall.count}')
    if report.reduction_vs_baseline is not None:
        lines.append(f'reduction\t{report.baseline_method}\t{report.reduction_vs_baseline!r}')
    records_path = directory / defaults.REPORT_RECORDS_FILENAME
    records_path.write_text('\n'.join(lines) + '\n')
    logger.info('wrote %s and %s', table_path, records_path)
    return table_path, records_path


def read_report(filename: Union[str, Path]) -> EvalReport:
    """Read a report.tsv written by write_report."""
    filename = Path(filename)
    if filename.is_dir():
        filename = filename / defaults.REPORT_RECORDS_FILENAME
    if not filename.exists():
        raise ValueError(f'cannot find report {filename}')

    meta, per_sample, per_case = dict(), list(), dict()
    overall = reduction = baseline_method = None
    for number, line in enumerate(filename.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split('\t')
        kind = fields[0]
        try:
            if kind == 'meta' and len(fields) == 3:
                meta[fields[1]] = fields[2]
            elif kind == 'sample' and len(fields) == 7:
                per_sample.append(
                    SampleMetrics(fields[1], fields[2], *map(float, fields[3:6]), int(fields[6]))
                )
            elif kind == 'case' and len(fields) == 6:
                per_case[fields[1]] = CaseMetrics(*map(float, fields[2:5]), int(fields[5]))
            elif kind == 'overall' and len(fields) == 6:
                overall = CaseMetrics(*map(float, fields[2:5]), int(fields[5]))
            elif kind == 'reduction' and len(fields) == 3:
                baseline_method, reduction = fields[1], float(fields[2])
            else:
                raise ValueError(f'unknown record \'{kind}\'')
        except ValueError as error:
            raise ValueError(f'{filename}:{number}: malformed line ({error})') from error

    if overall is None or 'method' not in meta:
        raise ValueError(f'{filename}: missing method or overall record')
    method = meta.pop('method')
    pooling = meta.pop('pooling', 'sample')
    mean_time = float(meta.pop('mean_time')) if 'mean_time' in meta else None
    return EvalReport(
        method=method,
        per_sample=per_sample,
        per_case=per_case,
        overall=overall,
        pooling=pooling,
        reduction_vs_baseline=reduction,
        baseline_method=baseline_method,
        mean_time=mean_time,
        meta=meta,
    )


def read_timing(filename: Union[str, Path]) -> Dict[str, float]:
    """Per-sample seconds from a timing.tsv file; empty when absent."""
    filename = Path(filename)
    if not filename.exists():
        return dict()
    timing = dict()
    for line in filename.read_text().splitlines()[1:]:
        if line.strip():
            sample_id, seconds = line.split('\t')
            timing[sample_id] = float(seconds)
    return timing


def write_timing(timing: Dict[str, float], filename: Union[str, Path]) -> Path:
    """Write per-sample seconds as a two-column tsv file."""
    filename = Path(filename)
    lines = ['sample_id\tseconds'] + [f'{sample_id}\t{seconds!r}' for sample_id, seconds in timing.items()]
    filename.write_text('\n'.join(lines) + '\n')
    return filename
