import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from tabulate import tabulate

from adaptive.adaptive_gate import GateLog, gate_stats, instance_fraction
from config import ARTIFACT_VERSION, TrainConfig
from errors import ReportError
from training.trainer import CrossvalSummary, RunMetrics

FLOAT_FORMAT = '%.6f'
RUN_JSON = 'run.json'
METRICS_CSV = 'metrics.csv'
GATE_CSV = 'gate.csv'
GATE_COLUMNS = ['epoch', 'batches_total', 'batches_gated', 'fraction']
METRICS_COLUMNS = ['fold', 'epoch', 'mean_loss', 'val_accuracy']
SCENARIO_HEADERS = {'bn': 'BN', 'no_bn': 'Without BN', 'adaptive': 'Adaptive BN'}

MSG_NO_EPOCHS = "No epoch metrics to tabulate."

logger = logging.getLogger(__name__)


def format_percent_cell(mean: float, std: float) -> Tuple[str, str]:
    """
    Render a fraction and its dispersion as percentages with 6 decimals.

    Args:
        mean: Mean accuracy as a fraction
        std: Standard deviation as a fraction

    Returns:
        Tuple of (percent, "(+/-dispersion)") strings
    """
    return f"{mean * 100:.6f}", f"(+/-{std * 100:.6f})"


def gate_frame(log: GateLog) -> pd.DataFrame:
    """One row per epoch: epoch, batches_total, batches_gated, fraction."""
    rows = [
        {'epoch': e.epoch, 'batches_total': e.batches_total, 'batches_gated': e.batches_gated, 'fraction': e.fraction}
        for e in gate_stats(log).per_epoch
    ]
    return pd.DataFrame(rows, columns=GATE_COLUMNS)


def metrics_frame(runs: Sequence[RunMetrics]) -> pd.DataFrame:
    rows = [
        {'fold': run.fold, 'epoch': e.epoch, 'mean_loss': e.mean_loss, 'val_accuracy': e.val_accuracy}
        for run in runs for e in run.epochs
    ]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def compare_frame(summaries: Dict[int, Dict[str, CrossvalSummary]]) -> pd.DataFrame:
    """
    Accuracy table with one row per batch size and a percent column plus a
    dispersion column for each scenario.

    Args:
        summaries: batch size -> scenario -> CrossvalSummary
    """
    rows = []
    for batch_size in sorted(summaries):
        row: Dict[str, Any] = {'batch_size': batch_size}
        for scenario, header in SCENARIO_HEADERS.items():
            summary = summaries[batch_size][scenario]
            row[header], row[f'{header} (+/-)'] = format_percent_cell(summary.mean, summary.std)
        rows.append(row)
    return pd.DataFrame(rows)


def pooled_gate_log(runs: Sequence[RunMetrics]) -> Optional[GateLog]:
    """Concatenate the gate logs of several folds; epochs pool across folds."""
    logs = [run.gate_log for run in runs if run.gate_log is not None]
    if not logs:
        return None
    pooled = GateLog()
    for log in logs:
        pooled.extend(log)
    return pooled


def run_results(metrics: Union[RunMetrics, CrossvalSummary]) -> Dict[str, Any]:
    """Deterministic result summary for run.json."""
    runs = metrics.runs if isinstance(metrics, CrossvalSummary) else [metrics]
    results: Dict[str, Any] = {
        'scenario': runs[0].scenario,
        'batch_size': runs[0].batch_size,
        'parameter_count': runs[0].parameter_count,
        'final_val_accuracy': [run.final_val_accuracy for run in runs],
        'test_accuracy': [run.test_accuracy for run in runs],
    }
    if isinstance(metrics, CrossvalSummary):
        results['fold_accuracies'] = metrics.fold_accuracies
        results['mean'] = metrics.mean
        results['std'] = metrics.std

    gate_log = pooled_gate_log(runs)
    if gate_log is not None and len(gate_log):
        stats = gate_stats(gate_log)
        results['gate'] = {
            'batches_total': stats.batches_total,
            'batches_gated': stats.batches_gated,
            'fraction': stats.fraction,
            'instance_fraction': instance_fraction(gate_log),
        }
    return results


@dataclass
class ReportBundle:
    """Everything one subcommand writes: run JSON content, CSV frames and an optional SVG chart."""
    subcommand: str
    config: TrainConfig
    results: Dict[str, Any]
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    svg: Optional[str] = None
    wall_clock_seconds: float = 0.0

    def run_document(self) -> Dict[str, Any]:
        return {
            'version': ARTIFACT_VERSION,
            'subcommand': self.subcommand,
            'seed': self.config.seed,
            'config': self.config.to_dict(),
            'results': self.results,
            'generated_at': datetime.now().isoformat(timespec='seconds'),
            'wall_clock_seconds': self.wall_clock_seconds,
        }

    def write(self, out_dir: str, svg_name: str = 'gate_fractions.svg') -> List[str]:
        """
        Write run.json, every frame as CSV, and the chart into out_dir.

        Returns:
            List of written paths

        Raises:
            ReportError: If the directory or a file cannot be written
        """
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            raise ReportError(f"Cannot create output directory '{out_dir}': {e}")

        written = [write_run_json(os.path.join(out_dir, RUN_JSON), self.run_document())]
        for name, frame in self.frames.items():
            written.append(write_csv(frame, os.path.join(out_dir, name)))
        if self.svg is not None:
            written.append(write_text(os.path.join(out_dir, svg_name), self.svg))
        logger.info(f"Wrote {len(written)} report file(s) to '{out_dir}'")
        return written


def write_text(file_path: str, content: str) -> str:
    try:
        with open(file_path, 'w', newline='\n') as f:
            f.write(content)
    except OSError as e:
        raise ReportError(f"Failed to write '{file_path}': {e}")
    return file_path


def write_run_json(file_path: str, document: Dict[str, Any]) -> str:
    """Write a run document with sorted keys and two-space indentation."""
    return write_text(file_path, json.dumps(document, sort_keys=True, indent=2) + '\n')


def write_csv(frame: pd.DataFrame, file_path: str) -> str:
    """Write a frame without its index; floats use 6 fixed decimals."""
    try:
        frame.to_csv(file_path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise ReportError(f"Failed to write '{file_path}': {e}")
    return file_path


def emit_reports(
    subcommand: str, config: TrainConfig, metrics: Union[RunMetrics, CrossvalSummary],
    gate_log: Optional[GateLog] = None
) -> ReportBundle:
    """
    Build the report bundle of a train or crossval run.

    Args:
        subcommand: CLI subcommand recorded in run.json
        config: Resolved configuration echoed into run.json
        metrics: A single run or a cross-validation summary
        gate_log: Gate decisions; defaults to the runs' own logs pooled

    Returns:
        ReportBundle with run.json content, metrics.csv and (adaptive) gate.csv
    """
    runs = metrics.runs if isinstance(metrics, CrossvalSummary) else [metrics]
    bundle = ReportBundle(subcommand, config, run_results(metrics))
    bundle.frames[METRICS_CSV] = metrics_frame(runs)
    gate_log = gate_log if gate_log is not None else pooled_gate_log(runs)
    if gate_log is not None and len(gate_log):
        bundle.frames[GATE_CSV] = gate_frame(gate_log)
    bundle.wall_clock_seconds = sum(run.wall_clock_seconds for run in runs)
    return bundle


def log_epoch_table(runs: Sequence[RunMetrics]) -> None:
    """Log per-epoch metrics of one or more runs as a single table."""
    rows = [
        [run.fold, e.epoch, e.mean_loss, e.val_accuracy, '' if e.gate_fraction is None else e.gate_fraction]
        for run in runs for e in run.epochs
    ]
    if not rows:
        logger.warning(MSG_NO_EPOCHS)
        return
    formatted_table = tabulate(
        rows,
        headers=["Fold", "Epoch", "Mean loss", "Val accuracy", "Gated fraction"],
        tablefmt="github",
        floatfmt=".4f",
    )
    logger.info("\n" + formatted_table)


def log_frame(frame: pd.DataFrame, title: str) -> None:
    """Log a report frame as a github-style table."""
    logger.info(f"{title}\n" + tabulate(frame, headers="keys", tablefmt="github", showindex=False))
