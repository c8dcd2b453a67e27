import logging
import time
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from adaptive.adaptive_gate import (
    GateLog,
    batch_averages,
    batch_size_trend,
    gate_stats,
    instance_fraction,
    replay_gate_log,
    sweep_widths,
)
from config import SCENARIOS, TrainConfig
from datasets.batching import kfold_split, sample_pool
from datasets.dataset_reader import LabeledDataset, load_dataset
from numerics.gradcheck import run_gradcheck_suite
from training.trainer import CrossvalSummary, crossval_splits, run_crossval, run_training
from utils.file_utils import (
    ReportBundle,
    compare_frame,
    emit_reports,
    gate_frame,
    log_epoch_table,
    log_frame,
    pooled_gate_log,
)
from utils.svg_chart import render_gate_chart

logger = logging.getLogger(__name__)

MSG_NO_TEST_SPLIT = "No test split configured; test accuracy is not reported."


def load_data(config: TrainConfig) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    """Load the training split and, when configured, the test split."""
    data = load_dataset(config, 'train')
    logger.info(f"Loaded {len(data)} {config.dataset} training instances of shape {data.input_shape}")
    test_data = load_dataset(config, 'test')
    if test_data is None:
        logger.info(MSG_NO_TEST_SPLIT)
    return data, test_data


def run_train_command(config: TrainConfig, out_dir: str) -> ReportBundle:
    """Train one model on the first fold of the desk-scale pool."""
    data, test_data = load_data(config)
    split = crossval_splits(config, len(data))[0]
    metrics = run_training(config, data, split, test_data, fold=1)
    log_epoch_table([metrics])

    bundle = emit_reports('train', config, metrics)
    bundle.write(out_dir)
    return bundle


def run_crossval_command(config: TrainConfig, out_dir: str) -> ReportBundle:
    """K-fold cross-validation of the configured scenario."""
    data, test_data = load_data(config)
    summary = run_crossval(config, data, test_data)
    log_epoch_table(summary.runs)

    bundle = emit_reports('crossval', config, summary)
    bundle.write(out_dir)
    return bundle


def _summary_results(summary: CrossvalSummary) -> Dict[str, object]:
    results = {'fold_accuracies': summary.fold_accuracies, 'mean': summary.mean, 'std': summary.std}
    gate_log = pooled_gate_log(summary.runs)
    if gate_log is not None and len(gate_log):
        results['gate_fraction'] = gate_stats(gate_log).fraction
    return results


def run_compare_command(config: TrainConfig, out_dir: str) -> ReportBundle:
    """
    Cross-validate every scenario at every configured batch size and write
    the accuracy table, per-batch-size gate CSVs and the gate chart.
    """
    started = time.perf_counter()
    data, test_data = load_data(config)

    summaries: Dict[int, Dict[str, CrossvalSummary]] = {}
    gate_logs: Dict[int, GateLog] = {}
    for batch_size in config.batch_sizes:
        summaries[batch_size] = {}
        for scenario in SCENARIOS:
            logger.info(f"Comparing scenario {scenario} at batch size {batch_size}")
            run_config = replace(config, scenario=scenario, batch_size=batch_size)
            summaries[batch_size][scenario] = run_crossval(run_config, data, test_data)
        gate_logs[batch_size] = pooled_gate_log(summaries[batch_size]['adaptive'].runs)

    frame = compare_frame(summaries)
    log_frame(frame, "Accuracy (%) by batch size")

    results = {
        str(batch_size): {scenario: _summary_results(summary) for scenario, summary in by_scenario.items()}
        for batch_size, by_scenario in summaries.items()
    }
    bundle = ReportBundle('compare', config, results, frames={'compare.csv': frame})
    for batch_size, log in gate_logs.items():
        bundle.frames[f'gate_bs{batch_size}.csv'] = gate_frame(log)

    batch_sizes = sorted(gate_logs)
    bundle.svg = render_gate_chart(batch_sizes, [gate_stats(gate_logs[b]).fraction for b in batch_sizes])
    bundle.wall_clock_seconds = time.perf_counter() - started
    bundle.write(out_dir)
    return bundle


def _calibration_pool(config: TrainConfig, data: LabeledDataset, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Instance averages and labels of the first fold's training part of a seeded pool."""
    pool = sample_pool(len(data), config.subset_size or len(data), seed)
    train, _ = kfold_split(pool.size, config.folds, seed).folds[0]
    indices = pool[train]
    return batch_averages(data.images[indices]), data.labels[indices]


def run_gatereport_command(config: TrainConfig, out_dir: str) -> ReportBundle:
    """
    Replay the gate without training for every batch size over seeded
    replications, and measure how the gated fraction trends with batch size.
    """
    started = time.perf_counter()
    data, _ = load_data(config)
    batch_sizes = sorted(config.batch_sizes)

    trend_rows: List[Dict[str, object]] = []
    spearman: List[float] = []
    non_decreasing = 0
    pooled_logs = {batch_size: GateLog() for batch_size in batch_sizes}
    for replication in range(config.replications):
        seed = config.seed + replication
        averages, labels = _calibration_pool(config, data, seed)
        fractions = []
        for batch_size in batch_sizes:
            _, log = replay_gate_log(averages, labels, data.class_count, batch_size, config.epochs,
                                     seed, config.upr_p, config.lor_p)
            fraction = gate_stats(log).fraction
            fractions.append(fraction)
            pooled_logs[batch_size].extend(log)
            trend_rows.append({'replication': replication, 'seed': seed, 'batch_size': batch_size,
                               'fraction': fraction, 'instance_fraction': instance_fraction(log)})
        rho = batch_size_trend(batch_sizes, fractions)
        spearman.append(rho)
        non_decreasing += int(all(a <= b for a, b in zip(fractions, fractions[1:])))
        logger.info(f"Replication {replication + 1}/{config.replications}: gated fractions "
                    f"{', '.join(f'{f:.4f}' for f in fractions)}; Spearman {rho:.3f}")

    averages, labels = _calibration_pool(config, data, config.seed)
    sweep = sweep_widths(averages, labels, data.class_count, config.batch_size, config.sweep_widths, config.seed)
    sweep_frame = pd.DataFrame(
        [{'width': width, 'batch_size': config.batch_size, 'fraction': fraction} for width, fraction in sweep]
    )
    trend_frame = pd.DataFrame(trend_rows)
    log_frame(sweep_frame, "Gated fraction by symmetric interval width")

    pooled_fractions = [gate_stats(pooled_logs[b]).fraction for b in batch_sizes]
    results = {
        'batch_sizes': batch_sizes,
        'pooled_fractions': pooled_fractions,
        'spearman': spearman,
        'non_decreasing_replications': non_decreasing,
        'replications': config.replications,
    }
    bundle = ReportBundle('gatereport', config, results,
                          frames={'gate_trend.csv': trend_frame, 'threshold_sweep.csv': sweep_frame})
    for batch_size in batch_sizes:
        bundle.frames[f'gate_bs{batch_size}.csv'] = gate_frame(pooled_logs[batch_size])
    bundle.svg = render_gate_chart(batch_sizes, pooled_fractions)
    bundle.wall_clock_seconds = time.perf_counter() - started
    logger.info(f"Gated fraction non-decreasing in batch size for {non_decreasing} of "
                f"{config.replications} replication(s)")
    bundle.write(out_dir)
    return bundle


def run_gradcheck_command(config: TrainConfig, out_dir: str) -> ReportBundle:
    """Finite-difference checks of every layer; results['passed'] tells whether all passed."""
    started = time.perf_counter()
    checks = run_gradcheck_suite(config.gradcheck_points, config.seed)
    frame = pd.DataFrame([
        {'layer': c.layer, 'quantity': c.quantity, 'max_relative_error': f"{c.max_relative_error:.3e}",
         'tolerance': f"{c.tolerance:.0e}", 'passed': c.passed}
        for c in checks
    ])
    log_frame(frame, "Gradient checks")

    results = {
        'passed': all(c.passed for c in checks),
        'checks': [{'layer': c.layer, 'quantity': c.quantity, 'max_relative_error': c.max_relative_error,
                    'tolerance': c.tolerance, 'passed': c.passed} for c in checks],
    }
    bundle = ReportBundle('gradcheck', config, results, frames={'gradcheck.csv': frame})
    bundle.wall_clock_seconds = time.perf_counter() - started
    bundle.write(out_dir)
    return bundle


COMMANDS = {
    'train': run_train_command,
    'crossval': run_crossval_command,
    'compare': run_compare_command,
    'gatereport': run_gatereport_command,
    'gradcheck': run_gradcheck_command,
}
