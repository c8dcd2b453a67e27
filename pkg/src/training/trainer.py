"""
Training runs for the three scenarios and the k-fold protocol.

    bn        normalization site runs on every training batch
    no_bn     no normalization site
    adaptive  epoch 1 trains without normalization while calibrating class
              averages; from epoch 2 each batch is normalized iff the gate fires
"""
import logging
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from adaptive.adaptive_gate import (
    ClassAverageTable,
    GateLog,
    ThresholdTable,
    batch_averages,
    finalize_thresholds,
    gate_batch,
    gate_stats,
    threshold_rows,
)
from datasets.batching import kfold_split, make_batches, sample_pool
from datasets.dataset_reader import LabeledDataset
from errors import DataError, NumericError
from numerics.layers import softmax_cross_entropy
from training.model import Model, build_model
from training.optimizer import sgd_update

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    mean_loss: float
    val_accuracy: float
    gate_fraction: Optional[float] = None


@dataclass
class RunMetrics:
    """Per-epoch results of one training run."""
    scenario: str
    batch_size: int
    fold: int
    epochs: List[EpochMetrics] = field(default_factory=list)
    test_accuracy: Optional[float] = None
    wall_clock_seconds: float = 0.0
    parameter_count: int = 0
    gate_log: Optional[GateLog] = None
    thresholds: Optional[ThresholdTable] = None

    @property
    def final_val_accuracy(self) -> float:
        return self.epochs[-1].val_accuracy


@dataclass
class CrossvalSummary:
    """Fold accuracies with their mean and population standard deviation."""
    fold_accuracies: List[float]
    mean: float
    std: float
    runs: List[RunMetrics] = field(default_factory=list)


def binary_accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    """(TP + TN) / (TP + FP + FN + TN)."""
    total = tp + tn + fp + fn
    if total == 0:
        raise DataError("Accuracy of an empty confusion matrix is undefined")
    return float(Fraction(tp + tn, total))


def evaluate_accuracy(model: Model, data: LabeledDataset, indices: Sequence[int]) -> float:
    """
    Top-1 accuracy of the model on data[indices] with evaluation-mode layers.

    Raises:
        DataError: If indices is empty
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise DataError("Cannot evaluate accuracy on an empty index set")
    correct = 0
    for start in range(0, indices.size, EVAL_CHUNK):
        chunk = indices[start:start + EVAL_CHUNK]
        predictions = model.predict(data.images[chunk])
        correct += int(np.sum(predictions == data.labels[chunk]))
    return float(Fraction(correct, int(indices.size)))


def _check_split(data: LabeledDataset, split: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    train_idx, val_idx = (np.asarray(part, dtype=np.int64) for part in split)
    for name, part in (('training', train_idx), ('validation', val_idx)):
        if part.size == 0:
            raise DataError(f"The {name} split is empty")
        if part.min() < 0 or part.max() >= len(data):
            raise DataError(f"The {name} split indexes outside a dataset of {len(data)} instances")
    return train_idx, val_idx


def _gate_decision(config, images, labels, thresholds, epoch, batch_index, gate_log):
    decision, record = gate_batch(images, labels, thresholds, epoch, batch_index)
    if config.gate_override == 'always' and not decision:
        record = replace(record, decision=True, forced=True)
    elif config.gate_override == 'never' and decision:
        record = replace(record, decision=False, trigger=None, forced=True)
    gate_log.append(record)
    return record.decision


def run_training(
    config, data: LabeledDataset, split: Tuple[np.ndarray, np.ndarray],
    test_data: Optional[LabeledDataset] = None, fold: int = 1
) -> RunMetrics:
    """
    Train one model on split[0] and track validation accuracy on split[1].

    Args:
        config: TrainConfig
        data: Dataset the split indexes into
        split: (training indices, validation indices)
        test_data: Optional held-out set scored once after the last epoch
        fold: Fold number recorded in the metrics

    Returns:
        RunMetrics

    Raises:
        ConfigError: If the adaptive scenario has fewer than 2 epochs
        CalibrationError: If a class is missing from the training split
        NumericError: If the training loss becomes non-finite
    """
    config.validate()
    train_idx, val_idx = _check_split(data, split)

    started = time.perf_counter()
    model = build_model(config, data.input_shape, data.class_count)
    params = model.parameters()
    velocity = {}
    adaptive = config.scenario == 'adaptive'
    calibration = ClassAverageTable() if adaptive else None
    gate_log = GateLog() if adaptive else None
    thresholds = None

    metrics = RunMetrics(config.scenario, config.batch_size, fold, parameter_count=model.parameter_count())
    logger.info(f"Fold {fold}: training {config.scenario} on {train_idx.size} instances, "
                f"batch size {config.batch_size}, {config.epochs} epoch(s)")

    step = 0
    for epoch in range(1, config.epochs + 1):
        plan = make_batches(train_idx.size, config.batch_size, config.seed, epoch)
        losses = []
        for batch_index, local in enumerate(plan.batches):
            batch = train_idx[local]
            images, labels = data.images[batch], data.labels[batch]

            if config.scenario == 'bn':
                normalize = True
            elif not adaptive:
                normalize = False
            elif epoch == 1:
                calibration.add_batch(batch_averages(images), labels)
                normalize = False
            else:
                normalize = _gate_decision(config, images, labels, thresholds, epoch, batch_index, gate_log)

            logits, state = model.forward_train(images, normalize, step)
            loss, _, grad_logits = softmax_cross_entropy(logits, labels)
            grads = model.backward(state, grad_logits)
            params, velocity = sgd_update(params, grads, config.learning_rate, config.sgd_momentum, velocity)
            model.load_parameters(params)
            losses.append(loss)
            step += 1

        if adaptive and epoch == 1:
            thresholds = finalize_thresholds(calibration.finalize(data.class_count), config.upr_p, config.lor_p)
            logger.debug("Class thresholds:\n" + tabulate(
                threshold_rows(thresholds), headers=["Class", "Mean", "A_min", "A_max"], tablefmt="github"
            ))

        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NumericError(f"Training diverged: epoch {epoch} mean loss is {mean_loss}")
        accuracy = evaluate_accuracy(model, data, val_idx)

        gate_fraction = None
        if adaptive and epoch >= 2:
            epoch_stats = [e for e in gate_stats(gate_log).per_epoch if e.epoch == epoch]
            gate_fraction = epoch_stats[0].fraction
        metrics.epochs.append(EpochMetrics(epoch, mean_loss, accuracy, gate_fraction))

        gate_note = f", gated {gate_fraction:.2%}" if gate_fraction is not None else ""
        logger.info(f"Fold {fold} epoch {epoch}/{config.epochs}: loss {mean_loss:.4f}, "
                    f"val accuracy {accuracy:.4f}{gate_note}")

    if test_data is not None:
        test_idx = sample_pool(len(test_data), config.eval_cap or len(test_data), config.seed)
        metrics.test_accuracy = evaluate_accuracy(model, test_data, test_idx)

    metrics.gate_log = gate_log
    metrics.thresholds = thresholds
    metrics.wall_clock_seconds = time.perf_counter() - started
    return metrics


def summarize_folds(accuracies: Sequence[float], runs: Optional[List[RunMetrics]] = None) -> CrossvalSummary:
    """Mean and population (divide-by-K) standard deviation of fold accuracies."""
    if not accuracies:
        raise DataError("No fold accuracies to summarize")
    values = np.asarray(accuracies, dtype=np.float64)
    mean = float(np.clip(values.mean(), values.min(), values.max()))
    std = float(values.std(ddof=0))
    return CrossvalSummary(list(map(float, accuracies)), mean, std, runs or [])


def crossval_splits(config, n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Folds over the desk-scale pool: a seeded subset of `subset_size`
    instances, K-fold split, validation slices capped at `eval_cap`.
    """
    pool = sample_pool(n, config.subset_size or n, config.seed)
    splits = []
    for train, validation in kfold_split(pool.size, config.folds, config.seed).folds:
        validation = validation[:config.eval_cap] if config.eval_cap else validation
        splits.append((pool[train], pool[validation]))
    return splits


def run_crossval(config, data: LabeledDataset, test_data: Optional[LabeledDataset] = None) -> CrossvalSummary:
    """
    Train a fresh seeded model per fold and summarize validation accuracies.
    Folds run in fold order.
    """
    runs = []
    for fold, split in enumerate(crossval_splits(config, len(data)), 1):
        runs.append(run_training(config, data, split, test_data, fold))

    summary = summarize_folds([run.final_val_accuracy for run in runs], runs)
    logger.info(f"{config.scenario} batch size {config.batch_size}: "
                f"{summary.mean:.2%} (+/-{summary.std:.2%}) over {len(runs)} folds")
    return summary
