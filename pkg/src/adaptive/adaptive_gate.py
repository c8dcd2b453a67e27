"""
Adaptive batch-normalization gate.

The first epoch records, per class, the mean of every instance's average
pixel value. Each class then gets the interval
[mean - mean * lor_p, mean + mean * upr_p], and from the second epoch on a
batch is normalized iff at least one of its instances falls strictly outside
its own class interval.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from datasets.batching import make_batches
from errors import CalibrationError, DataError, ParameterError, StateError

logger = logging.getLogger(__name__)

DEFAULT_UPR_P = 0.10
DEFAULT_LOR_P = 0.10


def batch_averages(images: np.ndarray) -> np.ndarray:
    """
    Average pixel value of every instance in a batch, in float64.

    Args:
        images: Batch [N x C x H x W] (or any [N x ...] array)

    Returns:
        np.ndarray: Vector [N] of instance averages
    """
    flat = np.asarray(images).reshape(len(images), -1)
    if flat.shape[1] == 0:
        raise DataError("Cannot average an instance with no pixels")
    return flat.mean(axis=1, dtype=np.float64)


def instance_average(image: np.ndarray) -> float:
    """
    Mean over all channels and pixels of one normalized image.

    Raises:
        DataError: If the image holds no values
    """
    image = np.asarray(image)
    if image.size == 0:
        raise DataError("Cannot average an empty image")
    # Same reduction as batch_averages so calibration and gating agree bitwise.
    return float(batch_averages(image.reshape(1, -1))[0])


@dataclass
class ClassAverageTable:
    """Running sums of instance averages per class, finalized into class means."""
    sums: Dict[int, float] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)
    means: Optional[Dict[int, float]] = None

    def add(self, class_id: int, average: float) -> None:
        """Accumulate one instance average; order of calls is the summation order."""
        if self.means is not None:
            raise StateError("Class averages are already finalized")
        class_id = int(class_id)
        self.sums[class_id] = self.sums.get(class_id, 0.0) + float(average)
        self.counts[class_id] = self.counts.get(class_id, 0) + 1

    def add_batch(self, averages: Sequence[float], labels: Sequence[int]) -> None:
        for average, label in zip(averages, labels):
            self.add(label, average)

    def finalize(self, class_count: int) -> 'ClassAverageTable':
        """
        Turn the sums into means.

        Raises:
            CalibrationError: If any class in [0, class_count) was never seen
        """
        missing = [c for c in range(class_count) if self.counts.get(c, 0) == 0]
        if missing:
            raise CalibrationError(f"Class(es) {missing} absent from the calibration epoch")
        self.means = {c: self.sums[c] / self.counts[c] for c in sorted(self.counts)}
        return self


def calibrate(stream: Iterable[Tuple[np.ndarray, int]], class_count: int) -> ClassAverageTable:
    """
    Single pass over the calibration epoch's (image, class id) stream.

    Args:
        stream: Epoch-1 traversal in training order
        class_count: Number of classes every one of which must appear

    Returns:
        ClassAverageTable: Finalized table
    """
    table = ClassAverageTable()
    for image, class_id in stream:
        table.add(class_id, instance_average(image))
    return table.finalize(class_count)


@dataclass(frozen=True)
class ThresholdTable:
    """Per-class intervals [a_min, a_max] around the calibrated class means."""
    means: Dict[int, float]
    a_min: Dict[int, float]
    a_max: Dict[int, float]
    upr_p: float
    lor_p: float

    def bounds_for(self, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Look up (a_min, a_max) vectors for a vector of class ids."""
        try:
            lower = np.array([self.a_min[int(label)] for label in labels], dtype=np.float64)
            upper = np.array([self.a_max[int(label)] for label in labels], dtype=np.float64)
        except KeyError as e:
            raise DataError(f"Class id {e.args[0]} has no calibrated threshold")
        return lower, upper


def finalize_thresholds(table: ClassAverageTable, upr_p: float, lor_p: float) -> ThresholdTable:
    """
    Build class intervals a_max = mean + mean * upr_p, a_min = mean - mean * lor_p.

    Raises:
        StateError: If the table is not finalized
        ParameterError: If upr_p < 0 or lor_p outside [0, 1]
    """
    if table.means is None:
        raise StateError("Class averages must be finalized before thresholds are built")
    if upr_p < 0:
        raise ParameterError(f"upr_p must be non-negative, got {upr_p}")
    if not 0.0 <= lor_p <= 1.0:
        raise ParameterError(f"lor_p must lie in [0, 1], got {lor_p}")

    a_max = {c: mean + mean * upr_p for c, mean in table.means.items()}
    a_min = {c: mean - mean * lor_p for c, mean in table.means.items()}
    return ThresholdTable(means=dict(table.means), a_min=a_min, a_max=a_max, upr_p=upr_p, lor_p=lor_p)


def threshold_rows(thresholds: ThresholdTable) -> List[List[float]]:
    """Rows of (class, mean, a_min, a_max) for logging."""
    return [[c, thresholds.means[c], thresholds.a_min[c], thresholds.a_max[c]] for c in sorted(thresholds.means)]


@dataclass(frozen=True)
class GateTrigger:
    instance_index: int
    class_id: int
    instance_average: float


@dataclass(frozen=True)
class GateRecord:
    """One per-batch decision."""
    epoch: int
    batch_index: int
    decision: bool
    trigger: Optional[GateTrigger] = None
    batch_size: int = 0
    out_of_range: int = 0
    forced: bool = False

    def __post_init__(self) -> None:
        if not self.decision and self.trigger is not None:
            raise StateError("A batch that is not normalized cannot carry a trigger")
        if self.decision and self.trigger is None and not self.forced:
            raise StateError("A normalized batch needs a trigger unless the decision was forced")


@dataclass
class GateLog:
    """Ordered gate decisions with per-epoch totals."""
    records: List[GateRecord] = field(default_factory=list)

    def append(self, record: GateRecord) -> None:
        self.records.append(record)

    def extend(self, other: 'GateLog') -> None:
        self.records.extend(other.records)

    def __len__(self) -> int:
        return len(self.records)

    def epoch_totals(self) -> Dict[int, Tuple[int, int]]:
        """Map epoch -> (batches_total, batches_gated)."""
        totals: Dict[int, List[int]] = {}
        for record in self.records:
            entry = totals.setdefault(record.epoch, [0, 0])
            entry[0] += 1
            entry[1] += int(record.decision)
        return {epoch: (total, gated) for epoch, (total, gated) in sorted(totals.items())}


@dataclass(frozen=True)
class EpochGateFraction:
    epoch: int
    batches_total: int
    batches_gated: int
    fraction: float


@dataclass(frozen=True)
class GateStats:
    per_epoch: List[EpochGateFraction]
    batches_total: int
    batches_gated: int
    fraction: float


def gate_averages(
    averages: np.ndarray, labels: np.ndarray, thresholds: ThresholdTable,
    epoch: int = 0, batch_index: int = 0
) -> Tuple[bool, GateRecord]:
    """
    Gate a batch from precomputed instance averages.

    Returns:
        Tuple of (decision, record); the first out-of-range instance is the trigger
    """
    averages = np.asarray(averages, dtype=np.float64)
    labels = np.asarray(labels)
    lower, upper = thresholds.bounds_for(labels)
    outside = (averages > upper) | (averages < lower)
    hits = np.flatnonzero(outside)

    trigger = None
    if hits.size:
        first = int(hits[0])
        trigger = GateTrigger(first, int(labels[first]), float(averages[first]))
    record = GateRecord(
        epoch=epoch,
        batch_index=batch_index,
        decision=bool(hits.size),
        trigger=trigger,
        batch_size=int(labels.size),
        out_of_range=int(hits.size),
    )
    return record.decision, record


def gate_batch(
    images: np.ndarray, labels: np.ndarray, thresholds: ThresholdTable,
    epoch: int = 0, batch_index: int = 0
) -> Tuple[bool, GateRecord]:
    """
    Decide whether a batch is normalized: true iff some instance average is
    strictly above its class a_max or strictly below its class a_min.

    Args:
        images: Batch [N x C x H x W]
        labels: Class ids [N]
        thresholds: Finalized class intervals
        epoch: Epoch index recorded in the GateRecord
        batch_index: Batch index recorded in the GateRecord

    Returns:
        Tuple of (decision, record)

    Raises:
        DataError: If a class id has no threshold
    """
    return gate_averages(batch_averages(images), labels, thresholds, epoch, batch_index)


def gate_stats(log: GateLog) -> GateStats:
    """
    Gated fractions per epoch and pooled over the whole log.

    Raises:
        DataError: If the log is empty
    """
    if not log.records:
        raise DataError("Gate log is empty")

    per_epoch = []
    pooled_total = pooled_gated = 0
    for epoch, (total, gated) in log.epoch_totals().items():
        per_epoch.append(EpochGateFraction(epoch, total, gated, float(Fraction(gated, total))))
        pooled_total += total
        pooled_gated += gated
    return GateStats(per_epoch, pooled_total, pooled_gated, float(Fraction(pooled_gated, pooled_total)))


def instance_fraction(log: GateLog) -> float:
    """Fraction of logged instances that fell outside their class interval."""
    instances = sum(r.batch_size for r in log.records)
    if instances == 0:
        raise DataError("Gate log holds no instances")
    return float(Fraction(sum(r.out_of_range for r in log.records), instances))


def replay_gate_log(
    averages: np.ndarray, labels: np.ndarray, class_count: int, batch_size: int,
    epochs: int, seed: int, upr_p: float = DEFAULT_UPR_P, lor_p: float = DEFAULT_LOR_P
) -> Tuple[ThresholdTable, GateLog]:
    """
    Run the gate without training: epoch 1 calibrates over its batch plan,
    epochs 2..epochs are gated batch by batch.

    Args:
        averages: Instance averages of the training pool
        labels: Class ids of the training pool
        class_count: Number of classes
        batch_size: Batch size of the plans
        epochs: Total epochs including the calibration epoch (>= 2)
        seed: Seed for the batch plans
        upr_p: Upper width fraction
        lor_p: Lower width fraction

    Returns:
        Tuple of (thresholds, gate log for epochs >= 2)
    """
    if epochs < 2:
        raise ParameterError(f"Gate replay needs at least 2 epochs, got {epochs}")
    averages = np.asarray(averages, dtype=np.float64)
    labels = np.asarray(labels)

    table = ClassAverageTable()
    for batch in make_batches(len(labels), batch_size, seed, epoch=1).batches:
        table.add_batch(averages[batch], labels[batch])
    thresholds = finalize_thresholds(table.finalize(class_count), upr_p, lor_p)

    log = GateLog()
    for epoch in range(2, epochs + 1):
        for batch_index, batch in enumerate(make_batches(len(labels), batch_size, seed, epoch=epoch).batches):
            _, record = gate_averages(averages[batch], labels[batch], thresholds, epoch, batch_index)
            log.append(record)
    return thresholds, log


def sweep_widths(
    averages: np.ndarray, labels: np.ndarray, class_count: int, batch_size: int,
    widths: Sequence[float], seed: int, epochs: int = 2
) -> List[Tuple[float, float]]:
    """
    Pooled gated fraction for symmetric widths upr_p = lor_p = width.

    Returns:
        List of (width, fraction) in the order of `widths`
    """
    results = []
    for width in widths:
        _, log = replay_gate_log(averages, labels, class_count, batch_size, epochs, seed, width, min(width, 1.0))
        results.append((float(width), gate_stats(log).fraction))
    return results


def batch_size_trend(batch_sizes: Sequence[int], fractions: Sequence[float]) -> float:
    """
    Spearman rank correlation between batch size and gated fraction;
    0.0 when either sequence is constant.
    """
    if len(set(fractions)) < 2 or len(set(batch_sizes)) < 2:
        return 0.0
    rho, _ = spearmanr(batch_sizes, fractions)
    return float(rho)
