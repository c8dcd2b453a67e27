"""
Tests for the model, training runs and the k-fold protocol.
"""
import os
import sys
from unittest.mock import Mock, patch

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from batchnorm.batchnorm_layer import bn_forward_train
from config import TrainConfig
from datasets.dataset_reader import LabeledDataset
from errors import CalibrationError, ConfigError, DataError, NumericError, ShapeError, StateError
from numerics import layers
from numerics.tensor import counter_rng
from training.model import build_model
from training.trainer import (
    binary_accuracy,
    crossval_splits,
    evaluate_accuracy,
    run_crossval,
    run_training,
    summarize_folds,
)
from utils.file_utils import metrics_frame


def toy_config(**overrides):
    values = dict(
        scenario='no_bn', dataset='toy', batch_size=4, epochs=5, learning_rate=0.02, sgd_momentum=0.9,
        seed=3, conv_filters=(8, 8, 8), conv_padding=1, dropout_rate=0.0, folds=2, subset_size=0, eval_cap=0,
        datasets_file_path='unused.yml',
    )
    values.update(overrides)
    return TrainConfig(**values)


def toy_dataset(n=160, side=16):
    """Two classes: bright top half or bright bottom half, with small noise."""
    rng = counter_rng(21)
    labels = np.arange(n) % 2
    images = rng.uniform(0.0, 0.1, size=(n, 1, side, side))
    half = side // 2
    images[labels == 0, :, :half, :] += 0.8
    images[labels == 1, :, half:, :] += 0.8
    return LabeledDataset(images.astype(np.float32), labels, 2, 'toy')


TOY_SPLIT = (np.arange(120), np.arange(120, 160))


def test_build_model_shape_chain_for_mnist():
    model = build_model(TrainConfig(scenario='no_bn'), (1, 28, 28), 10)
    chain = dict(model.shape_chain)
    assert chain['conv1'] == (32, 26, 26)
    assert chain['pool1'] == (32, 13, 13)
    assert chain['pool2'] == (64, 5, 5)
    assert chain['pool3'] == (64, 1, 1)
    assert chain['dense'] == (10,)
    assert model.parameter_count() == 56394

    with_bn = build_model(TrainConfig(scenario='bn'), (1, 28, 28), 10)
    assert with_bn.parameter_count() == 56396
    assert 'bn_norm' in dict(with_bn.shape_chain)


def test_build_model_dense_width_for_cifar100():
    model = build_model(TrainConfig(scenario='adaptive'), (3, 32, 32), 100)
    assert dict(model.shape_chain)['pool3'] == (64, 2, 2)
    assert model.dense.weights.shape == (256, 100)
    assert model.bn.gamma.shape == (3,)


def test_build_model_rejects_tiny_inputs():
    with pytest.raises(ShapeError):
        build_model(TrainConfig(scenario='no_bn'), (1, 4, 4), 10)


def test_initialization_is_seeded_per_layer():
    first = build_model(TrainConfig(scenario='no_bn', seed=5), (1, 28, 28), 10).parameters()
    second = build_model(TrainConfig(scenario='bn', seed=5), (1, 28, 28), 10).parameters()
    for name, array in first.items():
        assert np.array_equal(array, second[name])
    other = build_model(TrainConfig(scenario='no_bn', seed=6), (1, 28, 28), 10).parameters()
    assert not np.array_equal(first['conv1.kernels'], other['conv1.kernels'])


def test_normalizing_without_a_site_raises():
    model = build_model(toy_config(), (1, 16, 16), 2)
    with pytest.raises(StateError):
        model.forward_train(np.zeros((2, 1, 16, 16), dtype=np.float32), True, 0)


def test_binary_accuracy():
    assert binary_accuracy(3, 5, 1, 1) == 0.8
    with pytest.raises(DataError):
        binary_accuracy(0, 0, 0, 0)


def test_evaluate_accuracy_with_mock_model():
    data = LabeledDataset(np.zeros((10, 1, 2, 2), dtype=np.float32), np.arange(10) % 2, 2, 'toy')
    model = Mock()
    predictions = data.labels.copy()
    predictions[:2] = 1 - predictions[:2]
    model.predict.return_value = predictions
    assert evaluate_accuracy(model, data, np.arange(10)) == 0.8

    with pytest.raises(DataError):
        evaluate_accuracy(model, data, [])


def test_summarize_folds():
    summary = summarize_folds([0.9, 0.8, 1.0])
    assert summary.mean == pytest.approx(0.9)
    assert summary.std == pytest.approx(0.0816497, abs=1e-6)
    assert 0.8 <= summary.mean <= 1.0

    constant = summarize_folds([0.7, 0.7, 0.7])
    assert constant.mean == 0.7
    assert constant.std == pytest.approx(0.0, abs=1e-12)

    with pytest.raises(DataError):
        summarize_folds([])


def test_no_bn_learns_a_separable_problem():
    metrics = run_training(toy_config(), toy_dataset(), TOY_SPLIT)
    assert [e.epoch for e in metrics.epochs] == [1, 2, 3, 4, 5]
    assert metrics.epochs[-1].mean_loss < metrics.epochs[0].mean_loss
    assert metrics.final_val_accuracy > 0.9
    assert metrics.gate_log is None
    assert all(e.gate_fraction is None for e in metrics.epochs)


def test_bn_scenario_trains_with_the_site_on():
    metrics = run_training(toy_config(scenario='bn', epochs=2), toy_dataset(), TOY_SPLIT)
    assert len(metrics.epochs) == 2
    assert all(np.isfinite(e.mean_loss) for e in metrics.epochs)
    assert metrics.parameter_count == build_model(toy_config(scenario='bn'), (1, 16, 16), 2).parameter_count()


def test_adaptive_with_unreachable_bounds_matches_no_bn():
    data = toy_dataset()
    no_bn = run_training(toy_config(epochs=3, dropout_rate=0.2), data, TOY_SPLIT)
    adaptive = run_training(
        toy_config(scenario='adaptive', epochs=3, dropout_rate=0.2, lor_p=1.0, upr_p=1e6), data, TOY_SPLIT
    )
    assert metrics_frame([adaptive]).equals(metrics_frame([no_bn]))
    assert not any(record.decision for record in adaptive.gate_log.records)
    assert [e.gate_fraction for e in adaptive.epochs] == [None, 0.0, 0.0]


def test_gate_override_always_normalizes_every_batch():
    with patch('training.model.bn_forward_train', side_effect=bn_forward_train) as normalized:
        metrics = run_training(toy_config(scenario='adaptive', epochs=3, gate_override='always'), toy_dataset(),
                               TOY_SPLIT)
    assert [e.gate_fraction for e in metrics.epochs[1:]] == [1.0, 1.0]
    assert len(metrics.gate_log) == 2 * 30
    assert all(record.decision for record in metrics.gate_log.records)
    assert set(metrics.thresholds.means) == {0, 1}
    # Epoch 1 calibrates without the site; every later batch runs it.
    assert normalized.call_count == 2 * 30
    assert normalized.call_args.args[1].batches_seen == 2 * 30


def test_gate_override_never_keeps_the_site_off():
    with patch('training.model.bn_forward_train', side_effect=bn_forward_train) as normalized:
        metrics = run_training(
            toy_config(scenario='adaptive', epochs=2, gate_override='never', upr_p=0.0, lor_p=0.0),
            toy_dataset(), TOY_SPLIT
        )
    assert metrics.epochs[1].gate_fraction == 0.0
    assert all(record.trigger is None for record in metrics.gate_log.records)
    assert normalized.call_count == 0


def test_adaptive_calibration_needs_every_class():
    only_class_zero = (np.arange(0, 120, 2), np.arange(120, 160))
    with pytest.raises(CalibrationError, match=r"\[1\]"):
        run_training(toy_config(scenario='adaptive', epochs=2), toy_dataset(), only_class_zero)


def test_adaptive_needs_two_epochs():
    with pytest.raises(ConfigError):
        run_training(toy_config(scenario='adaptive', epochs=1), toy_dataset(), TOY_SPLIT)


def test_empty_split_raises():
    with pytest.raises(DataError):
        run_training(toy_config(), toy_dataset(), (np.arange(10), np.array([], dtype=int)))


def test_non_finite_loss_raises():
    real = layers.softmax_cross_entropy

    def poisoned(logits, labels):
        _, probs, grad = real(logits, labels)
        return float('nan'), probs, grad

    with patch('training.trainer.softmax_cross_entropy', side_effect=poisoned):
        with pytest.raises(NumericError, match="diverged"):
            run_training(toy_config(epochs=1), toy_dataset(), TOY_SPLIT)


def test_crossval_splits_partition_the_pool():
    config = toy_config(folds=4, subset_size=100, eval_cap=10)
    splits = crossval_splits(config, 160)
    assert len(splits) == 4
    for train, validation in splits:
        assert len(validation) == 10
        assert not set(train) & set(validation)
        assert len(train) == 75
    pooled = set()
    for train, validation in crossval_splits(toy_config(folds=4, subset_size=100), 160):
        pooled |= set(validation)
    assert len(pooled) == 100


def test_crossval_is_deterministic():
    config = toy_config(epochs=2, subset_size=80)
    data = toy_dataset()
    first = run_crossval(config, data)
    second = run_crossval(config, data)
    assert first.fold_accuracies == second.fold_accuracies
    assert metrics_frame(first.runs).equals(metrics_frame(second.runs))
    assert [run.fold for run in first.runs] == [1, 2]
    assert min(first.fold_accuracies) <= first.mean <= max(first.fold_accuracies)


def test_test_split_is_scored_once():
    data = toy_dataset()
    metrics = run_training(toy_config(epochs=1), data, TOY_SPLIT, test_data=data.subset(np.arange(120, 160)))
    assert 0.0 <= metrics.test_accuracy <= 1.0
