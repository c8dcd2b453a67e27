"""
Essential integration tests - the CLI subcommands end to end on a small
synthetic IDX dataset written under tmp_path.
"""
import json
import os
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from datasets.dataset_reader import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC
from main import main, parse_invocation
from numerics.tensor import counter_rng


def write_idx(directory, prefix, count, seed):
    rng = counter_rng(seed)
    labels = (np.arange(count) % 10).astype(np.uint8)
    pixels = rng.integers(0, 256, size=(count, 28, 28)).astype(np.uint8)
    # Brighter classes give the calibration something to separate.
    pixels = np.minimum(pixels // 2 + labels[:, None, None] * 12, 255).astype(np.uint8)
    images_path = directory / f'{prefix}-images-idx3-ubyte'
    labels_path = directory / f'{prefix}-labels-idx1-ubyte'
    images_path.write_bytes(struct.pack('>IIII', IDX_IMAGE_MAGIC, count, 28, 28) + pixels.tobytes())
    labels_path.write_bytes(struct.pack('>II', IDX_LABEL_MAGIC, count) + labels.tobytes())
    return str(images_path), str(labels_path)


@pytest.fixture
def manifest(tmp_path):
    data_dir = tmp_path / 'data'
    data_dir.mkdir()
    train = write_idx(data_dir, 'train', 300, seed=1)
    test = write_idx(data_dir, 'test', 40, seed=2)
    path = tmp_path / 'datasets.yml'
    path.write_text(
        "mnist:\n"
        f"  train:\n    - {train[0]}\n    - {train[1]}\n"
        f"  test:\n    - {test[0]}\n    - {test[1]}\n"
    )
    return str(path)


def small_run_args(manifest, *extra):
    return [
        '--set', f'datasets_file_path={manifest}',
        '--epochs', '2', '--batch_size', '4', '--folds', '2', '--subset_size', '0', '--eval_cap', '0',
        '--conv_filters', '4,4,4', '--dropout_rate', '0.2', '--seed', '11', *extra,
    ]


class TestEssentialIntegration:
    """Just the essential end-to-end workflows."""

    def test_argument_parsing(self, tmp_path):
        conf = tmp_path / 'run.conf'
        conf.write_text("batch_size = 8\nscenario = bn\n")
        invocation = parse_invocation(['crossval', '--config', str(conf), '--batch_size', '4',
                                       '--set', 'upr_p=0.2', '--out', str(tmp_path / 'out')])
        assert invocation.subcommand == 'crossval'
        assert invocation.config.batch_size == 4
        assert invocation.config.scenario == 'bn'
        assert invocation.config.upr_p == 0.2
        assert invocation.out_dir == str(tmp_path / 'out')

    def test_gradcheck_command(self, tmp_path):
        out = tmp_path / 'gradcheck'
        assert main(['gradcheck', '--out', str(out), '--gradcheck_points', '1']) == 0
        with open(out / 'run.json') as f:
            document = json.load(f)
        assert document['subcommand'] == 'gradcheck'
        assert document['results']['passed'] is True
        assert (out / 'gradcheck.csv').read_text().startswith('layer,quantity,max_relative_error')

    def test_usage_and_config_errors_exit_nonzero(self, tmp_path):
        out = str(tmp_path / 'out')
        assert main(['train', '--out', out, '--set', 'batchsize=8']) == 1
        assert main(['train', '--out', out, '--set', 'batch_size']) == 1
        assert main(['train', '--out', out, '--batch_size', 'eight']) == 1
        assert main(['train', '--out', out, '--set', 'train_paths=missing-a,missing-b']) == 1
        assert not os.path.exists(os.path.join(out, 'run.json'))

    def test_train_command_writes_reports(self, tmp_path, manifest):
        out = tmp_path / 'train'
        assert main(['train', '--out', str(out), '--scenario', 'adaptive', *small_run_args(manifest)]) == 0
        assert {'run.json', 'metrics.csv', 'gate.csv'} <= set(os.listdir(out))
        with open(out / 'run.json') as f:
            results = json.load(f)['results']
        assert results['scenario'] == 'adaptive'
        assert 0.0 <= results['test_accuracy'][0] <= 1.0
        assert 0.0 <= results['gate']['fraction'] <= 1.0

    def test_crossval_is_reproducible(self, tmp_path, manifest):
        outputs = []
        for name in ('first', 'second'):
            out = tmp_path / name
            assert main(['crossval', '--out', str(out), '--scenario', 'adaptive', *small_run_args(manifest)]) == 0
            outputs.append(out)

        for csv_name in ('metrics.csv', 'gate.csv'):
            assert (outputs[0] / csv_name).read_bytes() == (outputs[1] / csv_name).read_bytes()
        documents = [json.loads((out / 'run.json').read_text()) for out in outputs]
        assert documents[0]['results'] == documents[1]['results']
        assert documents[0]['config'] == documents[1]['config']
        assert len(documents[0]['results']['fold_accuracies']) == 2

    def test_compare_command(self, tmp_path, manifest):
        out = tmp_path / 'compare'
        assert main(['compare', '--out', str(out), '--batch_sizes', '4,8', *small_run_args(manifest)]) == 0
        header = (out / 'compare.csv').read_text().splitlines()[0]
        assert header == 'batch_size,BN,BN (+/-),Without BN,Without BN (+/-),Adaptive BN,Adaptive BN (+/-)'
        assert (out / 'gate_bs4.csv').exists() and (out / 'gate_bs8.csv').exists()
        assert (out / 'gate_fractions.svg').read_text().count('<rect') == 4

    def test_gatereport_command(self, tmp_path, manifest):
        out = tmp_path / 'gatereport'
        args = ['gatereport', '--out', str(out), '--batch_sizes', '4,8,16', '--replications', '2',
                *small_run_args(manifest)]
        assert main(args) == 0
        with open(out / 'run.json') as f:
            results = json.load(f)['results']
        assert results['batch_sizes'] == [4, 8, 16]
        assert len(results['spearman']) == 2
        assert 0 <= results['non_decreasing_replications'] <= 2
        assert len((out / 'gate_trend.csv').read_text().splitlines()) == 1 + 2 * 3
        assert (out / 'threshold_sweep.csv').exists()


MNIST_DIR = os.getenv('MNIST_DIR')


@pytest.fixture
def mnist_manifest(tmp_path):
    path = tmp_path / 'datasets.yml'
    path.write_text(
        "mnist:\n"
        f"  train:\n    - {os.path.join(MNIST_DIR, 'train-images-idx3-ubyte')}\n"
        f"    - {os.path.join(MNIST_DIR, 'train-labels-idx1-ubyte')}\n"
        f"  test:\n    - {os.path.join(MNIST_DIR, 't10k-images-idx3-ubyte')}\n"
        f"    - {os.path.join(MNIST_DIR, 't10k-labels-idx1-ubyte')}\n"
    )
    return str(path)


@pytest.mark.skipif(not MNIST_DIR, reason="MNIST_DIR not set")
class TestMnistDeskScale:
    """Directional results on real MNIST at desk scale (6000 training / 1000 validation per fold)."""

    def test_gated_fraction_grows_with_batch_size(self, tmp_path, mnist_manifest):
        out = tmp_path / 'gatereport'
        args = ['gatereport', '--out', str(out), '--set', f'datasets_file_path={mnist_manifest}',
                '--batch_sizes', '4,8,16,32', '--replications', '20', '--subset_size', '9000', '--folds', '3',
                '--epochs', '5', '--upr_p', '0.1', '--lor_p', '0.1']
        assert main(args) == 0
        with open(out / 'run.json') as f:
            results = json.load(f)['results']
        assert results['non_decreasing_replications'] >= 18
        assert all(rho > 0 for rho in results['spearman'])

    def test_adaptive_accuracy_is_competitive(self, tmp_path, mnist_manifest):
        out = tmp_path / 'compare'
        args = ['compare', '--out', str(out), '--set', f'datasets_file_path={mnist_manifest}',
                '--batch_sizes', '4', '--epochs', '5', '--folds', '3', '--subset_size', '9000',
                '--eval_cap', '1000']
        assert main(args) == 0
        with open(out / 'run.json') as f:
            by_scenario = json.load(f)['results']['4']
        means = {scenario: summary['mean'] for scenario, summary in by_scenario.items()}
        assert all(mean >= 0.90 for mean in means.values()), means
        assert means['adaptive'] >= max(means['bn'], means['no_bn']) - 0.015, means
