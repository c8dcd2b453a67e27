"""
Tests for CSV/JSON report writing and the gate chart.
"""
import json
import os
import sys
from unittest.mock import patch

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from adaptive.adaptive_gate import GateLog, GateRecord
from config import TrainConfig
from errors import ReportError
from training.trainer import CrossvalSummary, EpochMetrics, RunMetrics
from utils.file_utils import (
    GATE_CSV,
    METRICS_CSV,
    RUN_JSON,
    ReportBundle,
    compare_frame,
    emit_reports,
    format_percent_cell,
    gate_frame,
    write_csv,
    write_text,
)
from utils.svg_chart import render_gate_chart


def gate_log(epoch_counts):
    log = GateLog()
    for epoch, (total, gated) in epoch_counts.items():
        for index in range(total):
            log.append(GateRecord(epoch, index, index < gated, forced=index < gated, batch_size=4))
    return log


def adaptive_run(fold=1):
    run = RunMetrics('adaptive', 4, fold, parameter_count=1234)
    run.epochs = [EpochMetrics(1, 0.5, 0.75), EpochMetrics(2, 0.25, 0.875, 0.25)]
    run.gate_log = gate_log({2: (100, 25)})
    return run


def test_gate_csv_row(tmp_path):
    path = write_csv(gate_frame(gate_log({2: (100, 25)})), str(tmp_path / 'gate.csv'))
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines == ['epoch,batches_total,batches_gated,fraction', '2,100,25,0.250000']


def test_format_percent_cell():
    assert format_percent_cell(0.9607, 0.0009) == ("96.070000", "(+/-0.090000)")


def test_compare_frame_layout():
    summary = CrossvalSummary([0.96, 0.9614], 0.9607, 0.0009)
    frame = compare_frame({8: {'bn': summary, 'no_bn': summary, 'adaptive': summary},
                           4: {'bn': summary, 'no_bn': summary, 'adaptive': summary}})
    assert list(frame.columns) == [
        'batch_size', 'BN', 'BN (+/-)', 'Without BN', 'Without BN (+/-)', 'Adaptive BN', 'Adaptive BN (+/-)',
    ]
    assert list(frame['batch_size']) == [4, 8]
    assert frame.loc[0, 'Adaptive BN'] == "96.070000"


def test_emit_reports_for_adaptive_run(tmp_path):
    bundle = emit_reports('train', TrainConfig(scenario='adaptive'), adaptive_run())
    assert set(bundle.frames) == {METRICS_CSV, GATE_CSV}
    assert bundle.results['gate']['fraction'] == 0.25
    assert bundle.results['parameter_count'] == 1234

    written = bundle.write(str(tmp_path))
    assert len(written) == 3
    with open(tmp_path / METRICS_CSV) as f:
        assert f.read().splitlines() == [
            'fold,epoch,mean_loss,val_accuracy', '1,1,0.500000,0.750000', '1,2,0.250000,0.875000',
        ]


def test_emit_reports_without_gate_log():
    run = RunMetrics('bn', 4, 1)
    run.epochs = [EpochMetrics(1, 0.5, 0.75)]
    bundle = emit_reports('train', TrainConfig(scenario='bn'), run)
    assert set(bundle.frames) == {METRICS_CSV}
    assert 'gate' not in bundle.results


def test_crossval_bundle_pools_folds():
    summary = CrossvalSummary([0.875, 0.875], 0.875, 0.0, runs=[adaptive_run(1), adaptive_run(2)])
    bundle = emit_reports('crossval', TrainConfig(scenario='adaptive'), summary)
    assert bundle.results['fold_accuracies'] == [0.875, 0.875]
    assert bundle.results['gate']['batches_total'] == 200
    assert list(bundle.frames[METRICS_CSV]['fold']) == [1, 1, 2, 2]


def test_run_json_document(tmp_path):
    bundle = ReportBundle('gradcheck', TrainConfig(seed=9), {'passed': True})
    bundle.write(str(tmp_path))
    with open(tmp_path / RUN_JSON) as f:
        text = f.read()
    document = json.loads(text)
    assert set(document) == {
        'version', 'subcommand', 'seed', 'config', 'results', 'generated_at', 'wall_clock_seconds',
    }
    assert document['seed'] == 9
    assert document['config']['seed'] == 9
    assert text.endswith('}\n')
    assert list(document) == sorted(document)


def test_write_failures_raise_report_error(tmp_path):
    blocker = tmp_path / 'blocker'
    blocker.write_text('')
    with pytest.raises(ReportError):
        ReportBundle('train', TrainConfig(), {}).write(str(blocker))

    with patch('builtins.open', side_effect=PermissionError("read-only")):
        with pytest.raises(ReportError, match="read-only"):
            write_text(str(tmp_path / 'x.txt'), 'content')


def test_gate_chart_bars_and_labels():
    svg = render_gate_chart([4, 8, 16, 32], [0.1, 0.25, 0.5, 0.75])
    assert svg.startswith('<svg')
    assert svg.count('<rect') == 8
    assert '>25.00<' in svg and '>75.00<' in svg
    assert 'batch 32' in svg


def test_gate_chart_errors():
    with pytest.raises(ReportError):
        render_gate_chart([4, 8], [0.5])
    with pytest.raises(ReportError):
        render_gate_chart([], [])
