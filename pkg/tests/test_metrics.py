from __future__ import annotations

import json

import numpy as np
import pytest

from lib.errors import DataError
from lib.metrics import (AccuracyMatrix, accuracy_curve, backward_forgetting, final_average_accuracy,
                         format_percent, metrics_report, per_class_report, save_metrics)


def _matrix(rows):
    return AccuracyMatrix(n_tasks=len(rows), rows=[list(r) for r in rows])


THREE_TASK_CASE = [[0.9], [0.8, 0.7], [0.6, 0.5, 0.4]]


def test_hand_case():
    R = _matrix(THREE_TASK_CASE)
    assert backward_forgetting(R) == pytest.approx(0.25, abs=1e-12)
    assert final_average_accuracy(R) == pytest.approx(0.5, abs=1e-12)


def _brute_bwf(rows):
    n = len(rows)
    if n == 1:
        return 0.0
    total = 0.0
    for j in range(n - 1):
        total += rows[j][j] - rows[n - 1][j]
    return total / (n - 1)


def test_metrics_match_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        rows = [list(rng.uniform(size=i + 1)) for i in range(n)]
        R = _matrix(rows)
        assert abs(backward_forgetting(R) - _brute_bwf(rows)) < 1e-12
        assert abs(final_average_accuracy(R) - sum(rows[-1]) / n) < 1e-12


def test_no_forgetting_and_backward_transfer():
    R = _matrix([[0.5], [0.5, 0.6], [0.5, 0.6, 0.7]])
    assert backward_forgetting(R) == 0.0
    better = _matrix([[0.5], [0.9, 0.6]])
    assert backward_forgetting(better) == pytest.approx(-0.4)


def test_single_task_conventions():
    R = _matrix([[0.73]])
    assert backward_forgetting(R) == 0.0
    assert final_average_accuracy(R) == 0.73
    assert accuracy_curve(R) == [0.73]


def test_curve_and_constant_matrix():
    R = _matrix([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]])
    assert accuracy_curve(R) == [1.0, 1.0, 1.0]
    c = _matrix([[0.3], [0.3, 0.3]])
    assert final_average_accuracy(c) == pytest.approx(0.3)


def test_incomplete_matrix_has_no_final_accuracy():
    R = AccuracyMatrix(n_tasks=3, rows=[[0.9]])
    assert len(accuracy_curve(R)) == 1
    with pytest.raises(DataError, match="incomplete"):
        final_average_accuracy(R)


def test_rows_are_validated():
    R = AccuracyMatrix(n_tasks=2)
    with pytest.raises(DataError):
        R.add_row([0.5, 0.5])
    with pytest.raises(DataError):
        R.add_row([1.5])
    with pytest.raises(IndexError):
        _matrix(THREE_TASK_CASE)[0, 2]


def test_csv_layout_and_roundtrip(tmp_path):
    R = _matrix(THREE_TASK_CASE)
    path = R.to_csv(tmp_path / "R.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "after_task,acc_task_0,acc_task_1,acc_task_2"
    assert lines[1] == "0,0.9,,"
    loaded = AccuracyMatrix.from_csv(path)
    assert loaded.n_tasks == 3
    for got, want in zip(loaded.rows, R.rows):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_per_class_report_sorted_and_weighted():
    preds = [(0, 0), (0, 1), (1, 1), (1, 1), (1, 1), (2, 0), (2, 2), (2, 1), (2, 2)]
    report = per_class_report(preds, classes=[0, 1, 2, 3])
    assert list(report.accuracy) == [0, 2, 1]
    assert report.accuracy[2] == 0.5
    assert report.excluded == [3]
    overall = sum(int(t == p) for t, p in preds) / len(preds)
    assert report.overall() == pytest.approx(overall)


def test_per_class_report_needs_predictions():
    with pytest.raises(DataError):
        per_class_report([])


def test_metrics_report_json(tmp_path):
    R = _matrix(THREE_TASK_CASE)
    report = metrics_report(R, per_class_report([(0, 0), (1, 0)]))
    path = save_metrics(report, tmp_path / "metrics.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert set(doc) == {"acc", "bwf", "curve", "per_class"}
    assert doc["per_class"] == {"1": 0.0, "0": 1.0}
    assert format_percent(doc["bwf"]) == "25.00%"
