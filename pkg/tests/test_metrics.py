"""Tests for the continual-learning metric suite."""

from __future__ import annotations

import numpy as np
import pytest

from fcil.metrics import (
    IncompleteMatrixError,
    accuracy_a,
    accuracy_pair,
    bwt,
    compute_metrics,
    forgetting,
    fwt,
    incremental_accuracy,
    remembering,
)
from fcil.models import AccuracyMatrix


def _matrix(rows: list[list[float]], sizes: list[int] | None = None) -> AccuracyMatrix:
    return AccuracyMatrix(rows=rows, test_sizes=sizes or [100] * len(rows))


TWO_TASKS = _matrix([[0.9], [0.7, 0.8]])


class TestAccuracy:
    def test_single_task(self):
        m = _matrix([[0.9]])
        assert accuracy_pair(m) == pytest.approx((0.9, 0.9))
        assert incremental_accuracy(m) == pytest.approx((0.9, 0.9))
        assert accuracy_a(m) == pytest.approx((0.9, 0.9))

    def test_two_tasks(self):
        assert accuracy_pair(TWO_TASKS) == pytest.approx((0.825, 0.75))

    def test_incremental(self):
        assert incremental_accuracy(TWO_TASKS) == pytest.approx((0.8625, 0.825))

    def test_all_ones(self):
        m = _matrix([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]])
        assert accuracy_pair(m) == pytest.approx((1.0, 1.0))

    def test_constant_incremental(self):
        m = _matrix([[0.4], [0.4, 0.4]])
        assert incremental_accuracy(m) == pytest.approx((0.4, 0.4))

    def test_task_weighting_differs_from_sample_weighting(self):
        m = _matrix([[0.9], [0.9, 0.5]], sizes=[1000, 10])
        assert accuracy_a(m)[1] == pytest.approx(0.7)
        assert accuracy_pair(m)[1] == pytest.approx(905 / 1010)

    def test_equal_sizes_make_both_means_agree(self):
        m = _matrix([[0.5], [0.3, 0.9], [0.2, 0.6, 0.7]])
        assert accuracy_a(m) == pytest.approx(accuracy_pair(m))


class TestTransfer:
    def test_bwt(self):
        m = _matrix([[0.9], [0.7, 0.8]])
        assert bwt(m) == pytest.approx(-0.2)
        assert remembering(bwt(m)) == pytest.approx(0.8)

    def test_bwt_zero_when_final_row_is_diagonal(self):
        assert bwt(_matrix([[0.6], [0.6, 0.7]])) == pytest.approx(0.0)

    def test_positive_bwt_is_full_remembering(self):
        assert remembering(0.1) == 1.0

    def test_fwt_zero_at_baseline(self):
        assert fwt(TWO_TASKS, [None, 0.3], [0.5, 0.3]) == pytest.approx(0.0)

    def test_fwt_needs_pretrain_for_later_tasks(self):
        with pytest.raises(IncompleteMatrixError, match="task 1"):
            fwt(TWO_TASKS, [None, None], [0.5, 0.5])

    def test_forgetting(self):
        assert forgetting(_matrix([[0.9], [0.6, 0.8]])) == pytest.approx(0.3)

    def test_forgetting_zero_for_monotone_columns(self):
        assert forgetting(_matrix([[0.5], [0.6, 0.4], [0.7, 0.5, 0.9]])) == pytest.approx(0.0)

    def test_single_task_has_no_transfer(self):
        with pytest.raises(IncompleteMatrixError, match="two tasks"):
            bwt(_matrix([[0.9]]))
        report = compute_metrics(_matrix([[0.9]]))
        assert report.BwT is None and report.Forgetting is None and report.FwT is None


class TestIncompleteMatrix:
    def test_missing_row(self):
        with pytest.raises(IncompleteMatrixError):
            accuracy_pair(AccuracyMatrix(rows=[[0.9]], test_sizes=[10, 10]))

    def test_ragged_row(self):
        with pytest.raises(IncompleteMatrixError):
            compute_metrics(AccuracyMatrix(rows=[[0.9], [0.8]], test_sizes=[10, 10]))

    def test_empty(self):
        with pytest.raises(IncompleteMatrixError):
            compute_metrics(AccuracyMatrix())


def _oracle(rows: list[list[float]], sizes: list[int]) -> dict[str, float]:
    T = len(rows)
    overall = []
    for t in range(T):
        num = sum(sizes[j] * rows[t][j] for j in range(t + 1))
        overall.append(num / sum(sizes[: t + 1]))
    running = [sum(overall[: t + 1]) / (t + 1) for t in range(T)]
    per_time = [sum(rows[t]) / (t + 1) for t in range(T)]
    b = sum(rows[T - 1][i] - rows[i][i] for i in range(T - 1)) / (T - 1)
    f = sum(max(rows[l][j] for l in range(j, T)) - rows[T - 1][j] for j in range(T - 1)) / (T - 1)
    return {
        "A_avg": sum(overall) / T,
        "A_last": overall[-1],
        "A_incre_avg": sum(running) / T,
        "A_incre_last": running[-1],
        "Aa_avg": sum(per_time) / T,
        "Aa_last": per_time[-1],
        "BwT": b,
        "Forgetting": f,
        "Remembering": 1.0 - abs(min(b, 0.0)),
    }


def test_suite_matches_direct_formulas():
    rng = np.random.default_rng(0)
    for trial in range(100):
        T = int(rng.integers(2, 8))
        rows = [[float(v) for v in rng.uniform(0, 1, t + 1)] for t in range(T)]
        sizes = [int(s) for s in rng.integers(1, 500, T)]
        pretrain = [None] + [float(v) for v in rng.uniform(0, 1, T - 1)]
        baseline = [float(v) for v in rng.uniform(0, 1, T)]

        report = compute_metrics(AccuracyMatrix(rows=rows, test_sizes=sizes), pretrain, baseline)
        expected = _oracle(rows, sizes)
        for key, value in expected.items():
            assert getattr(report, key) == pytest.approx(value, abs=1e-9), (trial, key)
        assert report.FwT == pytest.approx(np.mean([pretrain[i] - baseline[i] for i in range(1, T)]), abs=1e-9)
        assert 0.0 <= report.Remembering <= 1.0
        assert report.Forgetting >= 0.0
