import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodtile.convnet.gradcheck import numeric_gradient, relative_error
from floodtile.metrics import (
    REPORT_COLUMNS,
    MetricError,
    MetricReport,
    masked_rmse,
    masked_rmse_loss_backward,
    nse,
    pooled_report,
    signed_error_map,
    write_report_csv,
)

finite = st.floats(-100, 100, allow_nan=False)


class TestRmse:
    def test_perfect(self):
        y = np.arange(6.0)
        assert masked_rmse(y, y, np.ones(6, bool)) == 0

    def test_direct_value(self):
        assert masked_rmse([1, 2, 3, 4], [1, 1, 3, 3], np.ones(4, bool)) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_mask_hides_mismatch(self):
        assert masked_rmse([1, 2, 3, 4], [1, 1, 3, 3], [True, False, True, False]) == 0

    def test_zero_valid(self):
        with pytest.raises(MetricError, match="zero valid"):
            masked_rmse([1.0], [2.0], [False])

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            masked_rmse(np.zeros(3), np.zeros(4), True)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
           arrays(np.bool_, 12), st.randoms())
    def test_permutation_and_masked_cells(self, p, t, m, rnd):
        m[0] = True
        base = masked_rmse(p, t, m)
        idx = list(range(12))
        rnd.shuffle(idx)
        assert masked_rmse(p[idx], t[idx], m[idx]) == pytest.approx(base, rel=1e-12, abs=1e-12)
        p2 = np.append(p, 1e6)
        t2 = np.append(t, -1e6)
        assert masked_rmse(p2, t2, np.append(m, False)) == base


class TestNse:
    def test_perfect(self):
        assert nse([1.0, 2.0, 4.0], [1.0, 2.0, 4.0], True) == 1

    def test_mean_prediction(self):
        t = np.array([1.0, 2.0, 6.0])
        assert nse(np.full(3, t.mean()), t, True) == pytest.approx(0.0, abs=1e-15)

    def test_worse_than_mean(self):
        # squared errors 9 + 9 against a spread of 1 + 1
        assert nse([3.0, -1.0], [0.0, 2.0], True) == pytest.approx(-8.0, abs=1e-15)

    def test_constant_target(self):
        with pytest.raises(MetricError, match="NSE undefined"):
            nse([1.0, 2.0], [3.0, 3.0], True)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 20, elements=finite), arrays(np.float64, 20, elements=finite))
    def test_identity_with_rmse(self, p, t):
        dev = t - t.mean()
        if np.dot(dev, dev) < 1e-6:
            return
        r = masked_rmse(p, t, True)
        assert nse(p, t, True) == pytest.approx(1 - r * r * 20 / np.dot(dev, dev), rel=1e-12, abs=1e-12)


class TestLossGradient:
    def test_invalid_cells_zero(self):
        g, flag = masked_rmse_loss_backward(np.array([1.0, 5.0, 2.0]), np.zeros(3), [True, False, True])
        assert g[1] == 0 and not flag

    def test_symmetric_errors(self):
        g, _ = masked_rmse_loss_backward(np.array([1.0, -1.0]), np.zeros(2), True)
        assert g[0] == pytest.approx(1 / 2) and g[1] == pytest.approx(-1 / 2)

    def test_stationary_point(self):
        g, flag = masked_rmse_loss_backward(np.ones(4), np.ones(4), True)
        assert flag and not g.any()

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        p, t = rng.standard_normal((2, 1, 6, 6)), rng.standard_normal((2, 1, 6, 6))
        m = rng.random((2, 1, 6, 6)) < 0.7
        g, _ = masked_rmse_loss_backward(p, t, m)
        num = numeric_gradient(lambda: masked_rmse(p, t, m), p, 1e-6)
        assert relative_error(g, num, floor=1e-8).max() < 1e-6


class TestReports:
    def test_compute_and_row(self):
        rep = MetricReport.compute(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.5, 3.0]), True)
        assert rep.n_valid == 3 and rep.max_abs_error == 0.5
        row = rep.row("r1", "test", "overlap")
        assert list(row) == REPORT_COLUMNS

    def test_pooled_concatenates_cells(self):
        a = (np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]), np.array([[True, True]]))
        b = (np.array([[5.0, 0.0]]), np.array([[4.0, 9.0]]), np.array([[True, False]]))
        rep = pooled_report([a[0], b[0]], [a[1], b[1]], [a[2], b[2]])
        assert rep.n_valid == 3
        assert rep.rmse == pytest.approx(math.sqrt(2 / 3))

    def test_csv(self, tmp_path):
        rep = MetricReport(0.1, 0.9, 10, 0.4)
        write_report_csv(tmp_path / "m.csv", [dict(rep.row("a", "b", "c"), fold=3)], extra_columns=["fold"])
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["fold"] + REPORT_COLUMNS
        assert rows[1][0] == "3"

    def test_constant_target_report_has_nan_nse(self):
        rep = MetricReport.compute(np.array([1.0, 2.0]), np.array([3.0, 3.0]), True)
        assert math.isnan(rep.nse) and rep.rmse > 0
        assert rep.row("a", "b", "c")["nse"] == "nan"


class TestErrorMap:
    def test_sign_and_threshold(self):
        pred = np.array([[1.5, 1.005, 0.0]])
        truth = np.array([[1.0, 1.0, 0.5]])
        err = signed_error_map(pred, truth, np.ones((1, 3), bool))
        assert err[0, 0] == pytest.approx(0.5) and err[0, 1] == 0 and err[0, 2] == pytest.approx(-0.5)

    def test_perfect_is_zero(self):
        y = np.random.default_rng(0).random((4, 4))
        assert not signed_error_map(y, y, np.ones((4, 4), bool)).any()

    def test_invalid_cells_zero(self):
        err = signed_error_map(np.ones((2, 2)), np.zeros((2, 2)), np.array([[True, False], [False, True]]))
        assert err.tolist() == [[1, 0], [0, 1]]

