"""Metrics: hand-computed values, unit handling, histogram mass properties."""

import numpy as np
import pytest

from tfmforge.metrics import (JointHistogram, MetricReport, joint_histogram,
                              magnitude_field, nrmse, pearson,
                              reports_to_csv_rows)


class TestMagnitude:
    def test_hand_value(self):
        f = np.zeros((2, 2, 2))
        f[0, 0, 0] = 3.0
        f[1, 0, 0] = 4.0
        mag = magnitude_field(f)
        assert mag[0, 0] == 5.0
        assert mag[1, 1] == 0.0

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="2xNxN"):
            magnitude_field(np.zeros((3, 4, 4)))


class TestNrmse:
    def test_hand_value(self):
        # pred [3], ref [4]: |3-4| / |4| = 0.25
        assert nrmse(np.array([3.0]), np.array([4.0])) == pytest.approx(0.25)

    def test_vector_value(self):
        pred = np.array([1.0, 2.0])
        ref = np.array([0.0, 2.0])
        assert nrmse(pred, ref) == pytest.approx(0.5)

    def test_scale_invariance(self):
        # dimensionless: scaling both fields by any unit leaves NRMSE unchanged
        rng = np.random.default_rng(0)
        pred, ref = rng.normal(size=50), rng.normal(size=50) + 3.0
        assert nrmse(1000.0 * pred, 1000.0 * ref) == pytest.approx(nrmse(pred, ref))

    def test_zero_prediction_gives_one(self):
        ref = np.abs(np.random.default_rng(1).normal(size=20))
        assert nrmse(np.zeros(20), ref) == pytest.approx(1.0)

    def test_zero_reference_is_an_error(self):
        with pytest.raises(ValueError, match="zero norm"):
            nrmse(np.ones(4), np.zeros(4))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            nrmse(np.zeros(3), np.zeros(4))


class TestPearson:
    def test_perfect_correlation_under_affine_map(self):
        x = np.random.default_rng(2).normal(size=(2, 8, 8))
        assert pearson(3.0 * x + 7.0, x) == pytest.approx(1.0)
        assert pearson(-2.0 * x, x) == pytest.approx(-1.0)

    def test_uses_all_components(self):
        # correlation over the concatenated x,y components, not per channel
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[0], a[1] = 1.0, -1.0
        b[0], b[1] = 2.0, -2.0
        assert pearson(a, b) == pytest.approx(1.0)

    def test_hand_value(self):
        pred = np.array([1.0, 2.0, 3.0])
        ref = np.array([1.0, 2.0, 2.0])
        # centered: pred [-1,0,1], ref [-2/3,1/3,1/3]
        expect = (2 / 3 + 0 + 1 / 3) / (np.sqrt(2.0) * np.sqrt(6.0) / 3.0)
        assert pearson(pred, ref) == pytest.approx(expect)

    def test_constant_input_is_an_error(self):
        with pytest.raises(ValueError, match="variance"):
            pearson(np.ones(5), np.arange(5.0))

    def test_clipped_to_unit_interval(self):
        x = np.random.default_rng(3).normal(size=100)
        assert -1.0 <= pearson(x, 2.0 * x) <= 1.0


class TestJointHistogram:
    def test_mass_normalized_and_thresholded(self):
        rng = np.random.default_rng(4)
        ref = np.abs(rng.normal(200.0, 80.0, size=1000))
        pred = ref + rng.normal(0.0, 20.0, size=1000)
        h = joint_histogram(ref, pred, threshold=150.0, bins=16)
        assert not h.empty
        assert h.mass.shape == (16, 16)
        assert h.mass.sum() == pytest.approx(1.0)
        assert h.edges[0] == 150.0
        # correlated fields concentrate mass near the diagonal
        diag = sum(h.mass[i, max(0, i - 2):i + 3].sum() for i in range(16))
        assert diag > 0.8

    def test_either_field_reaching_threshold_includes_pixel(self):
        ref = np.array([0.0, 200.0])
        pred = np.array([300.0, 0.0])
        h = joint_histogram(ref, pred, threshold=150.0, bins=4)
        assert h.mass.sum() == pytest.approx(1.0)  # both pixels kept

    def test_empty_flag_when_nothing_reaches_threshold(self):
        h = joint_histogram(np.zeros(10), np.zeros(10), threshold=150.0)
        assert h.empty
        assert h.mass.sum() == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            joint_histogram(np.zeros(4), np.zeros(4), threshold=-1.0)
        with pytest.raises(ValueError):
            joint_histogram(np.zeros(4), np.zeros(4), bins=1)


class TestReports:
    def _report(self):
        return MetricReport(sample_ids=["a", "b"], nrmse_values=[0.2, 0.4],
                            pearson_values=[0.9, 0.7], sweep_value=1.0)

    def test_aggregates(self):
        r = self._report()
        assert r.nrmse_mean == pytest.approx(0.3)
        assert r.pearson_mean == pytest.approx(0.8)
        assert r.nrmse_std == pytest.approx(0.1)

    def test_to_dict_layout(self):
        d = self._report().to_dict()
        assert d["sweep_value"] == 1.0
        assert d["samples"][0] == {"sample_id": "a", "nrmse": 0.2, "pearson": 0.9}
        assert "aggregate" in d and "failed_samples" in d

    def test_csv_rows(self):
        rows = reports_to_csv_rows([self._report()])
        assert rows[0] == ["sweep_value", "sample_id", "nrmse", "pearson"]
        assert rows[1][:2] == [1.0, "a"]
        assert rows[1][2] == repr(0.2)
