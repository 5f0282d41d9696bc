from __future__ import annotations

import math

import numpy as np
import pytest

import oracles
from moskit.metrics import (
    MetricsReport,
    compute_grouped_reports,
    compute_report,
    fit_cubic_map,
    pcc,
    render_table,
    rmse,
    rmse_s,
    rmse_s_detailed,
    srcc,
    to_delimited,
)


class TestRmse:
    def test_perfect_prediction(self):
        assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_hand_computed_value(self):
        # residuals (-1, -2): sqrt((1+4)/2) = sqrt(2.5)
        assert rmse([1.0, 2.0], [2.0, 4.0]) == pytest.approx(math.sqrt(2.5), abs=1e-12)

    def test_constant_shift(self, rng):
        base = rng.uniform(1, 5, size=20)
        for delta in (-0.7, 0.3, 2.0):
            assert rmse(base + delta, base) == pytest.approx(abs(delta), abs=1e-12)

    def test_symmetry(self, rng):
        a, b = rng.uniform(1, 5, 15), rng.uniform(1, 5, 15)
        assert rmse(a, b) == rmse(b, a)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            rmse([], [])


class TestPcc:
    def test_affine_increasing(self):
        x = np.array([0.0, 1.0, 2.0, 5.0])
        assert pcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)

    def test_negation(self):
        x = np.array([1.0, 2.0, 3.0])
        assert pcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_computed_value(self):
        # cov=1, var_x=var_y=1.25 -> r = 1/1.25 = 0.8
        assert pcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_undefined_on_constant(self):
        assert pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None

    def test_affine_invariance(self, rng):
        for _ in range(20):
            x = rng.normal(size=12)
            y = rng.normal(size=12)
            a, b = rng.uniform(0.1, 5), rng.uniform(-3, 3)
            assert pcc(a * x + b, y) == pytest.approx(pcc(x, y), abs=1e-10)

    def test_symmetry(self, rng):
        x, y = rng.normal(size=9), rng.normal(size=9)
        assert pcc(x, y) == pytest.approx(pcc(y, x), abs=1e-14)

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 40))
            x = rng.normal(size=n)
            y = rng.normal(size=n)
            assert pcc(x, y) == pytest.approx(oracles.pcc_brute(x, y), abs=1e-11)


class TestSrcc:
    def test_monotone_map_gives_one(self, rng):
        x = rng.normal(size=15)
        assert srcc(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)

    def test_rank_invariance_under_monotone_maps(self, rng):
        x = rng.normal(size=20)
        y = rng.normal(size=20)
        assert srcc(x, y) == pytest.approx(srcc(np.exp(x), y), abs=1e-10)
        assert srcc(x, y) == pytest.approx(srcc(x, y**3 + 5 * y), abs=1e-10)

    def test_tie_case_matches_brute_force(self):
        x = [1.0, 2.0, 2.0, 4.0]  # ranks 1, 2.5, 2.5, 4
        y = [1.0, 2.0, 3.0, 4.0]
        assert oracles.ranks_brute(x) == [1.0, 2.5, 2.5, 4.0]
        assert srcc(x, y) == pytest.approx(oracles.srcc_brute(x, y), abs=1e-12)

    def test_undefined_on_constant(self):
        assert srcc([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) is None

    def test_matches_brute_force_with_ties(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 30))
            x = np.round(rng.uniform(1, 5, size=n), 1)
            y = np.round(rng.uniform(1, 5, size=n), 1)
            got = srcc(x, y)
            want = oracles.srcc_brute(list(x), list(y))
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-11)


class TestRmseS:
    def test_identity_is_representable(self, rng):
        x = rng.uniform(1, 5, size=30)
        assert rmse_s(x, x) < 1e-10

    def test_cubic_distortion_recovered(self, rng):
        pred = rng.uniform(1, 5, size=50)
        label = 0.1 * pred**3 + pred
        assert rmse_s(pred, label) < 1e-8

    def test_never_exceeds_rmse(self, rng):
        for _ in range(40):
            n = int(rng.integers(4, 60))
            pred = rng.uniform(1, 5, size=n)
            label = rng.uniform(1, 5, size=n)
            assert rmse_s(pred, label) <= rmse(pred, label) + 1e-9

    def test_short_input_falls_back_to_rmse(self):
        value, flag = rmse_s_detailed([1.0, 2.0, 3.0], [1.5, 2.0, 2.5])
        assert value == pytest.approx(rmse([1.0, 2.0, 3.0], [1.5, 2.0, 2.5]))
        assert flag and "fewer than 4" in flag

    def test_rank_deficient_falls_back(self):
        pred = np.array([2.0, 2.0, 2.0, 2.0, 2.0])
        label = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        value, flag = rmse_s_detailed(pred, label)
        assert flag and "rank-deficient" in flag
        # constant predictor: best map is the label mean
        assert value == pytest.approx(float(np.std(label)), abs=1e-12)
        assert value <= rmse(pred, label) + 1e-9

    def test_two_distinct_values_fit_affine(self):
        pred = np.array([1.0, 1.0, 3.0, 3.0])
        label = np.array([2.0, 2.0, 4.0, 4.0])
        assert rmse_s(pred, label) < 1e-10

    def test_matches_polyfit_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(4, 80))
            pred = rng.uniform(1, 5, size=n)
            label = rng.uniform(1, 5, size=n)
            assert rmse_s(pred, label) == pytest.approx(
                oracles.rmse_s_brute(pred, label), abs=1e-9
            )

    def test_cubic_fit_coefficients(self, rng):
        pred = rng.uniform(1, 5, size=40)
        label = 0.5 - 0.3 * pred + 0.02 * pred**2 + 0.1 * pred**3
        fit = fit_cubic_map(pred, label)
        assert fit.order == 3
        assert np.allclose(fit.coeffs, [0.5, -0.3, 0.02, 0.1], atol=1e-8)


class TestReports:
    def test_single_sample_flags_undefined(self):
        report = compute_report([3.0], [3.5], grouping="PSTN")
        assert report.rmse == pytest.approx(0.5)
        assert report.pcc is None and report.srcc is None
        assert any("single sample" in f for f in report.flags)

    def test_grouped_reports_pool_first(self, rng):
        pred = rng.uniform(1, 5, size=12)
        label = rng.uniform(1, 5, size=12)
        groups = ["Tencent"] * 5 + ["PSTN"] * 7
        reports = compute_grouped_reports(pred, label, groups)
        assert [r.grouping for r in reports] == ["all", "PSTN", "Tencent"]
        assert reports[0].n == 12

    def test_pooled_mse_is_weighted_mean_of_group_mses(self, rng):
        pred = rng.uniform(1, 5, size=20)
        label = rng.uniform(1, 5, size=20)
        groups = ["a"] * 8 + ["b"] * 12
        reports = {r.grouping: r for r in compute_grouped_reports(pred, label, groups)}
        pooled_mse = reports["all"].rmse ** 2
        weighted = (8 * reports["a"].rmse ** 2 + 12 * reports["b"].rmse ** 2) / 20
        assert pooled_mse == pytest.approx(weighted, abs=1e-12)

    def test_render_and_delimited_undefined(self):
        reports = [
            MetricsReport(grouping="all", n=1, rmse=0.1, pcc=None, srcc=None, rmse_s=0.1)
        ]
        table = render_table(reports)
        assert "undefined" in table
        tsv = to_delimited(reports)
        assert tsv.startswith("grouping\t")
        assert "undefined" in tsv
