import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uwaloc import nn, ranging, uncertainty
from uwaloc.uncertainty import apu, find_significant_peaks, local_maxima, mutual_information


def pmf_with_peaks(M, peaks):
    """Flat floor with spikes at the given ``{bin: height}``."""
    p = np.full(M, 1e-4)
    for k, h in peaks.items():
        p[k] = h
    return p / p.sum()


class TestPeaks:
    def test_one_hot(self):
        rep = find_significant_peaks(np.eye(10)[4])
        assert rep.peak_bins == (4,) and rep.pu == 0

    def test_two_comparable_peaks(self):
        rep = find_significant_peaks(pmf_with_peaks(20, {3: 0.5, 12: 0.4}), Q=10)
        assert rep.peak_bins == (3, 12) and rep.pu == 1

    def test_dominant_peak(self):
        rep = find_significant_peaks(pmf_with_peaks(20, {3: 0.9, 12: 0.05}), Q=10)
        assert rep.peak_bins == (3,) and rep.pu == 0

    def test_ratio_exactly_q_is_certain(self):
        p = np.array([0.0, 10.0, 0.0, 1.0, 0.0])
        assert find_significant_peaks(p, Q=10).pu == 0
        assert find_significant_peaks(p, Q=10.01).pu == 1

    def test_plateau_leftmost(self):
        p = np.array([0.1, 0.3, 0.3, 0.3, 0.1])
        np.testing.assert_array_equal(local_maxima(p), [1])

    def test_rising_plateau_is_not_a_peak(self):
        p = np.array([0.1, 0.2, 0.2, 0.5, 0.0])
        np.testing.assert_array_equal(local_maxima(p), [3])

    def test_window(self):
        p = np.array([0.0, 0.5, 0.1, 0.4, 0.0, 0.0, 0.3])
        np.testing.assert_array_equal(local_maxima(p, 1), [1, 3, 6])
        np.testing.assert_array_equal(local_maxima(p, 2), [1, 6])

    def test_edges_and_uniform(self):
        np.testing.assert_array_equal(local_maxima([0.6, 0.3, 0.1]), [0])
        np.testing.assert_array_equal(local_maxima(np.full(5, 0.2)), [0])

    def test_parameter_checks(self):
        with pytest.raises(ValueError):
            find_significant_peaks(np.eye(3)[0], Q=1.0)
        with pytest.raises(ValueError):
            find_significant_peaks(np.eye(3)[0], window_w=0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda v: sum(v) > 0),
           st.floats(1e-3, 1e3))
    def test_scale_invariant_and_well_formed(self, heights, c):
        p = np.array(heights)
        a = find_significant_peaks(p / p.sum())
        b = find_significant_peaks(c * p)
        assert a.peak_bins == b.peak_bins and a.pu == b.pu
        assert a.n_peaks >= 1 and a.pu in (0, 1)
        assert (a.pu == 0) == (a.n_peaks == 1)
        assert list(a.peak_bins) == sorted(a.peak_bins)


class TestApu:
    def test_values(self):
        assert apu([0, 0, 0]) == 0.0
        assert apu([0, 1, 1, 0]) == 50.0

    def test_empty(self):
        with pytest.raises(ValueError):
            apu([])


class TestMumi:
    def test_identical_passes(self):
        assert mutual_information(np.eye(6)[[2, 2, 2, 2]]) == 0.0

    def test_all_distinct(self):
        M = 7
        assert mutual_information(np.eye(M)) == pytest.approx(math.log(M))

    def test_classifier_form_excludes_aleatoric(self):
        p = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
        passes = np.tile(p, (5, 1))
        assert abs(mutual_information(passes)) <= 1e-15
        # brute-force two-term form on a mixed toy
        q = np.array([[0.7, 0.1, 0.1, 0.05, 0.05], [0.05, 0.05, 0.1, 0.1, 0.7]])
        mean = q.mean(axis=0)
        H = lambda v: -np.sum(v * np.log(v))
        assert mutual_information(q) == pytest.approx(H(mean) - (H(q[0]) + H(q[1])) / 2)

    def test_regressor_and_classifier_paths(self, rng):
        x = rng.standard_normal((3, 2, 4, 4))
        reg = nn.init_params(nn.ModelSpec(L=4, M=1, task="regressor", dropout=0.5,
                                          conv_channels=(2, 2, 2), n_features=16), 0)
        grid = ranging.RangeGrid()
        m = uncertainty.mumi(reg, x, J=20, grid=grid, seed=1)
        hist = ranging.mc_dropout_pmf(reg, x, 20, grid, seed=1)
        np.testing.assert_allclose(m, nn.entropy(hist), atol=1e-12)
        assert np.all((m >= 0) & (m <= math.log(82)))
        clf = nn.init_params(nn.ModelSpec(L=4, M=5, dropout=0.5, conv_channels=(2, 2, 2),
                                          n_features=16), 0)
        mc = uncertainty.mumi(clf, x, J=10, grid=ranging.RangeGrid(0, 400, 100), seed=1)
        assert mc.shape == (3,) and np.all(mc >= 0)
        np.testing.assert_array_equal(mc, uncertainty.mumi(clf, x, J=10, grid=ranging.RangeGrid(0, 400, 100),
                                                           seed=1))

    def test_needs_two_passes_and_dropout(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        spec = nn.ModelSpec(L=4, M=1, task="regressor", dropout=0.5)
        with pytest.raises(ValueError):
            uncertainty.mumi(nn.init_params(spec), x, J=1)
        with pytest.raises(ValueError):
            uncertainty.mumi(nn.init_params(nn.ModelSpec(L=4, M=1, task="regressor")), x, J=5)


class TestPartition:
    def test_all_certain(self):
        rep = uncertainty.analyze(np.eye(82)[[1, 5, 9]])
        certain, unc = uncertainty.partition_certain(rep, powers=[1.0, 2.0, 3.0])
        np.testing.assert_array_equal(certain.ids, [0, 1, 2])
        np.testing.assert_array_equal(certain.ranges_m, [1000, 1400, 1800])
        assert unc.size == 0

    def test_mixed(self):
        pmfs = np.stack([np.eye(82)[3], pmf_with_peaks(82, {10: 0.5, 50: 0.5}), np.eye(82)[70]])
        rep = uncertainty.analyze(pmfs, sample_ids=[7, 8, 9])
        np.testing.assert_array_equal(rep.certain_ids, [7, 9])
        np.testing.assert_array_equal(rep.uncertain_ids, [8])
        assert rep.apu_percent == pytest.approx(100 / 3)
        certain, unc = uncertainty.partition_certain(rep, powers=[1.0, 2.0, 3.0])
        np.testing.assert_array_equal(certain.ids, [0, 2])
        np.testing.assert_array_equal(certain.powers, [1.0, 3.0])
        np.testing.assert_array_equal(unc, [1])

    def test_coverage_checked(self):
        rep = uncertainty.analyze(np.eye(82)[[1, 2]])
        with pytest.raises(ValueError):
            uncertainty.partition_certain(rep, powers=[1.0])
