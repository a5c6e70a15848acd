import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import SOFT_LABEL_M3, entropy, soft_label
from uwaloc import nn, ranging, signals
from uwaloc.ranging import RangeGrid, RangeOutsideGrid, ReplicaSet

GRID = RangeGrid()


class TestGrid:
    def test_default_instance(self):
        assert GRID.class_count == 82
        assert GRID.midpoints[0] == 900 and GRID.midpoints[-1] == 9000

    def test_invalid(self):
        with pytest.raises(ValueError):
            RangeGrid(bin_m=0)


class TestQuantize:
    @pytest.mark.parametrize("d, q", [(2900, 20), (900, 0), (954.9, 1), (949, 0), (9000, 81)])
    def test_examples(self, d, q):
        assert ranging.quantize_range(d, GRID) == q

    def test_clamps_with_warning(self):
        with pytest.warns(RangeOutsideGrid):
            assert ranging.quantize_range(500.0, GRID) == 0
        with pytest.warns(RangeOutsideGrid):
            assert ranging.quantize_range(12_000.0, GRID) == 81

    def test_bin_edges_do_not_warn(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            ranging.quantize_range([850.0, 9050.0], GRID)

    def test_midpoint_round_trip(self):
        onehots = np.eye(GRID.class_count)
        np.testing.assert_array_equal(
            ranging.quantize_range(ranging.predict_range(onehots, GRID), GRID), np.arange(82))


class TestSoftLabel:
    def test_hand_example(self):
        grid = RangeGrid(0, 200, 100)
        np.testing.assert_allclose(ranging.soften_label(1, 1.0, grid), SOFT_LABEL_M3, atol=1e-12)

    def test_tiny_sigma_is_one_hot(self):
        y = ranging.soften_label(7, 1e-6, GRID)
        np.testing.assert_array_equal(y, np.eye(82)[7])

    def test_symmetric_when_centred(self):
        y = ranging.soften_label(40, 2.0, RangeGrid(0, 8000, 100))
        np.testing.assert_allclose(y, y[::-1], rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 81), st.floats(1.0, 10.0))
    def test_is_pmf_with_argmax_at_label(self, q, sigma):
        y = ranging.soften_label(q, sigma, GRID)
        assert abs(y.sum() - 1) <= 1e-12 and np.argmax(y) == q
        np.testing.assert_allclose(y, soft_label(82, q, sigma), rtol=1e-12)

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValueError):
            ranging.soften_label(1, 0.0, GRID)


class TestPredictRange:
    def test_one_hot(self):
        assert ranging.predict_range(np.eye(82)[20], GRID) == 2900

    def test_uniform_tie_goes_low(self):
        assert ranging.predict_range(np.full(82, 1 / 82), GRID) == 900

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 20.0))
    def test_temperature_invariance(self, seed, temp):
        z = np.random.default_rng(seed).standard_normal(82)
        a = ranging.predict_range(nn.softmax(z), GRID)
        assert ranging.predict_range(nn.softmax(z / temp), GRID) == a


class TestTrainConfig:
    def test_defaults(self):
        cfg = ranging.TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.sigma) == (1e-4, 128, 2.0)
        assert (cfg.patience_reduce, cfg.patience_stop) == (75, 125)
        assert cfg.finetune_snrs_db == (2, 4, 6, 8, 10, 12, 14, 16)

    def test_validation(self):
        with pytest.raises(ValueError):
            ranging.TrainConfig(lr=0)
        with pytest.raises(ValueError):
            ranging.TrainConfig(sigma=0.5)

    def test_from_file(self, tmp_path):
        p = tmp_path / "t.ini"
        p.write_text("[train]\nlr = 0.002\nbatch_size = 16\nfinetune_snrs_db = 5, 10\n")
        cfg = ranging.TrainConfig.from_file(p)
        assert cfg.lr == 0.002 and cfg.batch_size == 16 and cfg.finetune_snrs_db == (5.0, 10.0)

    def test_split(self):
        tr, va = ranging.split_train_val(821, 0.18, 0)
        assert (tr.size, va.size) == (673, 148)
        assert np.intersect1d(tr, va).size == 0


@pytest.fixture(scope="module")
def small_train(swellex_env, swellex_modes, array21):
    ranges = np.linspace(1000, 8500, 10)
    return signals.generate_dataset(swellex_env, 9.0, ranges, array21, 109.0, modes=swellex_modes)


@pytest.mark.slow
class TestTraining:
    def test_overfit_reaches_entropy_floor(self, small_train):
        cfg = ranging.TrainConfig(lr=1e-3, batch_size=10, max_epochs=150, finetune_max_epochs=0,
                                  patience_reduce=1000, patience_stop=1000)
        params = ranging.train_classifier(small_train, 0.0, cfg)
        y = ranging.soften_label(ranging.quantize_range(small_train.ranges(), GRID), 2.0, GRID)
        floor = np.mean([entropy(row) for row in y])
        ce = np.mean(nn.cross_entropy(y, nn.predict_logits(params, small_train.inputs())))
        assert ce <= floor + 0.05
        assert len(params.meta["train_log"]) == 150

    def test_regressor_fits_five_samples(self, small_train):
        five = small_train.subset(range(5))
        cfg = ranging.TrainConfig(lr=1e-3, batch_size=5, max_epochs=150, finetune_max_epochs=0,
                                  patience_reduce=1000, patience_stop=1000)
        params = ranging.train_regressor(five, 0.0, cfg)
        u = ranging.normalize_range(five.ranges(), GRID)
        out = nn.predict_logits(params, five.inputs())[:, 0]
        assert np.mean((out - u) ** 2) <= 1e-3

    def test_same_seed_same_checkpoint(self, small_train):
        cfg = ranging.TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, finetune_max_epochs=1,
                                  finetune_snrs_db=(10,), seed=3)
        a = ranging.train_classifier(small_train, 0.2, cfg)
        b = ranging.train_classifier(small_train, 0.2, cfg)
        for k in a.tensors:
            assert a[k].tobytes() == b[k].tobytes()
        assert a.meta["train_log"] == b.meta["train_log"]

    def test_too_small_for_a_batch(self, small_train):
        with pytest.raises(ValueError):
            ranging.train_classifier(small_train, 0.18, ranging.TrainConfig())

    def test_unlabeled_rejected(self, small_train):
        ds = signals.Dataset([signals.ScmSample(s.features, s.received_power) for s in small_train.samples],
                             small_train.array, 109.0)
        with pytest.raises(ValueError):
            ranging.train_classifier(ds, 0.0, ranging.TrainConfig(batch_size=2))

    def test_regression_output_is_clamped(self, small_train):
        params = nn.init_params(nn.ModelSpec(L=21, M=1, task="regressor"), 0)
        params["head.bias"][...] = 5.0
        d = ranging.predict_regression(params, small_train)
        assert np.all(np.isfinite(d)) and np.all(d == GRID.d_max_m)


class TestMcDropout:
    def test_no_dropout_gives_one_hot(self, small_train):
        params = nn.init_params(nn.ModelSpec(L=21, M=1, task="regressor", dropout=0.0), 0)
        pmf = ranging.mc_dropout_pmf(params, small_train, 8, GRID, seed=1)
        assert np.all(pmf.max(axis=1) == 1.0)

    def test_histogram_arithmetic(self):
        pmf = ranging.bin_histogram([[1200.0, 1600.0]], GRID)[0]
        assert pmf[3] == 0.5 and pmf[7] == 0.5 and pmf.sum() == 1.0

    def test_sums_to_one_and_reproducible(self, small_train):
        params = nn.init_params(nn.ModelSpec(L=21, M=1, task="regressor", dropout=0.5), 0)
        a = ranging.mc_dropout_pmf(params, small_train, 7, GRID, seed=2)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)
        np.testing.assert_array_equal(a, ranging.mc_dropout_pmf(params, small_train, 7, GRID, seed=2))

    def test_j_must_be_positive(self, small_train):
        params = nn.init_params(nn.ModelSpec(L=21, M=1, task="regressor", dropout=0.5), 0)
        with pytest.raises(ValueError):
            ranging.mc_dropout_pmf(params, small_train, 0, GRID)


class TestBartlett:
    def test_matched_noiseless(self, swellex_modes, array21):
        from uwaloc import waveguide
        r = signals.training_ranges()
        reps = ReplicaSet.from_fields(r, waveguide.pressure_fields(swellex_modes, 9.0, r, array21))
        truth = r[[10, 400, 800]]
        test = signals.scm_batch(waveguide.pressure_fields(swellex_modes, 9.0, truth, array21)[:, None])[0]
        C = test[:, 0] + 1j * test[:, 1]
        np.testing.assert_array_equal(ranging.bartlett_mfp(C, reps), truth)
        power = ranging.bartlett_power(C, reps)
        np.testing.assert_allclose(power.max(axis=1), 1.0, rtol=1e-12)
        assert power.min() >= -1e-12 and power.max() <= 1 + 1e-12

    def test_orthogonal_and_identity(self):
        reps = ReplicaSet.from_fields([1000.0, 2000.0, 3000.0], np.eye(3, dtype=complex))
        C = np.zeros((3, 3), dtype=complex)
        C[0, 0] = 1
        np.testing.assert_allclose(ranging.bartlett_power(C, reps), [1, 0, 0])
        np.testing.assert_allclose(ranging.bartlett_power(np.eye(3) / 3, reps), 1 / 3)

    def test_tie_goes_to_smaller_range(self):
        v = np.ones((2, 2), dtype=complex)
        reps = ReplicaSet.from_fields([5000.0, 2000.0], v)
        assert ranging.bartlett_mfp(np.eye(2) / 2, reps) == 2000.0

    def test_empty_replicas(self):
        with pytest.raises(ValueError):
            ReplicaSet.from_fields([], np.zeros((0, 3)))
