import numpy as np
import pytest

from bcsoftmax import bcsoftmax, softmax
from bcsoftmax._scalar_batch import solve_uniform_rows
from bcsoftmax.calibration import (
    FitDivergedError,
    LabeledLogitSet,
    LogitBounding,
    ProbabilityBounding,
    TemperatureScaling,
    ce_loss,
    ece,
    fit_calibrator,
    gen_synthetic,
    model_from_payload,
    model_to_payload,
    softmax_rows,
)

from conftest import assert_close


class TestUniformBatchSolver:
    def test_matches_scalar_solver_rowwise(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            k = int(rng.integers(2, 13))
            n = int(rng.integers(1, 20))
            logits = rng.normal(0, 3, size=(n, k))
            hi = rng.uniform(1.0 / k, 1.0, size=n)
            lo = np.minimum(rng.uniform(0, 1.0 / k, size=n), hi)
            sol = solve_uniform_rows(logits, lo, hi)
            for i in range(n):
                y, active = bcsoftmax(logits[i], np.full(k, lo[i]), np.full(k, hi[i]))
                assert_close(sol.probs[i], y, tol=1e-12)
                assert sol.free_mass[i] == pytest.approx(active.free_mass, abs=1e-12)

    def test_extreme_rows_use_fallback(self):
        sol = solve_uniform_rows(np.array([[1000.0, 0.0]]), 0.0, 0.5)
        assert_close(sol.probs[0], [0.5, 0.5])

    def test_rejects_infeasible_bounds(self):
        with pytest.raises(ValueError):
            solve_uniform_rows(np.zeros((1, 4)), 0.5, 1.0)  # 4 * 0.5 > 1
        with pytest.raises(ValueError):
            solve_uniform_rows(np.zeros((1, 4)), 0.0, 0.2)  # 4 * 0.2 < 1


class TestCeLoss:
    def test_certain_correct_prediction(self):
        assert ce_loss([1.0, 0.0, 0.0], 0) == 0.0

    def test_uniform(self):
        assert ce_loss(np.full(4, 0.25), 2) == pytest.approx(np.log(4.0))

    def test_reference_value(self):
        p = [0.10757656854799805, 0.6, 0.29242343145200195]
        assert ce_loss(p, 1) == pytest.approx(0.51082562376599072, abs=1e-12)

    def test_floors_vanishing_probability(self):
        assert np.isfinite(ce_loss([1.0, 0.0], 1))

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            ce_loss([0.5, 0.5], 2)


class _StubModel:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, logits, features=None):
        return self.probs


class TestEce:
    def test_two_sample_hand_example(self):
        data = LabeledLogitSet(np.zeros((2, 2)), np.array([0, 1]))
        model = _StubModel([[0.65, 0.35], [0.62, 0.38]])
        report = ece(model, data, 15)
        # both confidences land in bin (0.6, 0.6667]; one prediction correct
        assert report.ece == abs(0.5 - (0.65 + 0.62) / 2)
        assert report.ece == pytest.approx(0.135, abs=1e-15)
        assert report.accuracy == 0.5

    def test_perfect_confident_predictor(self):
        data = LabeledLogitSet(np.zeros((3, 2)), np.zeros(3, dtype=int))
        model = _StubModel([[1.0, 0.0]] * 3)
        assert ece(model, data, 15).ece == 0.0

    def test_uniform_two_class_predictor(self):
        data = LabeledLogitSet(np.zeros((2, 2)), np.array([0, 1]))
        model = _StubModel([[0.5, 0.5]] * 2)
        report = ece(model, data, 15)
        # argmax ties resolve to index 0: one of two correct, confidence 0.5
        assert report.ece == pytest.approx(0.0, abs=1e-15)

    def test_recomputable_from_bins(self):
        data = gen_synthetic(500, 5, scale=2.0, seed=3)
        report = ece(None, data, 15)
        n = data.n_samples
        recomputed = sum(
            s.count / n * abs(s.accuracy - s.confidence) for s in report.per_bin
        )
        assert report.ece == pytest.approx(recomputed, abs=1e-12)
        assert sum(s.count for s in report.per_bin) == n

    def test_none_model_is_plain_softmax(self):
        data = gen_synthetic(50, 4, scale=1.0, seed=4)
        report = ece(None, data, 10)
        probs = softmax_rows(data.logits)
        acc = (probs.argmax(axis=1) == data.labels).mean()
        assert report.accuracy == pytest.approx(acc)

    def test_rejects_bad_bins(self):
        data = gen_synthetic(10, 3, seed=0)
        with pytest.raises(ValueError):
            ece(None, data, 0)


class TestGenSynthetic:
    def test_deterministic_per_seed(self):
        d1 = gen_synthetic(20, 4, scale=2.0, seed=9)
        d2 = gen_synthetic(20, 4, scale=2.0, seed=9)
        assert np.array_equal(d1.logits, d2.logits)
        assert np.array_equal(d1.labels, d2.labels)
        assert np.array_equal(d1.features, d2.features)

    def test_shapes_and_scaling(self):
        data = gen_synthetic(100, 7, scale=3.0, seed=1)
        assert data.logits.shape == (100, 7)
        assert data.features.shape == (100, 7)
        assert np.allclose(data.logits, 3.0 * data.features)

    def test_singleton(self):
        data = gen_synthetic(1, 3, seed=0)
        assert data.n_samples == 1

    def test_overconfident_at_scale_three(self):
        data = gen_synthetic(5000, 10, scale=3.0, seed=42)
        assert ece(None, data, 15).ece > 0.05

    def test_near_calibrated_at_scale_one(self):
        data = gen_synthetic(5000, 10, scale=1.0, seed=7)
        assert ece(None, data, 15).ece < 0.05


class TestTemperatureScaling:
    def test_predict_at_unit_temperature(self):
        model = TemperatureScaling(init_tau=1.0, epochs=0)
        model.fit(np.zeros((2, 3)), np.zeros(2, dtype=int))
        x = np.array([-1.5, 1.0, -0.5])
        assert_close(model.predict_proba(x), softmax(x), tol=1e-12)

    def test_predict_reference_value_tau_two(self):
        model = TemperatureScaling(init_tau=2.0, epochs=0)
        model.fit(np.zeros((2, 3)), np.zeros(2, dtype=int))
        assert_close(
            model.predict_proba([-1.5, 1.0, -0.5]),
            [0.16289127509249063, 0.56854641485105406, 0.26856231005645526],
        )

    def test_huge_temperature_gives_uniform(self):
        model = TemperatureScaling(init_tau=1e8, epochs=0)
        model.fit(np.zeros((2, 3)), np.zeros(2, dtype=int))
        assert_close(model.predict_proba([3.0, -1.0, 0.5]), np.full(3, 1 / 3), tol=1e-6)

    def test_recovers_generating_temperature(self):
        data = gen_synthetic(3000, 10, scale=3.0, seed=11)
        model = TemperatureScaling(epochs=150, seed=0)
        model.fit(data.logits, data.labels)
        assert 2.5 <= model.tau_ <= 3.5

    def test_near_unit_temperature_on_calibrated_data(self):
        data = gen_synthetic(5000, 10, scale=1.0, seed=12)
        model = TemperatureScaling(epochs=150, seed=0)
        model.fit(data.logits, data.labels)
        assert 0.9 <= model.tau_ <= 1.1

    def test_zero_epochs_returns_initial_model(self):
        data = gen_synthetic(100, 5, scale=2.0, seed=2)
        model = TemperatureScaling(epochs=0)
        model.fit(data.logits, data.labels)
        assert model.tau_ == pytest.approx(1.5)
        assert model.final_loss_ == pytest.approx(model.init_loss_)

    def test_fit_is_deterministic(self):
        data = gen_synthetic(300, 5, scale=2.0, seed=2)
        m1 = TemperatureScaling(epochs=30, seed=5).fit(data.logits, data.labels)
        m2 = TemperatureScaling(epochs=30, seed=5).fit(data.logits, data.labels)
        assert m1.tau_ == m2.tau_

    def test_divergence_carries_last_state(self):
        data = gen_synthetic(64, 4, scale=1.0, seed=0)
        model = TemperatureScaling(epochs=5, learning_rate=1e9)
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(FitDivergedError) as info:
                model.fit(data.logits, data.labels)
        assert "tau_raw" in info.value.params
        assert np.all(np.isfinite(info.value.params["tau_raw"]))


class TestProbabilityBounding:
    def test_inactive_bounds_reduce_to_scaled_softmax(self):
        model = ProbabilityBounding(epochs=0, init_tau=1.0)
        model.fit(np.zeros((2, 3)), np.zeros(2, dtype=int))
        model.params_["lower_raw"] = np.array(-40.0)
        model.params_["upper_raw"] = np.array(40.0)
        x = np.array([2.0, -1.0, 0.3])
        assert_close(model.predict_proba(x), softmax(x))

    def test_reference_upper_bound(self):
        # raw upper head chosen so the uniform upper bound is exactly 0.6
        model = ProbabilityBounding(use_lower=False, epochs=0, init_tau=1.0)
        model.fit(np.zeros((2, 3)), np.zeros(2, dtype=int))
        k = 3
        target = (0.6 - 1 / k) / (1 - 1 / k)
        model.params_["upper_raw"] = np.array(np.log(target / (1 - target)))
        y = model.predict_proba([-1.5, 1.0, -0.5])
        assert_close(y, [0.10757656854799805, 0.6, 0.29242343145200195])

    def test_bounds_always_feasible(self):
        rng = np.random.default_rng(13)
        model = ProbabilityBounding(epochs=0)
        model.fit(np.zeros((2, 6)), np.zeros(2, dtype=int))
        k = 6
        for _ in range(100):
            params = {
                "tau_raw": np.array(rng.normal()),
                "lower_raw": np.array(rng.normal(0, 5)),
                "upper_raw": np.array(rng.normal(0, 5)),
            }
            a, b, _, _ = model._bounds(params, None, 4, k)
            assert np.all((0 < a) & (a < 1 / k))
            assert np.all((1 / k < b) & (b < 1))

    def test_argmax_containment_with_upper_bound(self):
        rng = np.random.default_rng(14)
        model = ProbabilityBounding(epochs=0)
        model.fit(np.zeros((2, 5)), np.zeros(2, dtype=int))
        model.params_["lower_raw"] = np.array(-1.0)
        model.params_["upper_raw"] = np.array(-2.0)  # aggressively low cap
        for _ in range(300):
            x = rng.normal(0, 3, size=5)
            raw = softmax(x)
            calibrated = model.predict_proba(x)
            raw_arg = set(np.flatnonzero(raw == raw.max()))
            cal_arg = set(np.flatnonzero(calibrated == calibrated.max()))
            assert raw_arg <= cal_arg

    def test_argmax_equality_without_upper_bound(self):
        rng = np.random.default_rng(15)
        model = ProbabilityBounding(use_upper=False, epochs=0)
        model.fit(np.zeros((2, 5)), np.zeros(2, dtype=int))
        model.params_["lower_raw"] = np.array(2.0)  # aggressive lower bound
        for _ in range(300):
            x = rng.normal(0, 3, size=5)
            raw = softmax(x)
            calibrated = model.predict_proba(x)
            raw_arg = set(np.flatnonzero(raw == raw.max()))
            cal_arg = set(np.flatnonzero(calibrated == calibrated.max()))
            assert raw_arg == cal_arg

    def test_linear_mode_requires_features(self):
        data = gen_synthetic(50, 4, seed=1)
        model = ProbabilityBounding(mode="linear", epochs=1)
        with pytest.raises(ValueError):
            model.fit(data.logits, data.labels)

    def test_loss_does_not_increase(self):
        data = gen_synthetic(600, 6, scale=3.0, seed=21)
        for kind in ["pb-c", "pb-l"]:
            model = fit_calibrator(kind, data, epochs=60)
            assert model.final_loss_ <= model.init_loss_ + 1e-9

    def test_calibrated_data_keeps_bounds_loose_or_matches_ts(self):
        data = gen_synthetic(1500, 6, scale=1.0, seed=22)
        ts = fit_calibrator("ts", data, epochs=60)
        pb = fit_calibrator("pb-c", data, epochs=60)
        probs = softmax_rows(data.logits / pb.tau_)
        k = data.n_classes
        from scipy.special import expit

        lo = float(expit(pb.params_["lower_raw"]) / k)
        hi = float(1 / k + (1 - 1 / k) * expit(pb.params_["upper_raw"]))
        inactive = lo < probs.min() and hi > probs.max()
        assert inactive or pb.final_loss_ <= ts.final_loss_ * 1.01


class TestLogitBounding:
    def test_inactive_clips_reduce_to_scaled_softmax(self):
        model = LogitBounding(mode="linear", epochs=0, init_tau=1.0)
        data = gen_synthetic(10, 3, seed=5)
        model.fit(data.logits, data.labels, data.features)
        model.params_["clip_base_bias"] = np.array(-1e6)
        model.params_["clip_gap_bias"] = np.array(1e7)
        x = data.logits[0]
        assert_close(model.predict_proba(x, data.features[0]), softmax(x))

    def test_clip_thresholds_reproduce_reference(self):
        model = LogitBounding(mode="linear", epochs=0, init_tau=1.0)
        data = LabeledLogitSet(
            np.array([[0.0, 0.0, 4.0]]), np.array([2]), np.zeros((1, 2))
        )
        model.fit(data.logits, data.labels, data.features)
        # base head 0 and gap softplus^-1(ln 2) give clips (0, ln 2)
        model.params_["clip_base_weight"] = np.zeros(2)
        model.params_["clip_base_bias"] = np.array(0.0)
        model.params_["clip_gap_weight"] = np.zeros(2)
        gap = np.log(2.0)
        model.params_["clip_gap_bias"] = np.array(np.log(np.expm1(gap)))
        y = model.predict_proba(np.array([0.0, 0.0, 4.0]), np.zeros(2))
        assert_close(y, [0.25, 0.25, 0.5])

    def test_constant_logits_stay_uniform(self):
        model = LogitBounding(epochs=0)
        model.fit(np.ones((2, 4)), np.zeros(2, dtype=int))
        model.params_["clip_base_raw"] = np.array(0.3)
        model.params_["clip_gap_raw"] = np.array(0.1)
        assert_close(model.predict_proba(np.full(4, 2.5)), np.full(4, 0.25))

    def test_thresholds_ordered(self):
        rng = np.random.default_rng(16)
        data = gen_synthetic(50, 5, seed=6)
        model = LogitBounding(epochs=0)
        model.fit(data.logits, data.labels)
        for _ in range(100):
            params = {
                "tau_raw": np.array(0.0),
                "clip_base_raw": np.array(rng.normal(0, 3)),
                "clip_gap_raw": np.array(rng.normal(0, 3)),
            }
            low, high, *_ = model._thresholds(params, data.logits, None)
            assert np.all(low <= high)

    def test_loss_does_not_increase(self):
        data = gen_synthetic(600, 6, scale=3.0, seed=23)
        for kind in ["lb-c", "lb-l"]:
            model = fit_calibrator(kind, data, epochs=60)
            assert model.final_loss_ <= model.init_loss_ + 1e-9


class TestPersistence:
    @pytest.mark.parametrize("kind", ["ts", "pb-c", "pb-l", "lb-c", "lb-l"])
    def test_payload_round_trip(self, kind, tmp_path):
        data = gen_synthetic(300, 5, scale=2.5, seed=30)
        model = fit_calibrator(kind, data, epochs=20, seed=3)
        payload = model_to_payload(model)
        assert set(payload) == {"kind", "tau_raw", "params", "flags", "meta"}
        assert payload["kind"] == kind
        assert set(payload["flags"]) == {"use_lower", "use_upper"}
        assert {"seed", "epochs", "final_loss"} <= set(payload["meta"])
        clone = model_from_payload(payload)
        x = data.logits[:7]
        f = data.features[:7]
        assert_close(
            clone.predict_proba(x, f if kind.endswith("-l") else None),
            model.predict_proba(x, f if kind.endswith("-l") else None),
            tol=1e-15,
        )

    def test_ablation_flags_round_trip(self):
        data = gen_synthetic(200, 4, scale=2.0, seed=31)
        model = fit_calibrator("pb-c", data, epochs=5, use_upper=False)
        payload = model_to_payload(model)
        assert payload["flags"] == {"use_lower": True, "use_upper": False}
        clone = model_from_payload(payload)
        assert clone.use_upper is False
        assert "upper_raw" not in clone.params_

    def test_sklearn_protocol(self):
        from sklearn.base import clone

        model = ProbabilityBounding(epochs=7, use_upper=False)
        params = model.get_params()
        assert params["epochs"] == 7
        dup = clone(model)
        assert dup.get_params() == params
