import numpy as np
import pytest

from fleetfusion.fusion import (
    MeasurementBundle,
    TrackEstimate,
    batch_reestimate,
    cv_model,
    predict,
    reflect_state,
    spd_inv,
    spd_inv_4x4,
    update_multi,
)


def random_spd(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return a @ a.T * scale + np.eye(dim) * 0.1


def sequential_kf(x, P, H, measurements):
    """Oracle: standard Kalman updates applied one measurement at a time."""
    x = x.copy()
    P = P.copy()
    for z, R in measurements:
        y = z - H @ x
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ y
        ikh = np.eye(len(x)) - K @ H
        P = ikh @ P @ ikh.T + K @ R @ K.T  # Joseph form
    return x, P


def est(x, P, tick=0, track=0):
    return TrackEstimate(track=track, x=np.asarray(x, float), P=np.asarray(P, float),
                         last_update=tick)


class TestPredict:
    def test_constant_velocity_mean(self):
        model = cv_model(dt=1.0, q=0.0)
        out = predict(est([0, 0, 1, 0], np.eye(4)), model)
        assert np.allclose(out.x, [1, 0, 1, 0])

    def test_zero_dt_limit_identity(self):
        model = cv_model(dt=1e-12, q=0.0)
        out = predict(est([1, 2, 3, 4], np.eye(4)), model)
        assert np.allclose(out.P, np.eye(4), atol=1e-9)

    def test_matches_dense_matrix_oracle(self):
        rng = np.random.default_rng(0)
        model = cv_model(dt=0.1, q=0.5)
        for _ in range(30):
            P = random_spd(rng, 4)
            x = rng.normal(size=4)
            out = predict(est(x, P), model)
            expected_P = model.F @ P @ model.F.T + model.Q
            assert np.allclose(out.x, model.F @ x, rtol=1e-12)
            assert np.allclose(out.P, expected_P, rtol=1e-12, atol=1e-12)

    def test_multi_step_model_composes_single_steps(self):
        # predicting k ticks at once equals k single-tick predictions
        rng = np.random.default_rng(1)
        P = random_spd(rng, 4)
        x = rng.normal(size=4)
        one = cv_model(dt=0.1, q=0.5, steps=1)
        state = est(x, P)
        for _ in range(7):
            state = predict(state, one)
        direct = predict(est(x, P), cv_model(dt=0.1, q=0.5, steps=7))
        assert np.allclose(state.x, direct.x, rtol=1e-12)
        assert np.allclose(state.P, direct.P, rtol=1e-10, atol=1e-12)


class TestSpdInv:
    def test_matches_numpy_inverse(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            m = random_spd(rng, 4)
            assert np.allclose(spd_inv(m), np.linalg.inv(m), rtol=1e-9, atol=1e-12)
            assert np.allclose(spd_inv_4x4(m), np.linalg.inv(m), rtol=1e-9, atol=1e-12)


class TestUpdateMulti:
    def test_empty_bundle_is_identity(self):
        state = est([1, 2, 3, 4], np.eye(4))
        out = update_multi(state, MeasurementBundle(tick=0, entries=()), cv_model(0.1, 0.5))
        assert out is state

    def test_two_equal_measurements_diffuse_prior(self):
        # with a diffuse prior, two equal-R measurements average
        model = cv_model(0.1, 0.5)
        state = est([0, 0, 0, 0], np.diag([1e9, 1e9, 1e9, 1e9]))
        bundle = MeasurementBundle(
            tick=0,
            entries=(
                (0, np.array([10.0, 0.0]), np.eye(2)),
                (1, np.array([12.0, 2.0]), np.eye(2)),
            ),
        )
        out = update_multi(state, bundle, model)
        assert np.allclose(out.x[:2], [11.0, 1.0], atol=1e-5)

    def test_matches_sequential_kf_oracle(self):
        rng = np.random.default_rng(3)
        model = cv_model(0.1, 0.5)
        H = model.H
        for _ in range(200):
            P = random_spd(rng, 4)
            x = rng.normal(scale=10.0, size=4)
            k = int(rng.integers(1, 6))
            measurements = [
                (x[:2] + rng.normal(scale=2.0, size=2), random_spd(rng, 2)) for _ in range(k)
            ]
            bundle = MeasurementBundle(
                tick=1, entries=tuple((i, z, R) for i, (z, R) in enumerate(measurements))
            )
            out = update_multi(est(x, P), bundle, model)
            ox, oP = sequential_kf(x, P, H, measurements)
            assert np.allclose(out.x, ox, rtol=1e-9, atol=1e-9)
            assert np.allclose(out.P, oP, rtol=1e-9, atol=1e-9)

    def test_order_independence(self):
        rng = np.random.default_rng(4)
        model = cv_model(0.1, 0.5)
        P = random_spd(rng, 4)
        x = rng.normal(scale=5.0, size=4)
        entries = [
            (i, x[:2] + rng.normal(scale=1.0, size=2), random_spd(rng, 2)) for i in range(5)
        ]
        baseline = update_multi(est(x, P), MeasurementBundle(0, tuple(entries)), model)
        for _ in range(5):
            perm = rng.permutation(5)
            shuffled = tuple(entries[i] for i in perm)
            out = update_multi(est(x, P), MeasurementBundle(0, shuffled), model)
            assert np.allclose(out.x, baseline.x, rtol=1e-9)
            assert np.allclose(out.P, baseline.P, rtol=1e-9)

    def test_k_identical_equals_one_with_cov_over_k(self):
        rng = np.random.default_rng(5)
        model = cv_model(0.1, 0.5)
        P = random_spd(rng, 4)
        x = rng.normal(size=4)
        z = x[:2] + rng.normal(size=2)
        R = random_spd(rng, 2)
        k = 4
        many = update_multi(
            est(x, P), MeasurementBundle(0, tuple((i, z, R) for i in range(k))), model
        )
        one = update_multi(est(x, P), MeasurementBundle(0, ((0, z, R / k),)), model)
        assert np.allclose(many.x, one.x, rtol=1e-9)
        assert np.allclose(many.P, one.P, rtol=1e-9)

    def test_covariance_stays_spd_and_trace_decreases(self):
        rng = np.random.default_rng(6)
        model = cv_model(0.1, 0.5)
        state = est([0, 0, 1, 1], random_spd(rng, 4))
        for k in range(50):
            state = predict(state, model)
            z = state.x[:2] + rng.normal(size=2)
            before = np.trace(state.P)
            state = update_multi(
                state, MeasurementBundle(k, ((0, z, random_spd(rng, 2)),)), model
            )
            assert np.linalg.eigvalsh(state.P)[0] > 0
            assert np.trace(state.P) <= before + 1e-12


class TestReflectState:
    def test_inside_is_untouched(self):
        x = np.array([10.0, 20.0, 1.0, 2.0])
        P = np.eye(4)
        rx, rP = reflect_state(x, P, 100.0)
        assert rx is x and rP is P

    def test_mirror_and_velocity_flip(self):
        x = np.array([-3.0, 50.0, -2.0, 1.0])
        rx, _ = reflect_state(x, np.eye(4), 100.0)
        assert np.allclose(rx, [3.0, 50.0, 2.0, 1.0])

    def test_covariance_transform_is_congruent(self):
        rng = np.random.default_rng(7)
        P = random_spd(rng, 4)
        x = np.array([-1.0, 5.0, -3.0, 2.0])
        _, rP = reflect_state(x, P, 100.0)
        J = np.diag([-1.0, 1.0, -1.0, 1.0])
        assert np.allclose(rP, J @ P @ J.T)
        assert np.allclose(np.diag(rP), np.diag(P))


class TestBatchReestimate:
    def test_unit_window_equals_predict_update(self):
        rng = np.random.default_rng(8)
        P = random_spd(rng, 4)
        x = rng.normal(size=4)
        init = est(x, P, tick=0)
        z = x[:2] + rng.normal(size=2)
        bundle = MeasurementBundle(tick=1, entries=((0, z, np.eye(2)),))
        trajectory, final_P = batch_reestimate([bundle], init, dt=0.1, q=0.5)
        model = cv_model(0.1, 0.5)
        expected = update_multi(predict(init, model, at_tick=1), bundle, model)
        assert len(trajectory) == 1
        assert np.allclose(trajectory[0].x, expected.x, rtol=1e-12)
        assert np.allclose(final_P, expected.P, rtol=1e-12)

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            batch_reestimate([], est([0, 0, 0, 0], np.eye(4)), dt=0.1, q=0.5)

    def test_unordered_window_rejected(self):
        b1 = MeasurementBundle(tick=2, entries=((0, np.zeros(2), np.eye(2)),))
        b2 = MeasurementBundle(tick=1, entries=((0, np.zeros(2), np.eye(2)),))
        with pytest.raises(ValueError):
            batch_reestimate([b1, b2], est([0, 0, 0, 0], np.eye(4)), dt=0.1, q=0.5)

    def test_static_target_error_shrinks_like_sqrt_k(self):
        # weighted-least-squares oracle: with q=0 and a static target, the
        # position error std after n measurements shrinks as 1/sqrt(n)
        rng = np.random.default_rng(9)
        sigma = 2.0
        n_runs = 200
        n_meas = 25
        errs_first, errs_last = [], []
        for _ in range(n_runs):
            truth = rng.uniform(100, 200, size=2)
            init_z = truth + rng.normal(scale=sigma, size=2)
            init = TrackEstimate(
                track=0,
                x=np.array([init_z[0], init_z[1], 0.0, 0.0]),
                P=np.diag([sigma**2, sigma**2, 1e-12, 1e-12]),
                last_update=0,
            )
            bundles = [
                MeasurementBundle(
                    tick=k + 1,
                    entries=((0, truth + rng.normal(scale=sigma, size=2), np.eye(2) * sigma**2),),
                )
                for k in range(n_meas)
            ]
            trajectory, _ = batch_reestimate(bundles, init, dt=0.1, q=0.0)
            errs_first.append(np.linalg.norm(trajectory[0].x[:2] - truth))
            errs_last.append(np.linalg.norm(trajectory[-1].x[:2] - truth))
        # after k measurements the error std is sigma/sqrt(k); compare 2 vs 26
        ratio = np.std(errs_last) / np.std(errs_first)
        expected = np.sqrt(2.0 / (n_meas + 1))
        assert abs(ratio - expected) / expected < 0.20

    def test_rerun_is_deterministic(self):
        rng = np.random.default_rng(10)
        init = est(rng.normal(size=4), random_spd(rng, 4), tick=0)
        bundles = [
            MeasurementBundle(tick=k, entries=((0, rng.normal(size=2), random_spd(rng, 2)),))
            for k in range(1, 6)
        ]
        t1, p1 = batch_reestimate(bundles, init, dt=0.1, q=0.5)
        t2, p2 = batch_reestimate(bundles, init, dt=0.1, q=0.5)
        assert all(np.array_equal(a.x, b.x) for a, b in zip(t1, t2))
        assert np.array_equal(p1, p2)

    def test_sparse_ticks_bridge_gaps(self):
        rng = np.random.default_rng(11)
        init = est([0, 0, 1, 0], np.eye(4), tick=0)
        bundles = [
            MeasurementBundle(tick=t, entries=((0, rng.normal(size=2), np.eye(2)),))
            for t in (5, 10, 20)
        ]
        trajectory, _ = batch_reestimate(bundles, init, dt=0.1, q=0.5)
        assert [t.last_update for t in trajectory] == [5, 10, 20]
