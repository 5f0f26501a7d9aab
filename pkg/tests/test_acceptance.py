"""Acceptance suite: one test per criterion, printing a PASS line each.

Criteria 1 and 2 reproduce the improvement-rate table at desk scale
(20 + 20 vehicles, 10 Hz, 15 s, five seeds).  They run with oracle
association — the evaluation mode that matches detections to tracks by
true identity — because they quantify what noise knowledge alone buys;
gated assignment has its own oracle-backed tests (criterion 6 and the
association suite) and drives the remaining criteria.
"""

import time
from dataclasses import replace
from itertools import permutations

import numpy as np
import pytest

from fleetfusion.association import hungarian
from fleetfusion.fusion import MeasurementBundle, cv_model, update_multi, TrackEstimate
from fleetfusion.harness import RunConfig, emit, run_scenario, summarize
from fleetfusion.noise_estimation import WindowConfig, estimate_noise
from fleetfusion.seeding import substream
from fleetfusion.world import WorldConfig

DESK_WORLD = WorldConfig(
    n_cavs=20, n_normal=20, area_side=245.0, v_min=5.0, v_max=15.0,
    d_min=100.0, d_max=300.0, sigma_min=0.01, sigma_max=5.0,
    comm_range=150.0, f_sim=10.0, q=1.0, seed=1,
)
DESK_WINDOWS = WindowConfig(
    target_min=2, target_max=20, residual_min=150, residual_max=600,
    min_samples=150, target_init=10, residual_init=150,
)
DESK = RunConfig(
    world=DESK_WORLD, windows=DESK_WINDOWS, f_upl=10.0, f_sub=10.0,
    duration=15.0, oracle_association=True,
)

ACCEPTANCE_SEEDS = (1, 3, 5, 7, 9)


@pytest.fixture(scope="module")
def desk_runs():
    """The five seeded desk runs shared by criteria 1 and 2."""
    runs = {}
    for seed in ACCEPTANCE_SEEDS:
        cfg = replace(DESK, world=replace(DESK.world, seed=seed))
        start = time.perf_counter()
        series = run_scenario(cfg)
        elapsed = time.perf_counter() - start
        runs[seed] = (series, summarize(series, [1.0, 5.0]), elapsed)
    return runs


def _report(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_improvement_to_ground_truth(desk_runs):
    gt5 = [desk_runs[s][1].distributed[5.0]["to_ground_truth"].mean for s in ACCEPTANCE_SEEDS]
    gt1 = [desk_runs[s][1].distributed[1.0]["to_ground_truth"].mean for s in ACCEPTANCE_SEEDS]
    elapsed = [desk_runs[s][2] for s in ACCEPTANCE_SEEDS]
    mean5 = float(np.mean(gt5))
    mean1 = float(np.mean(gt1))
    detail = (
        f"AvgImpRate to ground truth t0=5s {100 * mean5:.2f}% (need >=75), "
        f"t0=1s {100 * mean1:.2f}% (need >=45), "
        f"runtime max {max(elapsed):.1f}s (target <60)"
    )
    _report(
        "criterion 1 (Table trend, desk scale)",
        mean5 >= 0.75 and mean1 >= 0.45 and max(elapsed) < 60.0,
        detail,
    )


def test_noise_estimation_approaches_its_limit(desk_runs):
    # invariant: over the final quarter, the service's noise MSE stays
    # within 3x of the ground-truth-residual limit series
    for seed in ACCEPTANCE_SEEDS:
        series = desk_runs[seed][0]
        quarter = len(series.noise) // 4
        tail = series.noise[-quarter:]
        est = float(np.mean([r["noise_mse_est"] for r in tail]))
        limit = float(np.mean([r["noise_mse_limit"] for r in tail]))
        assert est <= 3.0 * limit, (seed, est, limit)


def test_criterion_2_limit_convergence(desk_runs):
    lim5 = [desk_runs[s][1].distributed[5.0]["to_limit"].mean for s in ACCEPTANCE_SEEDS]
    mean5 = float(np.mean(lim5))
    _report(
        "criterion 2 (limit convergence)",
        mean5 >= 0.99,
        f"AvgImpRate to limit t0=5s {100 * mean5:.2f}% (need >=99); "
        f"per seed {[f'{100 * v:.2f}' for v in lim5]}",
    )


def _first_crossing(series):
    """First tick where the noise MSE reaches 2x the run's final limit.

    Before any estimates flow, the service's table and the limit's table
    are both the configured prior, so their MSEs tie and the ratio would
    cross trivially; the crossing therefore also requires the estimate to
    have improved on the prior at all.
    """
    final_limit = series.noise[-1]["noise_mse_limit"]
    threshold = 2.0 * final_limit
    prior_mse = series.noise[0]["noise_mse_est"]
    for row in series.noise:
        est = row["noise_mse_est"]
        if est is not None and est <= threshold and est < 0.99 * prior_mse:
            return row["tick"]
    return series.ticks + 1


def test_criterion_3_upload_frequency_ordering():
    base = RunConfig(
        world=WorldConfig(n_cavs=8, n_normal=8, area_side=250.0, f_sim=50.0, seed=6, q=1.0),
        windows=WindowConfig(target_min=5, target_max=100, residual_min=25, residual_max=2500,
                             min_samples=60, target_init=25, residual_init=100),
        f_upl=50.0, f_sub=0.0, subscribe=False, duration=40.0,
    )
    crossings = []
    for f_upl in (50.0, 10.0, 1.0, 0.25):
        series = run_scenario(replace(base, f_upl=f_upl))
        crossings.append(_first_crossing(series))
    ok = all(a <= b for a, b in zip(crossings, crossings[1:]))
    _report(
        "criterion 3 (upload-frequency ordering)",
        ok,
        f"first tick with noise MSE <= 2x final limit, f_upl 50/10/1/0.25 Hz: {crossings} "
        "(non-decreasing required)",
    )


def test_criterion_4_centralized_improvement():
    cfg = RunConfig(
        world=WorldConfig(n_cavs=12, n_normal=12, area_side=300.0, f_sim=10.0, seed=2, q=1.0),
        windows=DESK_WINDOWS,
        f_upl=10.0, f_sub=10.0, duration=60.0,
    )
    series = run_scenario(cfg)
    est = [r["mse_gt_est"] for r in series.central if r["mse_gt_est"] is not None]
    fixed = [r["mse_gt_fixed"] for r in series.central if r["mse_gt_fixed"] is not None]
    limit = [r["mse_gt_limit"] for r in series.central if r["mse_gt_limit"] is not None]
    quarter = len(series.central) // 4
    tail = series.central[-quarter:]
    tail_est = float(np.mean([r["mse_gt_est"] for r in tail if r["mse_gt_est"] is not None]))
    tail_limit = float(np.mean([r["mse_gt_limit"] for r in tail if r["mse_gt_limit"] is not None]))
    ok = float(np.mean(est)) < float(np.mean(fixed)) and tail_est <= 2.0 * tail_limit
    _report(
        "criterion 4 (centralized improvement)",
        ok,
        f"time-averaged central MSE est {np.mean(est):.4f} < fixed {np.mean(fixed):.4f}; "
        f"final-quarter est {tail_est:.4f} <= 2x limit {tail_limit:.4f}",
    )


def test_criterion_5_noise_estimator_consistency():
    R = np.array([[4.0, 1.0], [1.0, 2.0]])
    rng = substream(5, "acceptance-noise")
    residuals = rng.multivariate_normal(np.zeros(2), R, size=10_000)
    raw = estimate_noise(residuals, None, vehicle=0, tick=0, min_samples=100,
                         default_R=np.eye(2) * 6.25)
    raw_ok = bool(np.all(np.abs(raw.R - R) <= 0.05 * np.abs(R) + 1e-6))

    P_pos = np.eye(2) * 0.9  # inflated estimate covariance
    noisy = residuals + rng.multivariate_normal(np.zeros(2), P_pos, size=len(residuals))
    cov_terms = np.broadcast_to(P_pos, (len(noisy), 2, 2))
    corrected = estimate_noise(noisy, None, vehicle=0, tick=0, min_samples=100,
                               default_R=np.eye(2) * 6.25, cov_terms=cov_terms,
                               subtract_uncertainty=True)
    corrected_ok = bool(np.all(np.abs(corrected.R - R) <= 0.10 * np.abs(R) + 1e-6))
    _report(
        "criterion 5 (noise-estimator consistency)",
        raw_ok and corrected_ok,
        f"raw within 5% entrywise: {raw_ok}; subtraction mode within 10%: {corrected_ok}",
    )


def _sequential_kf(x, P, H, measurements):
    x = x.copy()
    P = P.copy()
    for z, R in measurements:
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (z - H @ x)
        ikh = np.eye(len(x)) - K @ H
        P = ikh @ P @ ikh.T + K @ R @ K.T
    return x, P


def _brute_force_assignment(cost):
    n_rows, n_cols = cost.shape
    best = np.inf
    if n_rows <= n_cols:
        for perm in permutations(range(n_cols), n_rows):
            best = min(best, sum(cost[r, c] for r, c in enumerate(perm)))
    else:
        for perm in permutations(range(n_rows), n_cols):
            best = min(best, sum(cost[r, c] for c, r in enumerate(perm)))
    return best


def test_criterion_6_fusion_and_assignment_oracles():
    rng = np.random.default_rng(42)
    model = cv_model(0.1, 0.5)
    worst = 0.0
    for _ in range(1000):
        a = rng.normal(size=(4, 4))
        P = a @ a.T + np.eye(4) * 0.1
        x = rng.normal(scale=10.0, size=4)
        k = int(rng.integers(1, 6))
        measurements = []
        for _ in range(k):
            b = rng.normal(size=(2, 2))
            measurements.append((x[:2] + rng.normal(scale=2.0, size=2), b @ b.T + np.eye(2) * 0.05))
        bundle = MeasurementBundle(
            tick=1, entries=tuple((i, z, R) for i, (z, R) in enumerate(measurements))
        )
        est = TrackEstimate(track=0, x=x, P=P, last_update=0)
        out = update_multi(est, bundle, model)
        ox, oP = _sequential_kf(x, P, model.H, measurements)
        worst = max(
            worst,
            float(np.max(np.abs(out.x - ox) / (np.abs(ox) + 1.0))),
            float(np.max(np.abs(out.P - oP) / (np.abs(oP) + 1.0))),
        )
    fusion_ok = worst < 1e-9

    hungarian_ok = True
    for _ in range(300):
        n_rows = int(rng.integers(1, 8))
        n_cols = int(rng.integers(1, 8))
        cost = rng.uniform(0.0, 100.0, size=(n_rows, n_cols))
        pairs = hungarian(cost)
        total = sum(cost[r, c] for r, c in pairs)
        if not np.isclose(total, _brute_force_assignment(cost), rtol=1e-9, atol=1e-9):
            hungarian_ok = False
            break
    _report(
        "criterion 6 (fusion and assignment oracles)",
        fusion_ok and hungarian_ok,
        f"fused-vs-sequential worst relative deviation {worst:.2e} (need <1e-9); "
        f"assignment equals exhaustive search on fuzzed matrices <=7x7: {hungarian_ok}",
    )


def test_criterion_7_bandwidth_economy(tmp_path):
    cfg = RunConfig(
        world=WorldConfig(n_cavs=20, n_normal=20, area_side=400.0, f_sim=10.0, seed=4, q=1.0),
        windows=WindowConfig(target_min=2, target_max=10, residual_min=10, residual_max=200,
                             min_samples=100, target_init=5, residual_init=40),
        f_upl=10.0, f_sub=10.0, duration=6.0, limit_baselines=False, t0s=(),
    )
    series = run_scenario(cfg)
    emit(series, summarize(series, []), tmp_path / "bw", cfg)
    rows = [r for r in series.bandwidth if r["vehicle"] != -1 and r["second"] >= 1]
    publish = float(np.mean([r["publish_dl_bytes"] for r in rows]))
    direct = float(np.mean([r["direct_share_bytes"] for r in rows]))
    ratio = direct / publish
    ul = float(np.mean([r["ul_kbps"] for r in rows]))
    dl = float(np.mean([r["dl_kbps"] for r in rows]))
    csv_text = (tmp_path / "bw" / "bandwidth.csv").read_text()
    _report(
        "criterion 7 (bandwidth economy)",
        ratio >= 5.0 and "ul_kbps" in csv_text,
        f"direct-share DL is {ratio:.2f}x the noise-publish DL (need >=5x); "
        f"absolute per-CAV UL {ul:.1f} kbps, DL {dl:.1f} kbps reported in bandwidth.csv",
    )


def test_criterion_8_determinism(tmp_path):
    cfg = RunConfig(
        world=WorldConfig(n_cavs=6, n_normal=6, area_side=250.0, f_sim=10.0, seed=31, q=1.0),
        windows=WindowConfig(target_min=2, target_max=10, residual_min=5, residual_max=100,
                             min_samples=30, target_init=5, residual_init=30),
        f_upl=10.0, f_sub=10.0, duration=4.0, t0s=(1.0,),
    )
    outputs = {}
    for label, workers in (("a", 1), ("b", 1), ("c", 4)):
        c = replace(cfg, workers=workers)
        series = run_scenario(c)
        paths = emit(series, summarize(series, [1.0]), tmp_path / label, c)
        outputs[label] = {k: p.read_bytes() for k, p in paths.items() if k != "trace"}
    same_seed = outputs["a"] == outputs["b"]
    across_workers = {
        k: v for k, v in outputs["a"].items() if k != "summary"
    } == {k: v for k, v in outputs["c"].items() if k != "summary"}
    # summary.json embeds the worker count in the config echo; compare the
    # rest of it by parsing
    import json

    sa = json.loads(outputs["a"]["summary"])
    sc = json.loads(outputs["c"]["summary"])
    sa["config"].pop("workers")
    sc["config"].pop("workers")
    _report(
        "criterion 8 (byte-identical determinism)",
        same_seed and across_workers and sa == sc,
        f"rerun identical: {same_seed}; workers 1 vs 4 identical: {across_workers and sa == sc}",
    )
