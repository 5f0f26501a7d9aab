"""Edge-side measurement-noise estimation with double adaptive windows.

The edge alternates two operations per upload event: it re-filters every
central track over a sliding *target window* using the current per-CAV
noise estimates, then re-fits each CAV's noise covariance from the
measurement residuals pooled over a sliding *residual window*.  Better
noise estimates sharpen the re-filtered trajectories, which in turn yield
cleaner residuals — the feedback that drives both estimates toward their
ground-truth-powered limits.

Window adaptation:
  * the target window shrinks while the committed covariances are flat
    (steady state reached, shorter re-runs suffice) and grows while they
    still drift;
  * the residual window grows while any CAV is short of samples and
    shrinks once every CAV has at least twice the required count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from math import ceil, floor
from typing import Callable

import numpy as np

from .fusion import (
    MeasurementBundle,
    TrackEstimate,
    batch_reestimate,
    cv_model,
    floor_spd,
    predict,
    reflect_state,
    symmetrize,
)
from .tracking import MultiTargetFilter, TrackStep

EIGENVALUE_FLOOR = 1e-6  # m^2

# Relative spread of trace(P) below which the target window shrinks, and
# the multiplicative step applied to either window per adaptation.
FLATNESS_THRESHOLD = 0.01
ADAPT_RATE = 0.1

TruthLookup = Callable[[int, int], np.ndarray]  # (tick, target) -> true position


@dataclass(frozen=True)
class NoiseEstimate:
    """One CAV's estimated measurement-noise covariance."""

    vehicle: int
    R: np.ndarray  # (2, 2) SPD
    sample_count: int
    updated_at: int


@dataclass(frozen=True)
class WindowConfig:
    """Bounds (in simulation ticks) and the residual-count threshold."""

    target_min: int = 5
    target_max: int = 250
    residual_min: int = 25
    residual_max: int = 2500
    min_samples: int = 200
    target_init: int | None = None
    residual_init: int | None = None

    def validate(self) -> None:
        from .errors import ConfigError

        if not 1 <= self.target_min <= self.target_max:
            raise ConfigError(f"target window bounds invalid: [{self.target_min}, {self.target_max}]")
        if not 1 <= self.residual_min <= self.residual_max:
            raise ConfigError(
                f"residual window bounds invalid: [{self.residual_min}, {self.residual_max}]"
            )
        if self.min_samples < 1:
            raise ConfigError(f"min_samples must be >= 1, got {self.min_samples}")

    def initial_state(self) -> "WindowState":
        self.validate()
        return WindowState(
            target=self.target_init if self.target_init is not None else self.target_min,
            residual=self.residual_init if self.residual_init is not None else self.residual_min,
        )


@dataclass(frozen=True)
class WindowState:
    """Current window lengths in ticks."""

    target: int
    residual: int


def _clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))


def _grow(length: int) -> int:
    # epsilon inside the ceil: 50 * 1.1 is 55.000000000000007 in floats
    return ceil(length * (1.0 + ADAPT_RATE) - 1e-9)


def _shrink(length: int) -> int:
    return floor(length * (1.0 - ADAPT_RATE) + 1e-9)


def adapt_target_window(state: WindowState, cfg: WindowConfig, recent_covs) -> WindowState:
    """Resize the target window from the spread of recent committed covariances."""
    traces = [float(np.trace(P)) for P in recent_covs]
    if not traces:
        raise ValueError("adapt_target_window requires at least one covariance")
    lo, hi = min(traces), max(traces)
    spread = (hi - lo) / lo if lo > 0 else np.inf
    new = _shrink(state.target) if spread < FLATNESS_THRESHOLD else _grow(state.target)
    return replace(state, target=_clamp(new, cfg.target_min, cfg.target_max))


def adapt_residual_window(state: WindowState, cfg: WindowConfig, sample_counts) -> WindowState:
    """Resize the residual window from per-CAV sample counts in the window."""
    counts = list(sample_counts)
    if not counts or min(counts) < cfg.min_samples:
        new = _grow(state.residual)
    elif min(counts) >= 2 * cfg.min_samples:
        new = _shrink(state.residual)
    else:
        return state
    return replace(state, residual=_clamp(new, cfg.residual_min, cfg.residual_max))


def _fit_from_moments(
    sum_outer: np.ndarray,
    sum_cov: np.ndarray,
    k: int,
    prior: NoiseEstimate | None,
    *,
    vehicle: int,
    tick: int,
    min_samples: int,
    default_R: np.ndarray,
    subtract_uncertainty: bool,
) -> NoiseEstimate:
    if k < min_samples:
        if prior is not None:
            return prior
        return NoiseEstimate(vehicle=vehicle, R=default_R.copy(), sample_count=0, updated_at=tick)
    second_moment = sum_outer / k
    if subtract_uncertainty:
        second_moment = second_moment - sum_cov / k
    R = floor_spd(second_moment, EIGENVALUE_FLOOR)
    return NoiseEstimate(vehicle=vehicle, R=R, sample_count=k, updated_at=tick)


def estimate_noise(
    residuals: np.ndarray,
    prior: NoiseEstimate | None,
    *,
    vehicle: int,
    tick: int,
    min_samples: int,
    default_R: np.ndarray,
    cov_terms: np.ndarray | None = None,
    subtract_uncertainty: bool = False,
) -> NoiseEstimate:
    """Sample-covariance fit of one CAV's noise from pooled residuals.

    Keeps the prior while fewer than ``min_samples`` residuals are
    available.  With ``subtract_uncertainty`` the mean state-estimate
    covariance (projected to position) is removed from the raw second
    moment before flooring.
    """
    residuals = np.asarray(residuals, dtype=float).reshape(-1, 2)
    k = residuals.shape[0]
    sum_outer = residuals.T @ residuals if k else np.zeros((2, 2))
    if cov_terms is not None and len(cov_terms):
        sum_cov = np.sum(np.asarray(cov_terms, dtype=float), axis=0)
    else:
        sum_cov = np.zeros((2, 2))
    return _fit_from_moments(
        sum_outer,
        sum_cov,
        k,
        prior,
        vehicle=vehicle,
        tick=tick,
        min_samples=min_samples,
        default_R=default_R,
        subtract_uncertainty=subtract_uncertainty,
    )


class _TickMoments:
    """Running second moments of the residuals recorded at one tick.

    Scalar accumulators: building 2x2 arrays per residual would dominate
    the estimation step.
    """

    __slots__ = ("e00", "e01", "e11", "c00", "c01", "c11", "count")

    def __init__(self):
        self.e00 = self.e01 = self.e11 = 0.0
        self.c00 = self.c01 = self.c11 = 0.0
        self.count = 0

    def add(self, residual: np.ndarray, cov: np.ndarray | None) -> None:
        r0 = residual[0]
        r1 = residual[1]
        self.e00 += r0 * r0
        self.e01 += r0 * r1
        self.e11 += r1 * r1
        if cov is not None:
            self.c00 += cov[0, 0]
            self.c01 += cov[0, 1]
            self.c11 += cov[1, 1]
        self.count += 1


@dataclass
class _ResidualStore:
    """Per-CAV residual moments keyed by tick.

    Only the pooled second moment, the pooled estimate covariance and the
    sample count feed the covariance fit, so per-tick accumulators replace
    raw residual lists.
    """

    by_tick: dict[int, _TickMoments] = field(default_factory=dict)

    def drop_from(self, tick_from: int) -> None:
        for t in [t for t in self.by_tick if t >= tick_from]:
            del self.by_tick[t]

    def prune_before(self, tick_before: int) -> None:
        for t in [t for t in self.by_tick if t <= tick_before]:
            del self.by_tick[t]

    def add(self, tick: int, residual: np.ndarray, cov: np.ndarray | None) -> None:
        moments = self.by_tick.get(tick)
        if moments is None:
            moments = self.by_tick[tick] = _TickMoments()
        moments.add(residual, cov)

    def count(self) -> int:
        return sum(m.count for m in self.by_tick.values())

    def moments(self) -> tuple[np.ndarray, np.ndarray, int]:
        e00 = e01 = e11 = 0.0
        c00 = c01 = c11 = 0.0
        count = 0
        for m in self.by_tick.values():
            e00 += m.e00
            e01 += m.e01
            e11 += m.e11
            c00 += m.c00
            c01 += m.c01
            c11 += m.c11
            count += m.count
        sum_outer = np.array([[e00, e01], [e01, e11]])
        sum_cov = np.array([[c00, c01], [c01, c11]])
        return sum_outer, sum_cov, count


def _leave_one_out_residuals(est: TrackEstimate, bundle: MeasurementBundle):
    """Residual of each bundle entry against the state with that entry removed.

    A residual against the full posterior shrinks as the assumed noise
    shrinks (the posterior chases the measurement), which would spiral the
    covariance fit toward zero whenever one observer dominates a track.
    Removing the entry's own information first (a rank-2 downdate) makes
    the residual's expected outer product ``R_true + H P_loo H'`` — biased
    high by the estimate uncertainty, which both shrinks with data and is
    exactly the term the uncertainty-subtraction mode removes.

    Yields ``(residual, position covariance of the leave-one-out state)``
    per entry; ``(None, None)`` when the downdate is numerically void
    (the entry carried essentially all the information).
    """
    x_pos = est.x[:2]
    A = est.P[:2, :2]
    k = len(bundle.entries)
    zs = np.stack([z for _, z, _ in bundle.entries])
    gaps = np.stack([R for _, _, R in bundle.entries]) - A
    dets = gaps[:, 0, 0] * gaps[:, 1, 1] - gaps[:, 0, 1] * gaps[:, 1, 0]
    floors = np.maximum(
        np.stack([R[0, 0] * R[1, 1] for _, _, R in bundle.entries]), 1e-12
    )
    ok = dets > 1e-12 * floors
    gap_inv = np.empty((k, 2, 2))
    safe = np.where(ok, dets, 1.0)
    gap_inv[:, 0, 0] = gaps[:, 1, 1] / safe
    gap_inv[:, 0, 1] = -gaps[:, 0, 1] / safe
    gap_inv[:, 1, 0] = -gaps[:, 1, 0] / safe
    gap_inv[:, 1, 1] = gaps[:, 0, 0] / safe
    # x_loo = x + P[:, :2] gap_inv (x_pos - z); only the position part matters
    lever = np.einsum("ij,kjl->kil", A, gap_inv)
    x_loo_pos = x_pos + np.einsum("kij,kj->ki", lever, x_pos - zs)
    pos_cov_loo = A + np.einsum("kij,jl->kil", lever, A)
    for i in range(k):
        if ok[i]:
            yield zs[i] - x_loo_pos[i], pos_cov_loo[i]
        else:
            yield None, None


@dataclass(frozen=True)
class NoiseStepRecord:
    """Per-step log consumed by the run harness."""

    tick: int
    table: dict[int, NoiseEstimate]
    limit_table: dict[int, NoiseEstimate]
    windows: WindowState
    sample_counts: dict[int, int]


class EdgeNoiseEstimator:
    """Owns the edge's adaptive central tracker and the noise feedback loop.

    When ``truth_lookup`` is provided, a parallel estimate is maintained
    with residuals taken against ground-truth target positions instead of
    the re-filtered trajectories; that series is the noise-estimation
    limit used by the evaluation harness.
    """

    def __init__(
        self,
        dt: float,
        q: float,
        window_cfg: WindowConfig,
        default_R: np.ndarray,
        *,
        oracle_association: bool = False,
        subtract_uncertainty: bool = False,
        truth_lookup: TruthLookup | None = None,
        area_side: float | None = None,
    ):
        self.dt = dt
        self.q = q
        self.window_cfg = window_cfg
        self.windows = window_cfg.initial_state()
        self.default_R = np.asarray(default_R, dtype=float)
        self.subtract_uncertainty = subtract_uncertainty
        self.truth_lookup = truth_lookup
        self.area_side = area_side
        self.tracker = MultiTargetFilter(
            dt=dt, q=q, oracle_association=oracle_association, area_side=area_side
        )
        self.table: dict[int, NoiseEstimate] = {}
        self.limit_table: dict[int, NoiseEstimate] = {}
        # Per-track measurement cache and committed trajectory, pruned to the
        # deepest window; per-CAV residual stores for both estimate flavors.
        self._cache: dict[int, dict[int, list[tuple[int, np.ndarray, int]]]] = {}
        self._committed: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
        self._residuals: dict[int, _ResidualStore] = {}
        self._residuals_limit: dict[int, _ResidualStore] = {}
        self._trace_history: deque[np.ndarray] = deque(maxlen=4096)
        self._step_ticks: deque[int] = deque(maxlen=4096)

    # -- noise lookups ------------------------------------------------------

    def noise_for(self, observer: int) -> np.ndarray:
        est = self.table.get(observer)
        return est.R if est is not None else self.default_R

    def register(self, vehicle: int, tick: int) -> None:
        """Seed a newly registered CAV with the default covariance."""
        if vehicle not in self.table:
            self.table[vehicle] = NoiseEstimate(vehicle, self.default_R.copy(), 0, tick)
            self._residuals[vehicle] = _ResidualStore()
            if self.truth_lookup is not None:
                self.limit_table[vehicle] = NoiseEstimate(vehicle, self.default_R.copy(), 0, tick)
                self._residuals_limit[vehicle] = _ResidualStore()

    # -- the feedback step --------------------------------------------------

    def _window_steps(self, window_ticks: int) -> int:
        """How many recent steps fall inside a window of that many ticks."""
        if not self._step_ticks:
            return 0
        newest = self._step_ticks[-1]
        return sum(1 for t in self._step_ticks if t > newest - window_ticks)

    def _left_edge_estimate(
        self, track_id: int, window_start: int
    ) -> tuple[TrackEstimate, int] | None:
        """Seed for the window re-run: ``(estimate, first tick to replay)``."""
        committed = self._committed.get(track_id, {})
        track = self.tracker.tracks.get(track_id)
        older = [t for t in committed if t <= window_start]
        if older:
            t0 = max(older)
        elif track is not None and track.born > window_start:
            # Born inside the window: rebuild the birth state with the
            # current noise estimate of the spawning observer.
            P = np.zeros((4, 4))
            P[:2, :2] = symmetrize(self.noise_for(track.spawn_observer))
            P[2, 2] = P[3, 3] = self.tracker.init_speed_std**2
            x = np.array([track.spawn_z[0], track.spawn_z[1], 0.0, 0.0])
            return TrackEstimate(track=track_id, x=x, P=P, last_update=track.born), track.born
        elif committed:
            t0 = min(committed)
        else:
            return None
        x, P = committed[t0]
        est = TrackEstimate(track=track_id, x=x.copy(), P=P.copy(), last_update=t0)
        return est, t0 + 1

    def step(self, tick: int, steps: dict[int, TrackStep]) -> NoiseStepRecord:
        """One upload event: re-filter the target window, then re-fit noise.

        ``steps`` is the output of this estimator's tracker for ``tick``
        (the harness calls ``tracker.step`` with ``self.noise_for`` and
        hands the committed bundles here).
        """
        cfg = self.window_cfg

        # 1. Adapt the target window from the committed covariance spread.
        if self._trace_history:
            k = max(1, self._window_steps(self.windows.target))
            recent = list(self._trace_history)[-k:]
            self.windows = adapt_target_window(self.windows, cfg, recent)
        self._step_ticks.append(tick)

        # 2. Cache this tick's measurements per track.
        for tid, step in steps.items():
            per_tick = self._cache.setdefault(tid, {})
            per_tick[tick] = [
                (obs, z, target)
                for (obs, z, _), target in zip(step.bundle.entries, step.targets)
            ]
        # Keep enough history that a committed left-edge estimate survives
        # even when steps are sparse (low upload rates).
        gaps = np.diff(list(self._step_ticks)[-10:])
        step_gap = int(gaps.max()) if gaps.size else 1
        depth = cfg.target_max + 2 * step_gap
        self._prune_caches(tick - depth)

        window_start = tick - self.windows.target
        for store in self._residuals.values():
            store.drop_from(window_start + 1)
        for store in self._residuals_limit.values():
            store.drop_from(window_start + 1)

        # 3. Re-filter every live track over the target window with the
        #    current noise table, committing states and fresh residuals.
        committed_P: list[np.ndarray] = []
        r_inv_cache: dict = {}
        noise_cache = {obs: self.noise_for(obs) for obs in self.table}
        for tid in sorted(self.tracker.tracks):
            per_tick = self._cache.get(tid, {})
            seed = self._left_edge_estimate(tid, window_start)
            if seed is None:
                continue
            init, replay_from = seed
            window_ticks = sorted(t for t in per_tick if t > window_start and t >= replay_from)
            if not window_ticks:
                continue
            bundles = [
                MeasurementBundle(
                    tick=t,
                    entries=tuple(
                        (obs, z, noise_cache.get(obs, self.default_R))
                        for obs, z, _ in per_tick[t]
                    ),
                )
                for t in window_ticks
            ]
            bundles_by_tick = {b.tick: b for b in bundles}
            trajectory, final_P = batch_reestimate(
                bundles,
                init,
                self.dt,
                self.q,
                reflect_side=self.area_side,
                r_inv_cache=r_inv_cache,
            )
            committed = self._committed.setdefault(tid, {})
            for est in trajectory:
                committed[est.last_update] = (est.x, est.P)
            for t in [t for t in committed if t <= tick - depth]:
                del committed[t]
            final = trajectory[-1]
            if final.last_update < tick:
                gap = tick - final.last_update
                final = replace(predict(final, cv_model(self.dt, self.q, gap)), last_update=tick)
                if self.area_side is not None:
                    x, P = reflect_state(final.x, final.P, self.area_side)
                    final = replace(final, x=x, P=P)
            track = self.tracker.tracks[tid]
            track.est = final
            if track.confirmed:
                committed_P.append(final.P)

            for est, t in zip(trajectory, window_ticks):
                for (obs, z, target), (residual, pos_cov) in zip(
                    per_tick[t], _leave_one_out_residuals(est, bundles_by_tick[t])
                ):
                    if residual is not None and obs in self._residuals:
                        self._residuals[obs].add(t, residual, pos_cov)
                    if self.truth_lookup is not None and obs in self._residuals_limit:
                        true_pos = self.truth_lookup(t, target)
                        self._residuals_limit[obs].add(t, z - true_pos, None)

        if committed_P:
            self._trace_history.append(np.mean(committed_P, axis=0))

        # 4. Adapt the residual window, prune, then re-fit each CAV's noise.
        counts = {veh: store.count() for veh, store in self._residuals.items()}
        self.windows = adapt_residual_window(self.windows, cfg, counts.values())
        for store in self._residuals.values():
            store.prune_before(tick - self.windows.residual)
        for store in self._residuals_limit.values():
            store.prune_before(tick - self.windows.residual)

        counts = {}
        for veh in sorted(self._residuals):
            sum_outer, sum_cov, k = self._residuals[veh].moments()
            counts[veh] = k
            self.table[veh] = _fit_from_moments(
                sum_outer,
                sum_cov,
                k,
                self.table.get(veh),
                vehicle=veh,
                tick=tick,
                min_samples=cfg.min_samples,
                default_R=self.default_R,
                subtract_uncertainty=self.subtract_uncertainty,
            )
            if self.truth_lookup is not None:
                sum_outer_l, sum_cov_l, k_l = self._residuals_limit[veh].moments()
                self.limit_table[veh] = _fit_from_moments(
                    sum_outer_l,
                    sum_cov_l,
                    k_l,
                    self.limit_table.get(veh),
                    vehicle=veh,
                    tick=tick,
                    min_samples=cfg.min_samples,
                    default_R=self.default_R,
                    subtract_uncertainty=False,
                )

        return NoiseStepRecord(
            tick=tick,
            table=dict(self.table),
            limit_table=dict(self.limit_table),
            windows=self.windows,
            sample_counts=counts,
        )

    def _prune_caches(self, tick_before: int) -> None:
        live = set(self.tracker.tracks)
        for tid in [t for t in self._cache if t not in live]:
            del self._cache[tid]
            self._committed.pop(tid, None)
        for per_tick in self._cache.values():
            for t in [t for t in per_tick if t <= tick_before]:
                del per_tick[t]
