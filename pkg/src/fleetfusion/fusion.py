"""Kalman filter core shared by the edge and the on-board estimators.

The state is ``(px, py, vx, vy)``.  Multi-sensor updates run in information
form, which is the exact MAP fusion of independent position measurements
against a Gaussian prior and is invariant to measurement order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_EYE4 = np.eye(4)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def spd_inv(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    c = cho_factor(m, lower=True, check_finite=False)
    return symmetrize(cho_solve(c, np.eye(m.shape[0]), check_finite=False))


def inv_2x2(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse for the 2x2 SPD covariances in the hot path."""
    a, b = m[0, 0], m[0, 1]
    c, d = m[1, 0], m[1, 1]
    det = a * d - b * c
    if det <= 0.0:
        raise np.linalg.LinAlgError("2x2 covariance is not positive definite")
    inv = np.empty((2, 2))
    inv[0, 0] = d / det
    inv[0, 1] = -b / det
    inv[1, 0] = -c / det
    inv[1, 1] = a / det
    return inv


def spd_inv_4x4(m: np.ndarray) -> np.ndarray:
    """Closed-form 4x4 SPD inverse via the 2x2 Schur complement.

    Equivalent to :func:`spd_inv` but without factorization-call overhead;
    the filter hot path inverts covariance/information matrices of this one
    shape millions of times per run.
    """
    A = m[:2, :2]
    B = m[:2, 2:]
    C = m[2:, 2:]
    Ai = inv_2x2(A)
    W = Ai @ B
    S = C - B.T @ W
    Si = inv_2x2(symmetrize(S))
    WSi = W @ Si
    out = np.empty((4, 4))
    out[:2, :2] = Ai + WSi @ W.T
    out[:2, 2:] = -WSi
    out[2:, :2] = -WSi.T
    out[2:, 2:] = Si
    return symmetrize(out)


def floor_spd(m: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below, keeping the matrix SPD."""
    sym = symmetrize(np.asarray(m, dtype=float))
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= floor:
        return sym
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)


@dataclass(frozen=True)
class FilterModel:
    """Transition, process noise and observation matrices for one step."""

    F: np.ndarray  # (4, 4)
    Q: np.ndarray  # (4, 4)
    H: np.ndarray  # (2, 4)


def _cv_transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = dt
    F[1, 3] = dt
    return F


_H_POSITION = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


def _single_step_q(dt: float, q: float) -> np.ndarray:
    # Matches the ground-truth motion: independent position / velocity noise.
    qp = (0.5 * q * dt * dt) ** 2
    qv = (q * dt) ** 2
    return np.diag([qp, qp, qv, qv])


@lru_cache(maxsize=4096)
def cv_model(dt: float, q: float, steps: int = 1) -> FilterModel:
    """Constant-velocity model spanning ``steps`` simulation ticks.

    For gaps longer than one tick the process noise is the exact
    accumulation of ``steps`` single-tick noises propagated through the
    transition, so sparse processing (e.g. uploads below the tick rate)
    stays consistent with the per-tick ground truth.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    F = _cv_transition(dt * steps)
    q1 = _single_step_q(dt, q)
    Q = np.zeros((4, 4))
    for j in range(steps):
        Fj = _cv_transition(dt * j)
        Q += Fj @ q1 @ Fj.T
    return FilterModel(F=F, Q=symmetrize(Q), H=_H_POSITION)


@dataclass(frozen=True, eq=False)
class TrackEstimate:
    """Posterior mean and covariance of one track at ``last_update``."""

    track: int
    x: np.ndarray      # (4,)
    P: np.ndarray      # (4, 4) SPD
    last_update: int   # tick


@dataclass(frozen=True)
class MeasurementBundle:
    """All measurements associated to one track at one tick.

    Entries are ``(observer, z, R_used)`` with at most one entry per
    observer.
    """

    tick: int
    entries: tuple[tuple[int, np.ndarray, np.ndarray], ...]


def predict(est: TrackEstimate, model: FilterModel, at_tick: int | None = None) -> TrackEstimate:
    """Time update: ``x <- F x``, ``P <- F P F' + Q`` (re-symmetrized).

    ``at_tick`` stamps the predicted estimate's validity tick, saving the
    caller a dataclass copy in the per-track hot loop.
    """
    x = model.F @ est.x
    P = symmetrize(model.F @ est.P @ model.F.T + model.Q)
    return TrackEstimate(
        track=est.track,
        x=x,
        P=P,
        last_update=est.last_update if at_tick is None else at_tick,
    )


def reflect_state(x: np.ndarray, P: np.ndarray, side: float) -> tuple[np.ndarray, np.ndarray]:
    """Apply the known boundary-reflection map to a predicted state.

    Mirrors each position component back into ``[0, side]`` and negates the
    matching velocity, propagating the sign flips through the covariance.
    Targets move by this map in truth, so estimators apply it too; without
    it a confirmed track coasts out of the arena after every bounce.
    """
    if 0.0 <= x[0] <= side and 0.0 <= x[1] <= side:
        return x, P
    x = x.copy()
    flipped = [False, False]
    for axis in range(2):
        for _ in range(64):
            if x[axis] < 0.0:
                x[axis] = -x[axis]
            elif x[axis] > side:
                x[axis] = 2.0 * side - x[axis]
            else:
                break
            x[axis + 2] = -x[axis + 2]
            flipped[axis] = not flipped[axis]
    if any(flipped):
        P = P.copy()
        for axis in range(2):
            if flipped[axis]:
                for row in (axis, axis + 2):
                    P[row, :] *= -1.0
                    P[:, row] *= -1.0
    return x, P


def _cached_inv_2x2(R: np.ndarray, cache: dict | None) -> np.ndarray:
    if cache is None:
        return inv_2x2(R)
    key = id(R)
    hit = cache.get(key)
    if hit is None or hit[0] is not R:
        hit = cache[key] = (R, inv_2x2(R))
    return hit[1]


def update_multi(
    est: TrackEstimate,
    bundle: MeasurementBundle,
    model: FilterModel,
    r_inv_cache: dict | None = None,
) -> TrackEstimate:
    """Fuse all bundle entries at once in information form.

    The posterior satisfies ``P_post^-1 = P_prior^-1 + sum(H' R_k^-1 H)``
    and ``P_post^-1 x_post = P_prior^-1 x_prior + sum(H' R_k^-1 z_k)``,
    i.e. the MAP fusion of independent measurements against the prior,
    invariant to measurement order.  An empty bundle returns the estimate
    unchanged.  ``r_inv_cache`` lets callers reuse the per-observer noise
    inverses across the many tracks updated in one step.

    For the position observation the posterior is computed through the
    matrix inversion lemma: the bundle collapses to one pseudo-measurement
    with information ``sum(R_k^-1)``, followed by a rank-2 covariance
    downdate, which avoids two full 4x4 inversions per call.
    """
    if not bundle.entries:
        return est
    H = model.H
    if H is not _H_POSITION:
        info = spd_inv(est.P)
        info_vec = info @ est.x
        for _, z, R in bundle.entries:
            R_inv = _cached_inv_2x2(R, r_inv_cache)
            info += H.T @ R_inv @ H
            info_vec += H.T @ R_inv @ z
        P = spd_inv(symmetrize(info))
        x = P @ info_vec
        return TrackEstimate(track=est.track, x=x, P=P, last_update=bundle.tick)

    if len(bundle.entries) == 1:
        _, z, R = bundle.entries[0]
        lam = _cached_inv_2x2(R, r_inv_cache)
        lam_z = lam @ z
    else:
        invs = np.stack([_cached_inv_2x2(R, r_inv_cache) for _, _, R in bundle.entries])
        zs = np.stack([z for _, z, _ in bundle.entries])
        lam = invs.sum(axis=0)
        lam_z = np.einsum("kij,kj->i", invs, zs)
    pseudo_R = inv_2x2(lam)          # covariance of the fused pseudo-measurement
    pseudo_z = pseudo_R @ lam_z
    P = est.P
    S = pseudo_R + P[:2, :2]
    K = P[:, :2] @ inv_2x2(S)        # (4, 2) gain
    x = est.x + K @ (pseudo_z - est.x[:2])
    P = symmetrize(P - K @ P[:2, :])
    return TrackEstimate(track=est.track, x=x, P=P, last_update=bundle.tick)


def batch_reestimate(
    cache: list[MeasurementBundle],
    init: TrackEstimate,
    dt: float,
    q: float,
    reflect_side: float | None = None,
    r_inv_cache: dict | None = None,
) -> tuple[list[TrackEstimate], np.ndarray]:
    """Forward-filter a window of cached bundles from a left-edge estimate.

    ``cache`` must be ordered by tick and may be sparse (gaps are bridged
    with multi-tick predictions).  Returns the re-filtered estimate at
    every cached tick plus the final covariance.
    """
    if not cache:
        raise ValueError("batch_reestimate requires a nonempty window")
    ticks = [b.tick for b in cache]
    if ticks != sorted(ticks) or len(set(ticks)) != len(ticks):
        raise ValueError("cache bundles must be strictly ordered by tick")
    if ticks[0] < init.last_update:
        raise ValueError(
            f"window starts at tick {ticks[0]} before init estimate at {init.last_update}"
        )

    est = init
    model_one = cv_model(dt, q, 1)
    trajectory: list[TrackEstimate] = []
    for bundle in cache:
        gap = bundle.tick - est.last_update
        if gap > 0:
            est = predict(est, cv_model(dt, q, gap), at_tick=bundle.tick)
            if reflect_side is not None:
                x, P = reflect_state(est.x, est.P, reflect_side)
                est = replace(est, x=x, P=P)
        est = update_multi(est, bundle, model_one, r_inv_cache)
        trajectory.append(est)
    return trajectory, trajectory[-1].P
