"""Multi-target track registry built on gated assignment and fused updates.

One instance is owned by exactly one estimator (a CAV's on-board filter or
one of the edge's central filters).  Each step consumes the object lists
available at that tick, assigns detections per observer, spawns tentative
tracks from unmatched detections, fuses all matched measurements per track
in one information-form update, and ages out stale tracks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .association import assign_positions
from .fusion import (
    MeasurementBundle,
    TrackEstimate,
    cv_model,
    inv_2x2,
    reflect_state,
    symmetrize,
)
from .sensing import ObjectList

NoiseLookup = Callable[[int], np.ndarray]

# Track lifecycle: a track is confirmed after this many consecutive hit
# ticks and deleted after this many consecutive miss ticks.
CONFIRM_HITS = 2
MAX_MISSES = 10

GATE_FLOOR_M = 5.0

# Two tracks whose squared position Mahalanobis distance (against the sum
# of their covariances) falls below this are one target (chi^2, 2 dof, 99%).
MERGE_GATE_CHI2 = 9.21

# A detection this close to an existing track never seeds a new one, no
# matter how overconfident that track's gate is.  Genuinely new targets
# appear at sensing-range boundaries, far from everything already tracked;
# heavy-noise tail detections do not.
NO_SPAWN_RADIUS_M = 20.0

# Suppressed detections that recur at the same spot promote to a track
# anyway: real targets parked inside another track's no-spawn zone (e.g.
# right after a close crossing) produce consistent detections tick after
# tick, while noise tails scatter.
CANDIDATE_HITS = 3
CANDIDATE_CLEAR_M = 6.0

# Two tracks this close for this many consecutive ticks are one target even
# when overconfident covariances defeat the statistical merge; the less
# informed twin (larger position covariance) is retired.
TWIN_RADIUS_M = 6.0
TWIN_TICKS = 6

# An observer cannot tell two targets apart when a second track lies within
# about one standard deviation of its noise around the matched detection;
# fusing such a detection injects the wrong target's position roughly half
# the time, so it is discarded for that observer.
AMBIGUITY_SCALE = 1.0


@dataclass
class Track:
    """Mutable per-track bookkeeping around an immutable estimate."""

    track_id: int
    est: TrackEstimate
    born: int
    spawn_observer: int
    spawn_z: np.ndarray
    hit_streak: int = 1
    misses: int = 0
    confirmed: bool = False
    truth_id: int | None = None  # evaluation only; never read by estimation


@dataclass(frozen=True)
class TrackStep:
    """Measurements committed to one track during one step.

    ``targets`` carries the true identity per bundle entry, for evaluation
    and ground-truth baselines only.
    """

    bundle: MeasurementBundle
    targets: tuple[int, ...]


def _vote_truth(bundle: MeasurementBundle, targets: list[int]) -> int:
    """Evaluation-only identity of a track: the information-weighted vote.

    During close passes a heavy-noise observer occasionally contributes a
    detection of the *other* target to the bundle; the fused state follows
    the precise observers, so the label must too.
    """
    votes: dict[int, float] = {}
    for (_, _, R), target in zip(bundle.entries, targets):
        votes[target] = votes.get(target, 0.0) + 1.0 / (R[0, 0] + R[1, 1] + 1e-12)
    return min(votes, key=lambda t: (-votes[t], t))


@dataclass
class _SpawnCandidate:
    pos: np.ndarray
    first_pos: np.ndarray
    first_tick: int
    hits: int
    last_tick: int
    observer: int
    R: np.ndarray
    target: int


@dataclass
class MultiTargetFilter:
    """Track registry plus per-tick associate/fuse/lifecycle step."""

    dt: float
    q: float
    oracle_association: bool = False
    init_speed_std: float = 10.0
    area_side: float | None = None  # enables the known boundary-reflection map
    _tracks: dict[int, Track] = field(default_factory=dict)
    _next_id: int = 0
    _candidates: list[_SpawnCandidate] = field(default_factory=list)
    _twin_clock: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def tracks(self) -> dict[int, Track]:
        return self._tracks

    def confirmed(self) -> list[Track]:
        return [t for t in self._tracks.values() if t.confirmed]

    def _spawn(
        self,
        tick: int,
        observer: int,
        z: np.ndarray,
        R: np.ndarray,
        target: int,
        velocity: np.ndarray | None = None,
    ) -> Track:
        P = np.zeros((4, 4))
        P[:2, :2] = symmetrize(np.asarray(R, dtype=float))
        P[2, 2] = P[3, 3] = self.init_speed_std**2
        vel = np.zeros(2) if velocity is None else np.asarray(velocity, dtype=float)
        est = TrackEstimate(
            track=self._next_id,
            x=np.array([z[0], z[1], vel[0], vel[1]]),
            P=P,
            last_update=tick,
        )
        track = Track(
            track_id=self._next_id,
            est=est,
            born=tick,
            spawn_observer=observer,
            spawn_z=np.asarray(z, dtype=float).copy(),
            truth_id=target,
        )
        self._tracks[self._next_id] = track
        self._next_id += 1
        return track

    def _update_candidates(self, tick: int, suppressed: list, pos_arr: np.ndarray) -> list[Track]:
        """Promote persistently recurring suppressed detections to tracks."""
        refreshed: set[int] = set()
        cand_pos = (
            np.stack([c.pos for c in self._candidates])
            if self._candidates
            else np.zeros((0, 2))
        )
        for det, R_obs in suppressed:
            radius = max(2.0, 0.5 * np.sqrt(R_obs[0, 0] + R_obs[1, 1]))
            hit = None
            if cand_pos.size:
                dists = np.linalg.norm(cand_pos - det.z, axis=1)
                for idx in np.flatnonzero(dists <= radius):
                    if idx not in refreshed:
                        hit = self._candidates[idx]
                        refreshed.add(int(idx))
                        break
            if hit is None:
                pos = np.asarray(det.z, dtype=float).copy()
                self._candidates.append(
                    _SpawnCandidate(
                        pos=pos,
                        first_pos=pos.copy(),
                        first_tick=tick,
                        hits=1,
                        last_tick=tick,
                        observer=det.observer,
                        R=R_obs,
                        target=det.target,
                    )
                )
                cand_pos = np.concatenate([cand_pos, pos[None]], axis=0)
            else:
                hit.hits += 1
                hit.pos = hit.pos + (det.z - hit.pos) / hit.hits
                hit.last_tick = tick
                hit.observer = det.observer
                hit.R = R_obs
                hit.target = det.target

        # Consecutive recurrence required; stale candidates drop out.
        self._candidates = [c for c in self._candidates if c.last_tick == tick]
        born: list[Track] = []
        keep: list[_SpawnCandidate] = []
        for cand in self._candidates:
            if cand.hits >= CANDIDATE_HITS:
                clear = (
                    pos_arr.size == 0
                    or np.linalg.norm(pos_arr - cand.pos, axis=1).min() > CANDIDATE_CLEAR_M
                ) and all(
                    np.linalg.norm(t.est.x[:2] - cand.pos) > CANDIDATE_CLEAR_M for t in born
                )
                if clear:
                    # Two-point velocity warm start from the recurrence span,
                    # so the newborn does not spend its first second lagging.
                    span = max(1, cand.last_tick - cand.first_tick)
                    velocity = (cand.pos - cand.first_pos) / (span * self.dt)
                    born.append(
                        self._spawn(
                            tick, cand.observer, cand.pos, cand.R, cand.target, velocity
                        )
                    )
                # Converged onto an existing track either way: retire it.
                continue
            keep.append(cand)
        self._candidates = keep
        return born

    def _associate_oracle(self, ordered: list[Track], detections) -> tuple[list, list]:
        by_truth: dict[int, Track] = {}
        for t in ordered:
            if t.truth_id is not None and t.truth_id not in by_truth:
                by_truth[t.truth_id] = t
        matched, unmatched = [], []
        for k, det in enumerate(detections):
            if det.target in by_truth:
                matched.append((by_truth[det.target].track_id, k))
            else:
                unmatched.append(k)
        return matched, unmatched

    def _batch_predict(self, tick: int) -> None:
        """Advance every track to ``tick`` with one vectorized time update."""
        by_gap: dict[int, list[Track]] = {}
        for track in self._tracks.values():
            gap = tick - track.est.last_update
            if gap > 0:
                by_gap.setdefault(gap, []).append(track)
        for gap, group in by_gap.items():
            model = cv_model(self.dt, self.q, gap)
            X = np.stack([t.est.x for t in group])
            P = np.stack([t.est.P for t in group])
            X = X @ model.F.T
            FP = np.einsum("ij,njk->nik", model.F, P)
            P = np.einsum("nik,jk->nij", FP, model.F) + model.Q
            P = 0.5 * (P + np.transpose(P, (0, 2, 1)))
            if self.area_side is not None:
                inside = (
                    (X[:, 0] >= 0.0) & (X[:, 0] <= self.area_side)
                    & (X[:, 1] >= 0.0) & (X[:, 1] <= self.area_side)
                )
            for i, track in enumerate(group):
                x_i = X[i]
                P_i = P[i]
                if self.area_side is not None and not inside[i]:
                    x_i, P_i = reflect_state(x_i, P_i, self.area_side)
                track.est = TrackEstimate(
                    track=track.track_id, x=x_i, P=P_i, last_update=tick
                )

    def _batch_update(
        self,
        tick: int,
        pending_info: dict[int, list[np.ndarray]],
    ) -> None:
        """Fuse each pending bundle, vectorized across tracks.

        Per track this is exactly :func:`fleetfusion.fusion.update_multi`
        (the bundle collapses to one pseudo-measurement built from the
        accumulated information sums, then a rank-2 covariance downdate);
        the batching only changes the evaluation order of independent
        tracks.
        """
        tids = sorted(pending_info)
        n = len(tids)
        if n == 0:
            return
        pseudo_R = np.empty((n, 2, 2))
        pseudo_z = np.empty((n, 2))
        X = np.empty((n, 4))
        P = np.empty((n, 4, 4))
        for i, tid in enumerate(tids):
            lam, lam_z = pending_info[tid]
            pseudo_R[i] = inv_2x2(lam)
            pseudo_z[i] = pseudo_R[i] @ lam_z
            est = self._tracks[tid].est
            X[i] = est.x
            P[i] = est.P
        S = pseudo_R + P[:, :2, :2]
        det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
        if np.any(det <= 0):
            raise np.linalg.LinAlgError("innovation covariance not positive definite")
        S_inv = np.empty_like(S)
        S_inv[:, 0, 0] = S[:, 1, 1] / det
        S_inv[:, 0, 1] = -S[:, 0, 1] / det
        S_inv[:, 1, 0] = -S[:, 1, 0] / det
        S_inv[:, 1, 1] = S[:, 0, 0] / det
        K = np.einsum("nij,njk->nik", P[:, :, :2], S_inv)
        X = X + np.einsum("nij,nj->ni", K, pseudo_z - X[:, :2])
        P = P - np.einsum("nij,njk->nik", K, P[:, :2, :])
        P = 0.5 * (P + np.transpose(P, (0, 2, 1)))
        for i, tid in enumerate(tids):
            self._tracks[tid].est = TrackEstimate(
                track=tid, x=X[i], P=P[i], last_update=tick
            )

    def step(
        self,
        tick: int,
        object_lists: list[ObjectList],
        noise_for: NoiseLookup,
    ) -> dict[int, TrackStep]:
        """Advance the registry to ``tick`` with the given object lists.

        Returns the bundle actually fused per updated track, which callers
        may cache for later re-estimation.
        """
        self._batch_predict(tick)

        pending: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}
        pending_targets: dict[int, list[int]] = {}
        pending_info: dict[int, list[np.ndarray]] = {}
        spawned: set[int] = set()
        suppressed: list = []

        # Track order, positions and position-covariance traces are shared
        # across the per-observer passes; only spawns extend them.
        ordered = [self._tracks[tid] for tid in sorted(self._tracks)]
        positions = [t.est.x[:2] for t in ordered]
        spreads = [t.est.P[0, 0] + t.est.P[1, 1] for t in ordered]
        pos_arr = np.array(positions).reshape(-1, 2)
        spread_arr = np.array(spreads)

        for obj in sorted(object_lists, key=lambda o: o.observer):
            detections = obj.detections
            if not detections:
                continue
            R_obs = noise_for(obj.observer)
            if self.oracle_association:
                matched_ids, unmatched = self._associate_oracle(ordered, detections)
                cost = None
            else:
                gates = np.maximum(
                    GATE_FLOOR_M, 3.0 * np.sqrt(spread_arr + R_obs[0, 0] + R_obs[1, 1])
                )
                det_pos = np.stack([d.z for d in detections])
                matched_rows, _, unmatched, cost = assign_positions(pos_arr, det_pos, gates)
                ambiguity = AMBIGUITY_SCALE * np.sqrt(R_obs[0, 0] + R_obs[1, 1])
                if cost.shape[0] > 1:
                    col_min = cost.min(axis=0)
                    col_second = np.partition(cost, 1, axis=0)[1]
                else:
                    col_min = cost.min(axis=0) if cost.size else np.zeros(0)
                    col_second = np.full(cost.shape[1], np.inf)
                matched_ids = []
                for r, c in matched_rows:
                    nearest_other = col_min[c] if cost[r, c] > col_min[c] else col_second[c]
                    if nearest_other <= ambiguity:
                        continue  # another track within this observer's noise
                    matched_ids.append((ordered[r].track_id, c))
            R_inv_obs = inv_2x2(R_obs)
            for tid, k in matched_ids:
                det = detections[k]
                pending.setdefault(tid, []).append((obj.observer, det.z, R_obs))
                pending_targets.setdefault(tid, []).append(det.target)
                info = pending_info.get(tid)
                if info is None:
                    pending_info[tid] = [R_inv_obs.copy(), R_inv_obs @ det.z]
                else:
                    info[0] += R_inv_obs
                    info[1] += R_inv_obs @ det.z
            grew = False
            spawn_block = (
                np.maximum(gates, NO_SPAWN_RADIUS_M) if cost is not None else None
            )
            for k in unmatched:
                det = detections[k]
                # Spawn only from detections no existing track can explain;
                # a detection that merely lost the one-to-one competition
                # would otherwise seed a duplicate of a live track.
                if not self.oracle_association and len(ordered):
                    if bool(np.any(cost[:, k] <= spawn_block)):
                        suppressed.append((det, R_obs))
                        continue
                track = self._spawn(tick, obj.observer, det.z, R_obs, det.target)
                spawned.add(track.track_id)
                ordered.append(track)
                positions.append(track.est.x[:2])
                spreads.append(track.est.P[0, 0] + track.est.P[1, 1])
                grew = True
            if grew:
                pos_arr = np.array(positions).reshape(-1, 2)
                spread_arr = np.array(spreads)

        for track in self._update_candidates(tick, suppressed, pos_arr):
            spawned.add(track.track_id)

        committed: dict[int, TrackStep] = {}
        self._batch_update(tick, pending_info)
        for tid in sorted(self._tracks):
            track = self._tracks[tid]
            if tid in pending:
                bundle = MeasurementBundle(tick=tick, entries=tuple(pending[tid]))
                committed[tid] = TrackStep(bundle=bundle, targets=tuple(pending_targets[tid]))
                track.truth_id = _vote_truth(bundle, pending_targets[tid])
                if tid not in spawned:
                    track.hit_streak += 1
                track.misses = 0
            elif tid in spawned:
                pass  # birth counts as the first hit
            else:
                track.misses += 1
                track.hit_streak = 0
            if track.hit_streak >= CONFIRM_HITS:
                track.confirmed = True

        for tid in [t for t, tr in self._tracks.items() if tr.misses >= MAX_MISSES]:
            del self._tracks[tid]
        if not self.oracle_association:
            # Duplicate hygiene exists for gated-assignment pathologies;
            # identity matching cannot produce twins in the first place.
            self._merge_duplicates()
        return committed

    def _merge_duplicates(self) -> None:
        """Collapse tracks that are statistically the same target.

        Duplicates arise when a heavy-noise detection escapes every gate
        and seeds a twin next to a live track; left alone, the per-observer
        one-to-one assignment keeps both alive indefinitely.  A pair merges
        when the position difference is small against the sum of the two
        position covariances; the older track survives.
        """
        ids = sorted(self._tracks)
        n = len(ids)
        if n < 2:
            return
        x = np.array([self._tracks[tid].est.x[:2] for tid in ids])
        covs = np.array([self._tracks[tid].est.P[:2, :2] for tid in ids])
        d = x[:, None, :] - x[None, :, :]
        S = covs[:, None, :, :] + covs[None, :, :, :]
        det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            maha = (
                d[..., 0] * (S[..., 1, 1] * d[..., 0] - S[..., 0, 1] * d[..., 1])
                + d[..., 1] * (S[..., 0, 0] * d[..., 1] - S[..., 1, 0] * d[..., 0])
            ) / det
        upper = np.triu(np.ones((n, n), dtype=bool), 1)
        close = (maha <= MERGE_GATE_CHI2) & (det > 0) & upper
        dead: set[int] = set()
        for a, b in np.argwhere(close):
            if ids[a] not in dead:
                dead.add(ids[b])

        # Euclidean twin clock: persistent co-location defeats overconfident
        # covariances that keep the statistical merge from ever firing.
        near = (np.einsum("ijk,ijk->ij", d, d) <= TWIN_RADIUS_M**2) & upper
        active: set[tuple[int, int]] = set()
        for a, b in np.argwhere(near):
            pair = (ids[a], ids[b])
            if pair[0] in dead or pair[1] in dead:
                continue
            active.add(pair)
            count = self._twin_clock.get(pair, 0) + 1
            self._twin_clock[pair] = count
            if count >= TWIN_TICKS:
                ta, tb = self._tracks[pair[0]], self._tracks[pair[1]]
                tr_a = ta.est.P[0, 0] + ta.est.P[1, 1]
                tr_b = tb.est.P[0, 0] + tb.est.P[1, 1]
                dead.add(pair[1] if tr_b >= tr_a else pair[0])
        self._twin_clock = {p: c for p, c in self._twin_clock.items() if p in active}

        for tid in dead:
            del self._tracks[tid]
