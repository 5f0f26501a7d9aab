"""Track-to-detection assignment via minimum-cost matching.

Costs are Euclidean distances between predicted track positions and
measured positions; pairs beyond the gate are demoted to unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fusion import TrackEstimate
from .sensing import Detection

# Cost assigned to gated-out pairs so the solver avoids them whenever any
# admissible completion exists.
_BLOCKED = 1e12


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(rows, cols)`` pairs.

    Ties between equal-cost optima resolve toward the lowest (row, col)
    in lexicographic order.  An empty matrix yields an empty assignment.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all() or (cost < 0).any():
        raise ValueError("cost matrix entries must be finite and non-negative")

    n_rows, n_cols = cost.shape
    # Deterministic tie-break, far below any meaningful cost difference.
    # Early rows carry geometrically larger weight, so among equal-cost
    # optima the assignment with the lexicographically smallest (row, col)
    # sequence has the strictly smallest perturbed total.  (The weights
    # underflow beyond ~40 rows; ties that deep fall back to the solver's
    # own deterministic choice.)
    scale = float(cost.max()) or 1.0
    perturbed = cost + (scale * 1e-12) * _bias_matrix(n_rows, n_cols)
    rows, cols = linear_sum_assignment(perturbed)
    return sorted(zip(rows.tolist(), cols.tolist()))


_BIAS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bias_matrix(n_rows: int, n_cols: int) -> np.ndarray:
    bias = _BIAS_CACHE.get((n_rows, n_cols))
    if bias is None:
        row_weight = (n_cols + 1.0) ** -np.arange(n_rows, dtype=float)
        bias = row_weight[:, None] * (np.arange(n_cols, dtype=float) + 1.0)[None, :]
        bias /= n_cols + 1.0
        if len(_BIAS_CACHE) < 4096:
            _BIAS_CACHE[(n_rows, n_cols)] = bias
    return bias


@dataclass(frozen=True)
class Assignment:
    """Outcome of one gated association pass."""

    matched: list[tuple[int, int]]        # (track id, detection index)
    unmatched_tracks: list[int]           # track ids
    unmatched_detections: list[int]       # detection indices


def assign_positions(
    track_pos: np.ndarray, det_pos: np.ndarray, gates: np.ndarray
) -> tuple[list[tuple[int, int]], list[int], list[int], np.ndarray]:
    """Gated minimum-cost matching on raw position arrays.

    Returns matched ``(track row, detection index)`` pairs, the unmatched
    rows/indices, and the full distance matrix (which callers reuse for
    ambiguity and spawn checks).  This is the array-level core shared by
    :func:`associate` and the tracker's hot path.
    """
    n_tracks = track_pos.shape[0]
    n_dets = det_pos.shape[0]
    if n_tracks == 0 or n_dets == 0:
        return [], list(range(n_tracks)), list(range(n_dets)), np.zeros((n_tracks, n_dets))
    diff = track_pos[:, None, :] - det_pos[None, :, :]
    cost = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    gated = np.where(cost <= gates[:, None], cost, _BLOCKED)
    pairs = hungarian(gated)
    matched = [(r, c) for r, c in pairs if cost[r, c] <= gates[r]]
    used_r = {r for r, _ in matched}
    used_c = {c for _, c in matched}
    return (
        matched,
        [r for r in range(n_tracks) if r not in used_r],
        [c for c in range(n_dets) if c not in used_c],
        cost,
    )


def associate(
    tracks: list[TrackEstimate],
    detections: list[Detection],
    gate: float | np.ndarray,
) -> Assignment:
    """Assign detections to predicted tracks, gating by distance.

    ``gate`` is either a scalar or one radius per track.  Pairs whose
    distance exceeds the gate never match; the corresponding tracks and
    detections come back unmatched.
    """
    if not tracks or not detections:
        return Assignment(
            matched=[],
            unmatched_tracks=[t.track for t in tracks],
            unmatched_detections=list(range(len(detections))),
        )
    track_pos = np.stack([t.x[:2] for t in tracks])
    det_pos = np.stack([d.z for d in detections])
    gates = np.broadcast_to(np.asarray(gate, dtype=float), (len(tracks),))
    matched_rows, unmatched_rows, unmatched_dets, _ = assign_positions(track_pos, det_pos, gates)
    return Assignment(
        matched=[(tracks[r].track, c) for r, c in matched_rows],
        unmatched_tracks=[tracks[r].track for r in unmatched_rows],
        unmatched_detections=unmatched_dets,
    )
