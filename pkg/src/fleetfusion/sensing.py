"""Noisy object-level perception of the ground truth.

Each CAV reports the positions of all other vehicles inside its detection
range, corrupted by an additive zero-mean Gaussian with that CAV's own
covariance.  There are no false positives and no missed detections inside
range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import World


@dataclass(frozen=True)
class Detection:
    """One measured target position.

    ``target`` is the true identity of the measured vehicle.  It exists for
    evaluation and for oracle-association test modes only; estimators never
    read it on the default pipeline.
    """

    observer: int
    target: int
    z: np.ndarray  # (2,) m
    tick: int


@dataclass(frozen=True)
class ObjectList:
    """A single CAV's detections for one tick, ordered by target id."""

    observer: int
    tick: int
    detections: tuple[Detection, ...]

    def positions(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, 2))
        return np.stack([d.z for d in self.detections])


def sample_gaussian(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean draw with the given 2x2 covariance (Cholesky-based).

    Raises ``numpy.linalg.LinAlgError`` if ``cov`` is not positive definite.
    """
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    return chol @ rng.standard_normal(2)


def sense(world: World, i: int, rng: np.random.Generator) -> ObjectList:
    """Measure every other vehicle within CAV ``i``'s detection range."""
    if not world.is_cav(i):
        raise ValueError(f"vehicle {i} is not a CAV")

    dists = np.linalg.norm(world.positions - world.positions[i], axis=1)
    in_range = dists <= world.detection_range[i]
    in_range[i] = False
    targets = np.flatnonzero(in_range)

    detections: list[Detection] = []
    if targets.size:
        chol = np.linalg.cholesky(world.true_noise[i])
        noise = rng.standard_normal((targets.size, 2)) @ chol.T
        zs = world.positions[targets] + noise
        detections = [
            Detection(observer=i, target=int(t), z=zs[k], tick=world.tick)
            for k, t in enumerate(targets)
        ]
    return ObjectList(observer=i, tick=world.tick, detections=tuple(detections))
