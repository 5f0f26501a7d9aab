"""Ground truth: fleet generation and per-tick motion.

Vehicles move with a 2-D constant-velocity model plus small Gaussian
process noise and reflect off the walls of a square area.  Connected
vehicles (the first ``n_cavs`` ids) additionally carry a detection range
and a true measurement-noise covariance; normal vehicles are pure targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError
from .seeding import substream


@dataclass(frozen=True)
class TargetState:
    """Kinematic state of one vehicle (positions in m, velocities in m/s)."""

    px: float
    py: float
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))


@dataclass(frozen=True)
class WorldConfig:
    """Scenario parameters.  Loads from JSON with these exact field names."""

    n_cavs: int = 20
    n_normal: int = 20
    area_side: float = 450.0
    v_min: float = 5.0
    v_max: float = 15.0
    d_min: float = 100.0
    d_max: float = 300.0
    sigma_min: float = 0.01
    sigma_max: float = 5.0
    comm_range: float = 150.0
    f_sim: float = 10.0
    q: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_cavs < 1:
            raise ConfigError(f"n_cavs must be >= 1, got {self.n_cavs}")
        if self.n_normal < 0:
            raise ConfigError(f"n_normal must be >= 0, got {self.n_normal}")
        if self.area_side <= 0:
            raise ConfigError(f"area_side must be > 0, got {self.area_side}")
        if not 0 <= self.v_min <= self.v_max:
            raise ConfigError(f"speed range invalid: v_min={self.v_min}, v_max={self.v_max}")
        if not 0 < self.d_min <= self.d_max:
            raise ConfigError(f"detection range invalid: d_min={self.d_min}, d_max={self.d_max}")
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ConfigError(
                f"noise std range invalid: sigma_min={self.sigma_min}, sigma_max={self.sigma_max}"
            )
        if self.comm_range < 0:
            raise ConfigError(f"comm_range must be >= 0, got {self.comm_range}")
        if self.f_sim <= 0:
            raise ConfigError(f"f_sim must be > 0, got {self.f_sim}")
        if self.q < 0:
            raise ConfigError(f"q must be >= 0, got {self.q}")

    @property
    def dt(self) -> float:
        return 1.0 / self.f_sim

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown world config fields: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class World:
    """Immutable snapshot of the fleet at one tick.

    Vehicle ids are dense: CAVs are ``0..n_cavs-1``, normal vehicles follow.
    """

    tick: int
    positions: np.ndarray        # (n, 2) m
    velocities: np.ndarray       # (n, 2) m/s
    cav_ids: tuple[int, ...]
    detection_range: np.ndarray  # (n_cavs,) m
    true_noise: np.ndarray       # (n_cavs, 2, 2) m^2, diagonal SPD
    _cav_set: frozenset[int] = field(default=frozenset(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_cav_set", frozenset(self.cav_ids))

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[0]

    def is_cav(self, i: int) -> bool:
        return i in self._cav_set

    def state_of(self, i: int) -> TargetState:
        px, py = self.positions[i]
        vx, vy = self.velocities[i]
        return TargetState(float(px), float(py), float(vx), float(vy))

    def states(self) -> dict[int, TargetState]:
        return {i: self.state_of(i) for i in range(self.n_vehicles)}


def generate_world(config: WorldConfig) -> World:
    """Draw the initial fleet.  Deterministic for a fixed config/seed."""
    config.validate()
    rng = substream(config.seed, "world-init")
    n = config.n_cavs + config.n_normal

    positions = rng.uniform(0.0, config.area_side, size=(n, 2))
    headings = rng.uniform(0.0, 2.0 * np.pi, size=n)
    speeds = rng.uniform(config.v_min, config.v_max, size=n)
    velocities = np.column_stack([speeds * np.cos(headings), speeds * np.sin(headings)])

    detection_range = rng.uniform(config.d_min, config.d_max, size=config.n_cavs)
    sigmas = rng.uniform(config.sigma_min, config.sigma_max, size=(config.n_cavs, 2))
    true_noise = np.zeros((config.n_cavs, 2, 2))
    true_noise[:, 0, 0] = sigmas[:, 0] ** 2
    true_noise[:, 1, 1] = sigmas[:, 1] ** 2

    return World(
        tick=0,
        positions=positions,
        velocities=velocities,
        cav_ids=tuple(range(config.n_cavs)),
        detection_range=detection_range,
        true_noise=true_noise,
    )


def _reflect(pos: np.ndarray, vel: np.ndarray, side: float) -> tuple[np.ndarray, np.ndarray]:
    """Mirror positions at the area boundary, negating the velocity component."""
    pos = pos.copy()
    vel = vel.copy()
    # A vehicle cannot overshoot by more than one period per tick at sane
    # speeds, but loop anyway so the invariant holds for any input.
    for _ in range(64):
        below = pos < 0.0
        above = pos > side
        if not (below.any() or above.any()):
            break
        pos[below] = -pos[below]
        vel[below] = -vel[below]
        pos[above] = 2.0 * side - pos[above]
        vel[above] = -vel[above]
    return pos, vel


def step_world(world: World, config: WorldConfig, rng: np.random.Generator) -> World:
    """Advance every vehicle one tick of constant-velocity motion with noise.

    Position noise std is ``0.5*q*dt^2`` and velocity noise std ``q*dt``
    per axis; both are drawn independently.  Vehicles leaving the area are
    reflected back inside.
    """
    dt = config.dt
    n = world.n_vehicles
    if config.q > 0:
        w_p = rng.normal(0.0, 0.5 * config.q * dt * dt, size=(n, 2))
        w_v = rng.normal(0.0, config.q * dt, size=(n, 2))
    else:
        w_p = np.zeros((n, 2))
        w_v = np.zeros((n, 2))

    positions = world.positions + world.velocities * dt + w_p
    velocities = world.velocities + w_v
    positions, velocities = _reflect(positions, velocities, config.area_side)

    return replace(world, tick=world.tick + 1, positions=positions, velocities=velocities)


def neighbors(world: World, i: int, r_com: float) -> set[int]:
    """CAVs other than ``i`` within ``r_com`` meters (boundary inclusive)."""
    if not world.is_cav(i):
        raise ValueError(f"vehicle {i} is not a CAV")
    cav_idx = np.asarray(world.cav_ids)
    dists = np.linalg.norm(world.positions[cav_idx] - world.positions[i], axis=1)
    mask = (dists <= r_com) & (cav_idx != i)
    return set(int(j) for j in cav_idx[mask])
