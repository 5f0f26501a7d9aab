import numpy as np
import pytest

from fleetfusion.errors import ConfigError
from fleetfusion.seeding import substream
from fleetfusion.world import World, WorldConfig, generate_world, neighbors, step_world


def make_config(**kw):
    base = dict(n_cavs=5, n_normal=5, area_side=500.0, f_sim=50.0, seed=42)
    base.update(kw)
    return WorldConfig(**base)


class TestGenerateWorld:
    def test_paper_scale_counts(self):
        cfg = make_config(n_cavs=100, n_normal=100, area_side=1000.0,
                          d_min=100.0, d_max=300.0, sigma_min=0.01, sigma_max=5.0)
        world = generate_world(cfg)
        assert world.n_vehicles == 200
        assert len(world.cav_ids) == 100
        assert world.detection_range.shape == (100,)
        assert np.all((world.detection_range >= 100.0) & (world.detection_range <= 300.0))
        variances = world.true_noise[:, [0, 1], [0, 1]]
        assert np.all((variances >= 0.01**2) & (variances <= 5.0**2))
        # off-diagonals are zero at generation time
        assert np.all(world.true_noise[:, 0, 1] == 0.0)

    def test_degenerate_single_cav(self):
        cfg = make_config(n_cavs=1, n_normal=0)
        world = generate_world(cfg)
        assert world.n_vehicles == 1
        for _ in range(5):
            assert neighbors(world, 0, cfg.comm_range) == set()
            world = step_world(world, cfg, substream(cfg.seed, "world", world.tick))

    def test_determinism(self):
        cfg = make_config()
        a = generate_world(cfg)
        b = generate_world(cfg)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.velocities, b.velocities)
        assert np.array_equal(a.true_noise, b.true_noise)

    def test_positions_inside_area(self):
        world = generate_world(make_config(n_cavs=50, n_normal=50))
        assert np.all((world.positions >= 0) & (world.positions <= 500.0))

    def test_speeds_within_range(self):
        cfg = make_config(n_cavs=50, n_normal=50, v_min=5.0, v_max=15.0)
        world = generate_world(cfg)
        speeds = np.linalg.norm(world.velocities, axis=1)
        assert np.all((speeds >= 5.0 - 1e-9) & (speeds <= 15.0 + 1e-9))

    @pytest.mark.parametrize(
        "field,value",
        [("n_cavs", 0), ("d_min", 0.0), ("sigma_min", -1.0), ("f_sim", 0.0),
         ("area_side", -10.0), ("v_min", 20.0)],
    )
    def test_invalid_config_names_field(self, field, value):
        with pytest.raises(ConfigError):
            make_config(**{field: value}).validate()


class TestStepWorld:
    def test_noiseless_constant_velocity(self):
        cfg = make_config(q=0.0, f_sim=50.0)
        world = generate_world(cfg)
        world = World(
            tick=0,
            positions=np.array([[0.0, 0.0]]),
            velocities=np.array([[10.0, 0.0]]),
            cav_ids=(0,),
            detection_range=np.array([100.0]),
            true_noise=np.eye(2)[None],
        )
        stepped = step_world(world, cfg, substream(0, "world", 0))
        assert np.allclose(stepped.positions[0], [0.2, 0.0])
        assert np.allclose(stepped.velocities[0], [10.0, 0.0])
        assert stepped.tick == 1

    def test_boundary_reflection(self):
        cfg = make_config(q=0.0, f_sim=50.0, area_side=500.0)
        world = World(
            tick=0,
            positions=np.array([[499.9, 100.0]]),
            velocities=np.array([[10.0, 0.0]]),
            cav_ids=(0,),
            detection_range=np.array([100.0]),
            true_noise=np.eye(2)[None],
        )
        stepped = step_world(world, cfg, substream(0, "world", 0))
        # would be 500.1 -> mirrored to 499.9 with vx negated
        assert np.allclose(stepped.positions[0], [499.9, 100.0])
        assert np.allclose(stepped.velocities[0], [-10.0, 0.0])

    def test_reflection_preserves_speed(self):
        cfg = make_config(q=0.0, v_min=10.0, v_max=15.0, area_side=100.0)
        world = generate_world(cfg)
        speeds = np.linalg.norm(world.velocities, axis=1)
        for t in range(200):
            world = step_world(world, cfg, substream(cfg.seed, "world", t))
        assert np.allclose(np.linalg.norm(world.velocities, axis=1), speeds)
        assert np.all((world.positions >= 0) & (world.positions <= 100.0))

    def test_process_noise_zero_mean(self):
        # sample mean of the position noise should vanish within 4 standard errors
        cfg = make_config(n_cavs=1, n_normal=0, q=0.5, f_sim=50.0, area_side=1e7)
        world = World(
            tick=0,
            positions=np.full((1, 2), 5e6),
            velocities=np.zeros((1, 2)),
            cav_ids=(0,),
            detection_range=np.array([100.0]),
            true_noise=np.eye(2)[None],
        )
        n = 10_000
        dt = cfg.dt
        samples = np.zeros((n, 2))
        for t in range(n):
            prev = world
            world = step_world(world, cfg, substream(7, "world", t))
            samples[t] = world.positions[0] - prev.positions[0] - prev.velocities[0] * dt
        sigma_p = 0.5 * cfg.q * dt * dt
        stderr = sigma_p / np.sqrt(n)
        assert np.all(np.abs(samples.mean(axis=0)) < 4 * stderr)
        # and the std matches the configured noise within 5%
        assert np.allclose(samples.std(axis=0), sigma_p, rtol=0.05)

    def test_counts_constant_across_steps(self):
        cfg = make_config()
        world = generate_world(cfg)
        for t in range(20):
            world = step_world(world, cfg, substream(cfg.seed, "world", t))
        assert world.n_vehicles == 10
        assert world.cav_ids == tuple(range(5))

    def test_trajectory_determinism(self):
        cfg = make_config(q=0.7)
        runs = []
        for _ in range(2):
            world = generate_world(cfg)
            for t in range(50):
                world = step_world(world, cfg, substream(cfg.seed, "world", t))
            runs.append(world.positions.copy())
        assert np.array_equal(runs[0], runs[1])


class TestNeighbors:
    def test_zero_range_is_empty(self):
        world = generate_world(make_config(n_cavs=20, n_normal=0, area_side=100.0))
        for i in world.cav_ids:
            assert neighbors(world, i, 0.0) == set()

    def test_boundary_inclusive(self):
        world = World(
            tick=0,
            positions=np.array([[0.0, 0.0], [150.0, 0.0]]),
            velocities=np.zeros((2, 2)),
            cav_ids=(0, 1),
            detection_range=np.array([100.0, 100.0]),
            true_noise=np.stack([np.eye(2)] * 2),
        )
        assert neighbors(world, 0, 150.0) == {1}
        assert neighbors(world, 1, 150.0) == {0}

    def test_line_of_cavs_matches_brute_force(self):
        positions = np.array([[100.0 * k, 0.0] for k in range(5)])
        world = World(
            tick=0,
            positions=positions,
            velocities=np.zeros((5, 2)),
            cav_ids=tuple(range(5)),
            detection_range=np.full(5, 100.0),
            true_noise=np.stack([np.eye(2)] * 5),
        )
        r_com = 150.0
        for i in range(5):
            expected = {
                j for j in range(5)
                if j != i and np.linalg.norm(positions[i] - positions[j]) <= r_com
            }
            assert neighbors(world, i, r_com) == expected

    def test_symmetric_irreflexive_random(self):
        cfg = make_config(n_cavs=30, n_normal=10, area_side=400.0)
        world = generate_world(cfg)
        r_com = 150.0
        sets = {i: neighbors(world, i, r_com) for i in world.cav_ids}
        for i, nbrs in sets.items():
            assert i not in nbrs
            for j in nbrs:
                assert i in sets[j]

    def test_non_cav_rejected(self):
        world = generate_world(make_config())
        with pytest.raises(ValueError):
            neighbors(world, 7, 100.0)  # id 7 is a normal vehicle
