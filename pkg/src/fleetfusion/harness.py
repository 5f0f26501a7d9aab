"""Scenario runner, metrics engine, and machine-readable outputs.

Each run wires ground truth -> sensing -> protocol -> on-board and central
estimation per tick.  With limit baselines enabled, three estimator stacks
consume identical measurement realizations and differ only in the noise
covariance they weight with:

  * ``est``    — the subscribed / edge-estimated covariances,
  * ``fixed``  — the predefined default covariance,
  * ``limit``  — the ground-truth covariances (the estimation limit).

Improvement rates compare ``est`` against ``fixed``, either toward ground
truth or toward the ``limit`` stack's estimates.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .noise_estimation import WindowConfig
from .protocol import (
    EDGE,
    BandwidthLedger,
    EdgeServer,
    Envelope,
    MessageBus,
    Schedule,
    VehicleAgent,
    encode,
)
from .seeding import substream
from .sensing import ObjectList, sense
from .tracking import MultiTargetFilter
from .world import WorldConfig, generate_world, neighbors, step_world

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything one scenario run needs; mirrors the JSON config layout."""

    world: WorldConfig = WorldConfig()
    windows: WindowConfig = WindowConfig()
    f_bdc: float | None = None  # defaults to f_sim
    f_upl: float = 10.0
    f_sub: float = 10.0
    duration: float = 15.0
    subscribe: bool = True
    oracle_association: bool = False
    limit_baselines: bool = True
    default_noise_std: float = 2.5
    uncertainty_subtraction: bool = False
    latency_ticks: int = 0
    workers: int = 1
    t0s: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)
    trace_messages: bool = False
    repeats: int = 1

    @property
    def schedule(self) -> Schedule:
        f_bdc = self.f_bdc if self.f_bdc is not None else self.world.f_sim
        return Schedule(
            f_sim=self.world.f_sim,
            f_bdc=f_bdc,
            f_upl=self.f_upl,
            f_sub=self.f_sub if self.subscribe else 0.0,
        )

    @property
    def ticks(self) -> int:
        return int(round(self.duration * self.world.f_sim))

    def default_R(self) -> np.ndarray:
        return np.eye(2) * self.default_noise_std**2

    def validate(self) -> None:
        self.world.validate()
        self.windows.validate()
        self.schedule.validate()
        if self.duration <= 0:
            raise ConfigError(f"duration must be > 0, got {self.duration}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.latency_ticks < 0:
            raise ConfigError(f"latency_ticks must be >= 0, got {self.latency_ticks}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["t0s"] = list(self.t0s)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        if "world" in doc:
            doc["world"] = WorldConfig.from_dict(doc["world"])
        if "windows" in doc:
            doc["windows"] = WindowConfig(**doc["windows"])
        if "t0s" in doc:
            doc["t0s"] = tuple(doc["t0s"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Metric series
# ---------------------------------------------------------------------------

DIST_KEYS = (
    "mse_gt_est",
    "mse_gt_fixed",
    "mse_gt_limit",
    "mse_lim_est",
    "mse_lim_fixed",
    "imp_gt",
    "imp_lim",
)
NOISE_KEYS = ("noise_mse_est", "noise_mse_limit", "target_window", "residual_window")
BANDWIDTH_KEYS = (
    "ul_bytes",
    "dl_bytes",
    "v2v_bytes",
    "ul_kbps",
    "dl_kbps",
    "v2v_kbps",
    "publish_dl_bytes",
    "direct_share_bytes",
)


@dataclass
class MetricSeries:
    """Per-rate metric records for one run (or the average of repeats)."""

    f_sim: float
    ticks: int
    distributed: list[dict] = field(default_factory=list)
    central: list[dict] = field(default_factory=list)
    noise: list[dict] = field(default_factory=list)
    bandwidth: list[dict] = field(default_factory=list)
    stream_hashes: dict[str, str] = field(default_factory=dict)
    trace: list[Envelope] | None = None
    repeats: int = 1


@dataclass(frozen=True)
class BucketStats:
    mean: float | None
    std: float | None
    count: int


@dataclass(frozen=True)
class ImprovementSummary:
    """1-second average improvement rates per requested window start."""

    distributed: dict[float, dict[str, BucketStats]]
    central: dict[float, dict[str, BucketStats]]


def improvement_rate(mse_without, mse_with) -> list[float | None]:
    """Fractional error reduction ``(without - with) / without`` per entry.

    Entries where the reference is zero or missing come back as ``None``
    and are excluded from averages downstream.
    """
    if len(mse_without) != len(mse_with):
        raise ValueError("improvement_rate requires equal-length series")
    out: list[float | None] = []
    for base, val in zip(mse_without, mse_with):
        if base is None or val is None or base == 0:
            out.append(None)
        else:
            out.append((base - val) / base)
    return out


def _bucket_stats(rows: list[dict], key: str, lo_tick: int, hi_tick: int) -> BucketStats:
    vals = [r[key] for r in rows if lo_tick <= r["tick"] < hi_tick and r[key] is not None]
    if not vals:
        return BucketStats(mean=None, std=None, count=0)
    arr = np.asarray(vals, dtype=float)
    return BucketStats(mean=float(arr.mean()), std=float(arr.std()), count=len(vals))


def summarize(series: MetricSeries, t0s) -> ImprovementSummary:
    """Mean and population std of the improvement rates over 1 s buckets."""
    distributed: dict[float, dict[str, BucketStats]] = {}
    central: dict[float, dict[str, BucketStats]] = {}
    for t0 in t0s:
        lo = int(round(t0 * series.f_sim))
        hi = int(round((t0 + 1.0) * series.f_sim))
        if hi > series.ticks:
            raise ValueError(f"t0={t0} s: bucket end {hi} exceeds run length {series.ticks} ticks")
        distributed[t0] = {
            "to_ground_truth": _bucket_stats(series.distributed, "imp_gt", lo, hi),
            "to_limit": _bucket_stats(series.distributed, "imp_lim", lo, hi),
        }
        central[t0] = {
            "to_ground_truth": _bucket_stats(series.central, "imp_gt", lo, hi),
            "to_limit": _bucket_stats(series.central, "imp_lim", lo, hi),
        }
    return ImprovementSummary(distributed=distributed, central=central)


# ---------------------------------------------------------------------------
# MSE helpers
# ---------------------------------------------------------------------------


# Tracks younger than this many ticks are still converging from their birth
# state, an error shared by every stack regardless of noise weighting.
MATURE_AGE_TICKS = 15


def _fresh(tracker: MultiTargetFilter, tick: int):
    """Confirmed, mature tracks measured at the evaluation tick.

    Tracks coasting on prediction alone carry the same error in every
    stack (no measurement is weighted), and newborn tracks are dominated
    by their shared birth transient, so both would only dilute the
    weighting-quality comparison the metrics exist to make.
    """
    return [
        t
        for t in tracker.confirmed()
        if t.misses == 0 and t.truth_id is not None and t.truth_id >= 0
        and t.est.last_update == tick and tick - t.born >= MATURE_AGE_TICKS
    ]


def _tracker_mse_gt(tracker: MultiTargetFilter, positions: np.ndarray, tick: int) -> float | None:
    errs = [
        float(np.sum((t.est.x[:2] - positions[t.truth_id]) ** 2))
        for t in _fresh(tracker, tick)
    ]
    return float(np.mean(errs)) if errs else None


def _tracker_mse_cross(a: MultiTargetFilter, b: MultiTargetFilter, tick: int) -> float | None:
    ref = {t.truth_id: t.est.x[:2] for t in _fresh(b, tick)}
    errs = [
        float(np.sum((t.est.x[:2] - ref[t.truth_id]) ** 2))
        for t in _fresh(a, tick)
        if t.truth_id in ref
    ]
    return float(np.mean(errs)) if errs else None


def _mean_over_cavs(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _improvement(base: float | None, val: float | None) -> float | None:
    if base is None or val is None or base == 0:
        return None
    return (base - val) / base


def _list_bytes(obj: ObjectList, cache: dict[int, bytes]) -> bytes:
    cached = cache.get(id(obj))
    if cached is None:
        chunks = [np.int64(obj.observer).tobytes(), np.int64(obj.tick).tobytes()]
        for det in obj.detections:
            chunks.append(np.int64(det.target).tobytes())
            chunks.append(np.asarray(det.z, dtype=np.float64).tobytes())
        cached = cache[id(obj)] = b"".join(chunks)
    return cached


def _hash_lists(hashers: dict, lists: list[ObjectList], cache: dict[int, bytes]) -> None:
    """Feed identical canonical bytes to every stack's stream hasher."""
    for obj in lists:
        data = _list_bytes(obj, cache)
        for h in hashers.values():
            h.update(data)


# ---------------------------------------------------------------------------
# Scenario runner
# ---------------------------------------------------------------------------


def _run_once(config: RunConfig, seed: int) -> MetricSeries:
    world_cfg = replace(config.world, seed=seed)
    sched = config.schedule
    dt = world_cfg.dt
    q = world_cfg.q
    default_R = config.default_R()
    ticks = config.ticks
    r_com = world_cfg.comm_range

    world = generate_world(world_cfg)
    true_noise = world.true_noise
    truth_positions: dict[int, np.ndarray] = {}

    def truth_lookup(tick: int, target: int) -> np.ndarray:
        return truth_positions[tick][target]

    assigned_to_world: dict[int, int] = {}

    def true_noise_for(assigned: int) -> np.ndarray:
        wid = assigned_to_world.get(assigned)
        return true_noise[wid] if wid is not None else default_R

    ledger = BandwidthLedger(f_sim=world_cfg.f_sim)
    bus = MessageBus(ledger, latency_ticks=config.latency_ticks, trace=config.trace_messages)
    edge = EdgeServer(
        dt,
        q,
        config.windows,
        default_R,
        first_id=0,
        oracle_association=config.oracle_association,
        subtract_uncertainty=config.uncertainty_subtraction,
        truth_lookup=truth_lookup if config.limit_baselines else None,
        true_noise_for=true_noise_for if config.limit_baselines else None,
        area_side=world_cfg.area_side,
    )
    agents = [
        VehicleAgent(
            world_id=i,
            token=int(substream(seed, "token", i).integers(0, 2**31)),
            dt=dt,
            q=q,
            default_R=default_R,
            subscribe=config.subscribe and config.f_sub > 0,
            oracle_association=config.oracle_association,
            true_noise_for=(lambda obs: true_noise_for(obs)) if config.limit_baselines else None,
            area_side=world_cfg.area_side,
        )
        for i in world.cav_ids
    ]
    by_addr = {a.world_id: a for a in agents}

    hashers = {label: hashlib.sha256() for label in ("est", "fixed", "limit")}
    series = MetricSeries(f_sim=world_cfg.f_sim, ticks=ticks)

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None

    def fan_out(fn, items):
        if pool is None:
            return [fn(it) for it in items]
        return list(pool.map(fn, items))

    def route(env: Envelope, tick: int, inboxes: dict[int, list[Envelope]]) -> None:
        if env.dst == EDGE:
            reply = edge.ingest(env, tick)
            if reply is not None:
                bus.send(reply, EDGE, env.src, tick)
        else:
            inboxes.setdefault(env.dst, []).append(env)

    def drain(tick: int, inboxes: dict[int, list[Envelope]]) -> None:
        for _ in range(8):
            due = bus.deliver(tick)
            if not due:
                return
            for env in due:
                route(env, tick, inboxes)

    try:
        for t in range(ticks):
            truth_positions[t] = world.positions
            inboxes: dict[int, list[Envelope]] = {}
            bytes_cache: dict[int, bytes] = {}

            # Sensing: one realization per CAV per tick, shared by all stacks.
            lists = dict(
                zip(
                    world.cav_ids,
                    fan_out(
                        lambda i: sense(world, i, substream(seed, "sense", i, t)),
                        world.cav_ids,
                    ),
                )
            )

            # Control plane: registration, then subscription after the ack.
            for _ in range(2):
                for agent in agents:
                    for msg in agent.control_messages():
                        bus.send(msg, agent.world_id, EDGE, t)
                drain(t, inboxes)
                for addr, envs in list(inboxes.items()):
                    for env in envs:
                        by_addr[addr].receive(env)
                    del inboxes[addr]
                for agent in agents:
                    if agent.assigned is not None and agent.assigned not in assigned_to_world:
                        assigned_to_world[agent.assigned] = agent.world_id

            # Data plane: uploads to the edge, broadcasts to current neighbors.
            upload_due = sched.due(t, sched.f_upl)
            bdc_due = sched.due(t, sched.f_bdc)
            if bdc_due and r_com > 0:
                cav_pos = world.positions[list(world.cav_ids)]
                diffs = cav_pos[:, None, :] - cav_pos[None, :, :]
                dist = np.sqrt(np.sum(diffs * diffs, axis=2))
            for agent in agents:
                if agent.assigned is None:
                    continue
                obj = lists[agent.world_id]
                keyed = agent.rekeyed_list(obj)
                msg = agent.upload_message(obj)
                if upload_due:
                    bus.send(msg, agent.world_id, EDGE, t, payload=keyed)
                if bdc_due and r_com > 0:
                    row = dist[agent.world_id]
                    n_bytes = len(encode(msg))
                    for j in world.cav_ids:
                        if j != agent.world_id and row[j] <= r_com:
                            bus.send(msg, agent.world_id, j, t, payload=keyed, n_bytes=n_bytes)
            drain(t, inboxes)

            # Edge: estimation step at upload ticks, publish at subscription ticks.
            if upload_due:
                pending = edge.pending_lists()
                _hash_lists(hashers, pending, bytes_cache)
                for record in edge.process_pending():
                    positions = truth_positions[record.tick]
                    row = {"tick": record.tick}
                    gt_est = _tracker_mse_gt(edge.estimator.tracker, positions, record.tick)
                    gt_fixed = _tracker_mse_gt(edge.fixed_tracker, positions, record.tick)
                    row["mse_gt_est"] = gt_est
                    row["mse_gt_fixed"] = gt_fixed
                    if edge.limit_tracker is not None:
                        row["mse_gt_limit"] = _tracker_mse_gt(
                            edge.limit_tracker, positions, record.tick
                        )
                        row["mse_lim_est"] = _tracker_mse_cross(
                            edge.estimator.tracker, edge.limit_tracker, record.tick
                        )
                        row["mse_lim_fixed"] = _tracker_mse_cross(
                            edge.fixed_tracker, edge.limit_tracker, record.tick
                        )
                    else:
                        row["mse_gt_limit"] = row["mse_lim_est"] = row["mse_lim_fixed"] = None
                    row["imp_gt"] = _improvement(row["mse_gt_fixed"], row["mse_gt_est"])
                    row["imp_lim"] = _improvement(row["mse_lim_fixed"], row["mse_lim_est"])
                    series.central.append(row)

                    noise_errs = []
                    noise_errs_limit = []
                    for veh, est in sorted(record.table.items()):
                        wid = assigned_to_world.get(veh)
                        if wid is None:
                            continue
                        noise_errs.append(float(np.sum((est.R - true_noise[wid]) ** 2)))
                        lim = record.limit_table.get(veh)
                        if lim is not None:
                            noise_errs_limit.append(
                                float(np.sum((lim.R - true_noise[wid]) ** 2))
                            )
                    series.noise.append(
                        {
                            "tick": record.tick,
                            "noise_mse_est": float(np.mean(noise_errs)) if noise_errs else None,
                            "noise_mse_limit": (
                                float(np.mean(noise_errs_limit)) if noise_errs_limit else None
                            ),
                            "target_window": record.windows.target,
                            "residual_window": record.windows.residual,
                        }
                    )

            if sched.due(t, sched.f_sub) and edge.subscribers:
                publish = edge.publish_message(t)
                n_bytes = len(encode(publish))
                baseline_bytes = len(encode(edge.track_share_message(t)))
                for veh in sorted(edge.subscribers):
                    addr = assigned_to_world[veh]
                    bus.send(publish, EDGE, addr, t, n_bytes=n_bytes)
                    ledger.account_baseline(addr, baseline_bytes, t)
            drain(t, inboxes)

            # Vehicles: ingest publishes and broadcasts, then filter.
            step_inputs: list[tuple[VehicleAgent, list[ObjectList]]] = []
            for agent in agents:
                received = inboxes.get(agent.world_id, [])
                foreign: list[ObjectList] = []
                for env in received:
                    agent.receive(env)
                    if isinstance(env.payload, ObjectList) and env.payload.tick == t:
                        foreign.append(env.payload)
                own = (
                    agent.rekeyed_list(lists[agent.world_id])
                    if agent.assigned is not None
                    else lists[agent.world_id]
                )
                all_lists = [own] + sorted(foreign, key=lambda o: o.observer)
                _hash_lists(hashers, all_lists, bytes_cache)
                step_inputs.append((agent, all_lists))
            fan_out(lambda pair: pair[0].filter_step(t, pair[1]), step_inputs)

            # Distributed metrics against the truth of this tick.
            positions = truth_positions[t]
            gt_est = _mean_over_cavs([_tracker_mse_gt(a.tracker, positions, t) for a in agents])
            gt_fixed = _mean_over_cavs(
                [_tracker_mse_gt(a.fixed_tracker, positions, t) for a in agents]
            )
            if config.limit_baselines:
                gt_limit = _mean_over_cavs(
                    [_tracker_mse_gt(a.limit_tracker, positions, t) for a in agents]
                )
                lim_est = _mean_over_cavs(
                    [_tracker_mse_cross(a.tracker, a.limit_tracker, t) for a in agents]
                )
                lim_fixed = _mean_over_cavs(
                    [_tracker_mse_cross(a.fixed_tracker, a.limit_tracker, t) for a in agents]
                )
            else:
                gt_limit = lim_est = lim_fixed = None
            series.distributed.append(
                {
                    "tick": t,
                    "mse_gt_est": gt_est,
                    "mse_gt_fixed": gt_fixed,
                    "mse_gt_limit": gt_limit,
                    "mse_lim_est": lim_est,
                    "mse_lim_fixed": lim_fixed,
                    "imp_gt": _improvement(gt_fixed, gt_est),
                    "imp_lim": _improvement(lim_fixed, lim_est),
                }
            )

            world = step_world(world, world_cfg, substream(seed, "world", t))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"numeric failure at tick {len(series.distributed)}: {exc}") from exc
    finally:
        if pool is not None:
            pool.shutdown()

    # Flush anything still in flight (nonzero latency) so conservation holds.
    for t_extra in range(ticks, ticks + config.latency_ticks + 1):
        for env in bus.deliver(t_extra):
            pass
    if bus.sent != bus.delivered:
        raise RuntimeError(f"message conservation violated: {bus.sent} sent, {bus.delivered} delivered")

    # Bandwidth rows: one per (second, vehicle), plus a fleet aggregate row.
    seconds = int(np.ceil(ticks / world_cfg.f_sim))
    addrs = sorted(a.world_id for a in agents)
    for second in range(seconds):
        fleet = dict.fromkeys(BANDWIDTH_KEYS, 0.0)
        for addr in addrs:
            row = {"second": second, "vehicle": addr}
            for direction, key in (("ul", "ul_bytes"), ("dl", "dl_bytes"), ("v2v", "v2v_bytes")):
                row[key] = ledger.buckets.get((second, addr, direction), 0)
            row["ul_kbps"] = row["ul_bytes"] * 8.0 / 1000.0
            row["dl_kbps"] = row["dl_bytes"] * 8.0 / 1000.0
            row["v2v_kbps"] = row["v2v_bytes"] * 8.0 / 1000.0
            row["publish_dl_bytes"] = ledger.publish_buckets.get((second, addr), 0)
            row["direct_share_bytes"] = ledger.baseline_buckets.get((second, addr), 0)
            for key in BANDWIDTH_KEYS:
                fleet[key] += row[key]
            series.bandwidth.append(row)
        series.bandwidth.append({"second": second, "vehicle": -1, **fleet})

    series.stream_hashes = {label: h.hexdigest() for label, h in hashers.items()}
    if len(set(series.stream_hashes.values())) != 1:
        raise RuntimeError(f"estimator stacks consumed different streams: {series.stream_hashes}")
    series.trace = bus.trace
    return series


def _average_rows(rows_per_run: list[list[dict]]) -> list[dict]:
    out: list[dict] = []
    for rows in zip(*rows_per_run):
        merged = dict(rows[0])
        for key in merged:
            if key in ("tick", "second", "vehicle"):
                continue
            vals = [r[key] for r in rows if r[key] is not None]
            merged[key] = float(np.mean(vals)) if vals else None
        out.append(merged)
    return out


def run_scenario(config: RunConfig) -> MetricSeries:
    """Execute the full per-tick loop; averages ``repeats`` seeded runs."""
    config.validate()
    runs = [_run_once(config, config.world.seed + r) for r in range(config.repeats)]
    if config.repeats == 1:
        return runs[0]
    base = runs[0]
    return MetricSeries(
        f_sim=base.f_sim,
        ticks=base.ticks,
        distributed=_average_rows([r.distributed for r in runs]),
        central=_average_rows([r.central for r in runs]),
        noise=_average_rows([r.noise for r in runs]),
        bandwidth=_average_rows([r.bandwidth for r in runs]),
        stream_hashes=base.stream_hashes,
        trace=base.trace,
        repeats=config.repeats,
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _stats_doc(stats: BucketStats) -> dict:
    return {"mean": stats.mean, "std": stats.std, "count": stats.count}


def emit(
    series: MetricSeries,
    summary: ImprovementSummary,
    out_dir: str | Path,
    config: RunConfig | None = None,
) -> dict[str, Path]:
    """Write ``metrics.csv``, ``summary.json``, ``bandwidth.csv`` (and the
    optional message trace) with stable ordering for golden-file diffs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics_path = out / "metrics.csv"
    columns = ["tick", "family", *DIST_KEYS, *NOISE_KEYS]
    rows: list[tuple] = []
    for row in series.distributed:
        rows.append((row["tick"], "distributed", *[row[k] for k in DIST_KEYS], *[None] * 4))
    for row in series.central:
        rows.append((row["tick"], "central", *[row[k] for k in DIST_KEYS], *[None] * 4))
    for row in series.noise:
        rows.append(
            (row["tick"], "noise", *[None] * len(DIST_KEYS), *[row[k] for k in NOISE_KEYS])
        )
    rows.sort(key=lambda r: (r[0], r[1]))
    with metrics_path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")

    bandwidth_path = out / "bandwidth.csv"
    with bandwidth_path.open("w", encoding="utf-8", newline="\n") as f:
        f.write("second,vehicle," + ",".join(BANDWIDTH_KEYS) + "\n")
        for row in series.bandwidth:
            f.write(
                ",".join(
                    _fmt(row[k]) for k in ("second", "vehicle", *BANDWIDTH_KEYS)
                )
                + "\n"
            )

    summary_doc = {
        "config": config.to_dict() if config is not None else None,
        "seed": config.world.seed if config is not None else None,
        "repeats": series.repeats,
        "ticks": series.ticks,
        "f_sim": series.f_sim,
        "detection_stream_sha256": series.stream_hashes,
        "improvement": {
            "distributed": {
                str(t0): {k: _stats_doc(v) for k, v in block.items()}
                for t0, block in summary.distributed.items()
            },
            "central": {
                str(t0): {k: _stats_doc(v) for k, v in block.items()}
                for t0, block in summary.central.items()
            },
        },
        "noise": {
            "final_mse": series.noise[-1]["noise_mse_est"] if series.noise else None,
            "final_limit_mse": series.noise[-1]["noise_mse_limit"] if series.noise else None,
        },
        "bandwidth": _bandwidth_summary(series),
    }
    summary_path = out / "summary.json"
    with summary_path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(summary_doc, f, indent=2, sort_keys=True)
        f.write("\n")

    paths = {"metrics": metrics_path, "summary": summary_path, "bandwidth": bandwidth_path}
    if series.trace is not None:
        trace_path = out / "trace.msgs"
        from .protocol import _to_doc

        with trace_path.open("w", encoding="utf-8", newline="\n") as f:
            for env in series.trace:
                doc = {
                    "tick": env.tick_sent,
                    "src": env.src,
                    "dst": env.dst,
                    "dir": env.direction,
                    "bytes": env.n_bytes,
                    "msg": _to_doc(env.msg),
                }
                f.write(json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n")
        paths["trace"] = trace_path
    return paths


def _bandwidth_summary(series: MetricSeries) -> dict:
    per_cav = [r for r in series.bandwidth if r["vehicle"] != -1]
    if not per_cav:
        return {}
    ul = float(np.mean([r["ul_kbps"] for r in per_cav]))
    dl = float(np.mean([r["dl_kbps"] for r in per_cav]))
    publish = float(np.mean([r["publish_dl_bytes"] for r in per_cav])) * 8.0 / 1000.0
    direct = float(np.mean([r["direct_share_bytes"] for r in per_cav])) * 8.0 / 1000.0
    return {
        "mean_ul_kbps_per_cav": ul,
        "mean_dl_kbps_per_cav": dl,
        "publish_dl_kbps_per_cav": publish,
        "direct_share_dl_kbps_per_cav": direct,
        "dl_ratio_direct_over_publish": (direct / publish) if publish > 0 else None,
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_SWEEP_KEYS = {
    "f_sub": lambda cfg, v: replace(cfg, f_sub=float(v)),
    "f_upl": lambda cfg, v: replace(cfg, f_upl=float(v)),
    "f_bdc": lambda cfg, v: replace(cfg, f_bdc=float(v)),
    "r_com": lambda cfg, v: replace(cfg, world=replace(cfg.world, comm_range=float(v))),
    "seed": lambda cfg, v: replace(cfg, world=replace(cfg.world, seed=int(v))),
    "n_cavs": lambda cfg, v: replace(cfg, world=replace(cfg.world, n_cavs=int(v))),
    "n_normal": lambda cfg, v: replace(cfg, world=replace(cfg.world, n_normal=int(v))),
    "duration": lambda cfg, v: replace(cfg, duration=float(v)),
}


def apply_override(config: RunConfig, key: str, value) -> RunConfig:
    if key not in _SWEEP_KEYS:
        raise ConfigError(f"unknown sweep parameter {key!r}; known: {sorted(_SWEEP_KEYS)}")
    return _SWEEP_KEYS[key](config, value)


def sweep(config: RunConfig, varies: dict[str, list], out_root: str | Path) -> list[Path]:
    """Run the cartesian product of overrides, one output directory per cell."""
    keys = sorted(varies)
    cells: list[list[tuple[str, object]]] = [[]]
    for key in keys:
        cells = [cell + [(key, v)] for cell in cells for v in varies[key]]
    out_dirs = []
    for cell in cells:
        cfg = config
        for key, value in cell:
            cfg = apply_override(cfg, key, value)
        name = "_".join(f"{k}-{v:g}" if isinstance(v, float) else f"{k}-{v}" for k, v in cell)
        cell_dir = Path(out_root) / (name or "base")
        series = run_scenario(cfg)
        valid_t0s = [t0 for t0 in cfg.t0s if (t0 + 1.0) * cfg.world.f_sim <= series.ticks]
        emit(series, summarize(series, valid_t0s), cell_dir, cfg)
        out_dirs.append(cell_dir)
    return out_dirs
