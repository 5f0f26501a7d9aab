"""The four-stage noise-estimation service and its wire format.

Stages: sensor-data uploading, noise publishing, client registration and
subscription.  Messages travel over an in-process bus with a configurable
constant latency (default 0 ticks) and are encoded as canonical JSON
lines, which keeps bandwidth accounting byte-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, DecodeError
from .fusion import floor_spd
from .noise_estimation import EdgeNoiseEstimator, NoiseStepRecord, WindowConfig
from .sensing import Detection, ObjectList
from .tracking import MultiTargetFilter, NoiseLookup

# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Register:
    token: int


@dataclass(frozen=True)
class RegisterAck:
    assigned: int


@dataclass(frozen=True)
class Upload:
    """One CAV's object list: (local detection id, px, py) triples."""

    vehicle: int
    tick: int
    detections: tuple[tuple[int, float, float], ...]


@dataclass(frozen=True)
class Subscribe:
    vehicle: int


@dataclass(frozen=True)
class NoisePublish:
    """Full noise table: (vehicle, r11, r12, r22) per registered CAV."""

    tick: int
    entries: tuple[tuple[int, float, float, float], ...]


@dataclass(frozen=True)
class TrackShare:
    """Full fused track list (mean + covariance upper triangle per track).

    Not part of the service itself: this is the direct-sharing baseline
    the bandwidth evaluation compares against, encoded with the same codec.
    """

    tick: int
    tracks: tuple[tuple[int, tuple[float, ...]], ...]  # (track id, 4 state + 10 cov floats)


@dataclass(frozen=True)
class Reject:
    """Protocol error reply; the offending message had no effect."""

    reason: str


Message = Union[Register, RegisterAck, Upload, Subscribe, NoisePublish, TrackShare, Reject]

# ---------------------------------------------------------------------------
# Codec: canonical JSON lines, UTF-8, fixed field order, one message per line
# ---------------------------------------------------------------------------

_TYPE_TAGS = {
    Register: "register",
    RegisterAck: "register_ack",
    Upload: "upload",
    Subscribe: "subscribe",
    NoisePublish: "noise_publish",
    TrackShare: "track_share",
    Reject: "reject",
}


def _to_doc(msg: Message) -> dict:
    if isinstance(msg, Register):
        return {"type": "register", "token": msg.token}
    if isinstance(msg, RegisterAck):
        return {"type": "register_ack", "assigned": msg.assigned}
    if isinstance(msg, Upload):
        return {
            "type": "upload",
            "vehicle": msg.vehicle,
            "tick": msg.tick,
            "detections": [[i, float(x), float(y)] for i, x, y in msg.detections],
        }
    if isinstance(msg, Subscribe):
        return {"type": "subscribe", "vehicle": msg.vehicle}
    if isinstance(msg, NoisePublish):
        return {
            "type": "noise_publish",
            "tick": msg.tick,
            "entries": [[v, float(a), float(b), float(c)] for v, a, b, c in msg.entries],
        }
    if isinstance(msg, TrackShare):
        return {
            "type": "track_share",
            "tick": msg.tick,
            "tracks": [[tid, [float(v) for v in vals]] for tid, vals in msg.tracks],
        }
    if isinstance(msg, Reject):
        return {"type": "reject", "reason": msg.reason}
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """One canonical JSON line (UTF-8, fixed field order, trailing newline)."""
    doc = _to_doc(msg)
    return (json.dumps(doc, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def _field(doc: dict, name: str, line: bytes):
    if name not in doc:
        raise DecodeError(f"missing field '{name}'", 0)
    return doc[name]


def decode(data: bytes) -> Message:
    """Inverse of :func:`encode`; raises :class:`DecodeError` with a byte offset."""
    text = data.decode("utf-8", errors="replace")
    if text.endswith("\n"):
        text = text[:-1]
    if "\n" in text:
        raise DecodeError("expected exactly one message line", text.index("\n"))
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"malformed JSON: {exc.msg}", exc.pos) from exc
    if not isinstance(doc, dict):
        raise DecodeError("message must be a JSON object", 0)
    tag = doc.get("type")
    try:
        if tag == "register":
            return Register(token=int(_field(doc, "token", data)))
        if tag == "register_ack":
            return RegisterAck(assigned=int(_field(doc, "assigned", data)))
        if tag == "upload":
            dets = tuple(
                (int(i), float(x), float(y)) for i, x, y in _field(doc, "detections", data)
            )
            return Upload(
                vehicle=int(_field(doc, "vehicle", data)),
                tick=int(_field(doc, "tick", data)),
                detections=dets,
            )
        if tag == "subscribe":
            return Subscribe(vehicle=int(_field(doc, "vehicle", data)))
        if tag == "noise_publish":
            entries = tuple(
                (int(v), float(a), float(b), float(c))
                for v, a, b, c in _field(doc, "entries", data)
            )
            return NoisePublish(tick=int(_field(doc, "tick", data)), entries=entries)
        if tag == "track_share":
            tracks = tuple(
                (int(tid), tuple(float(v) for v in vals))
                for tid, vals in _field(doc, "tracks", data)
            )
            return TrackShare(tick=int(_field(doc, "tick", data)), tracks=tracks)
        if tag == "reject":
            return Reject(reason=str(_field(doc, "reason", data)))
    except (TypeError, ValueError) as exc:
        raise DecodeError(f"bad field content: {exc}", 0) from exc
    raise DecodeError(f"unknown message type {tag!r}", 0)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Tick-rate bookkeeping for the four service frequencies (Hz)."""

    f_sim: float
    f_bdc: float
    f_upl: float
    f_sub: float

    def validate(self) -> None:
        for name, f in (("f_bdc", self.f_bdc), ("f_upl", self.f_upl)):
            if not 0 < f <= self.f_sim:
                raise ConfigError(f"{name} must be in (0, f_sim], got {f}")
            if abs(self.f_sim / f - round(self.f_sim / f)) > 1e-9:
                raise ConfigError(f"{name}={f} is not a divisor of f_sim={self.f_sim} in ticks")
        if self.f_sub < 0:
            raise ConfigError(f"f_sub must be >= 0, got {self.f_sub}")
        if self.f_sub > 0:
            if self.f_sub > self.f_sim:
                raise ConfigError(f"f_sub must be <= f_sim, got {self.f_sub}")
            if abs(self.f_sim / self.f_sub - round(self.f_sim / self.f_sub)) > 1e-9:
                raise ConfigError(f"f_sub={self.f_sub} is not a divisor of f_sim in ticks")

    def period(self, f: float) -> int:
        return int(round(self.f_sim / f))

    def due(self, tick: int, f: float) -> bool:
        """True when the event at frequency ``f`` fires this tick.

        Events fire at ticks ``p-1, 2p-1, ...`` so a run of ``T`` seconds
        contains exactly ``floor(T*f)`` events.
        """
        if f <= 0:
            return False
        return (tick + 1) % self.period(f) == 0


# ---------------------------------------------------------------------------
# Bandwidth accounting
# ---------------------------------------------------------------------------


@dataclass
class BandwidthLedger:
    """Byte counters per vehicle and direction, bucketed per second."""

    f_sim: float
    totals: dict[tuple[int, str], int] = field(default_factory=dict)
    buckets: dict[tuple[int, int, str], int] = field(default_factory=dict)
    publish_buckets: dict[tuple[int, int], int] = field(default_factory=dict)
    baseline_buckets: dict[tuple[int, int], int] = field(default_factory=dict)
    edge_received: int = 0

    def second_of(self, tick: int) -> int:
        return int(tick // round(self.f_sim))

    def account(self, vehicle: int, direction: str, n_bytes: int, tick: int) -> None:
        if direction not in ("ul", "dl", "v2v"):
            raise ValueError(f"unknown direction {direction!r}")
        key = (vehicle, direction)
        self.totals[key] = self.totals.get(key, 0) + n_bytes
        bucket = (self.second_of(tick), vehicle, direction)
        self.buckets[bucket] = self.buckets.get(bucket, 0) + n_bytes

    def account_publish(self, vehicle: int, n_bytes: int, tick: int) -> None:
        key = (self.second_of(tick), vehicle)
        self.publish_buckets[key] = self.publish_buckets.get(key, 0) + n_bytes

    def account_baseline(self, vehicle: int, n_bytes: int, tick: int) -> None:
        key = (self.second_of(tick), vehicle)
        self.baseline_buckets[key] = self.baseline_buckets.get(key, 0) + n_bytes

    def kbps(self, second: int, vehicle: int, direction: str) -> float:
        return self.buckets.get((second, vehicle, direction), 0) * 8.0 / 1000.0


# ---------------------------------------------------------------------------
# Message bus
# ---------------------------------------------------------------------------

EDGE = -1  # bus address of the edge server


@dataclass(frozen=True)
class Envelope:
    tick_sent: int
    tick_due: int
    src: int
    dst: int
    direction: str
    msg: Message
    n_bytes: int
    payload: object = None  # simulation-side object ridealong (never on the wire)


class MessageBus:
    """Tick-synchronous delivery with constant latency and full accounting."""

    def __init__(self, ledger: BandwidthLedger, latency_ticks: int = 0, trace: bool = False):
        self.ledger = ledger
        self.latency = latency_ticks
        self.pending: list[Envelope] = []
        self.trace: list[Envelope] | None = [] if trace else None
        self.sent = 0
        self.delivered = 0

    @staticmethod
    def direction_of(src: int, dst: int) -> str:
        if dst == EDGE:
            return "ul"
        if src == EDGE:
            return "dl"
        return "v2v"

    def send(self, msg: Message, src: int, dst: int, tick: int, payload: object = None,
             n_bytes: int | None = None) -> None:
        direction = self.direction_of(src, dst)
        if n_bytes is None:
            n_bytes = len(encode(msg))
        env = Envelope(
            tick_sent=tick,
            tick_due=tick + self.latency,
            src=src,
            dst=dst,
            direction=direction,
            msg=msg,
            n_bytes=n_bytes,
            payload=payload,
        )
        self.pending.append(env)
        self.sent += 1
        vehicle = dst if direction == "dl" else src
        self.ledger.account(vehicle, direction, n_bytes, tick)
        if direction == "dl" and isinstance(msg, NoisePublish):
            self.ledger.account_publish(dst, n_bytes, tick)
        if direction == "ul":
            self.ledger.edge_received += n_bytes
        if self.trace is not None:
            self.trace.append(env)

    def deliver(self, tick: int) -> list[Envelope]:
        """All envelopes due at ``tick``, in deterministic send order."""
        due = [e for e in self.pending if e.tick_due <= tick]
        self.pending = [e for e in self.pending if e.tick_due > tick]
        self.delivered += len(due)
        return due


# ---------------------------------------------------------------------------
# Edge server
# ---------------------------------------------------------------------------


class EdgeServer:
    """Registration, upload caching, the noise-estimation step, publishing.

    Besides the service's own estimator it can run two reference central
    filters on the identical upload stream (fixed default noise and true
    noise), which the harness uses for the paired-baseline evaluation.
    """

    def __init__(
        self,
        dt: float,
        q: float,
        window_cfg: WindowConfig,
        default_R: np.ndarray,
        *,
        first_id: int = 0,
        oracle_association: bool = False,
        subtract_uncertainty: bool = False,
        truth_lookup=None,
        true_noise_for: NoiseLookup | None = None,
        area_side: float | None = None,
    ):
        self.dt = dt
        self.q = q
        self.default_R = np.asarray(default_R, dtype=float)
        self._next_id = first_id
        self.registered: set[int] = set()
        self.subscribers: set[int] = set()
        self.upload_cache: dict[tuple[int, int], ObjectList] = {}
        self._pending_ticks: set[int] = set()
        self.estimator = EdgeNoiseEstimator(
            dt,
            q,
            window_cfg,
            default_R,
            oracle_association=oracle_association,
            subtract_uncertainty=subtract_uncertainty,
            truth_lookup=truth_lookup,
            area_side=area_side,
        )
        self.fixed_tracker = MultiTargetFilter(
            dt=dt, q=q, oracle_association=oracle_association, area_side=area_side
        )
        self.limit_tracker = (
            MultiTargetFilter(dt=dt, q=q, oracle_association=oracle_association, area_side=area_side)
            if true_noise_for is not None
            else None
        )
        self.true_noise_for = true_noise_for

    # -- message handling ---------------------------------------------------

    def handle(self, msg: Message, tick: int) -> Message | None:
        """Process one inbound message, returning the reply if any."""
        if isinstance(msg, Register):
            assigned = self._next_id
            self._next_id += 1
            self.registered.add(assigned)
            self.estimator.register(assigned, tick)
            return RegisterAck(assigned=assigned)
        if isinstance(msg, Upload):
            if msg.vehicle not in self.registered:
                return Reject(reason=f"vehicle {msg.vehicle} is not registered")
            obj = _upload_to_object_list(msg)
            self.upload_cache[(msg.vehicle, msg.tick)] = obj
            self._pending_ticks.add(msg.tick)
            return None
        if isinstance(msg, Subscribe):
            if msg.vehicle not in self.registered:
                return Reject(reason=f"vehicle {msg.vehicle} is not registered")
            self.subscribers.add(msg.vehicle)
            return None
        return Reject(reason=f"unexpected message type {type(msg).__name__}")

    def ingest(self, env: Envelope, tick: int) -> Message | None:
        """Handle a delivered envelope, preferring its simulation payload.

        The payload carries the detections' true target identities for the
        evaluation-only baselines; the wire message alone is sufficient for
        the service itself (codec round-trips are exact).
        """
        reply = self.handle(env.msg, tick)
        if isinstance(env.msg, Upload) and isinstance(env.payload, ObjectList):
            if env.msg.vehicle in self.registered:
                self.upload_cache[(env.msg.vehicle, env.msg.tick)] = env.payload
        return reply

    # -- estimation ---------------------------------------------------------

    def pending_lists(self) -> list[ObjectList]:
        """Cached uploads awaiting processing, in (tick, vehicle) order."""
        return [
            self.upload_cache[(veh, t)]
            for t in sorted(self._pending_ticks)
            for veh in sorted(v for v, tk in self.upload_cache if tk == t)
        ]

    def process_pending(self) -> list[NoiseStepRecord]:
        """Run one estimation step per distinct pending upload tick."""
        records = []
        for t in sorted(self._pending_ticks):
            lists = [
                self.upload_cache[(veh, t)]
                for veh in sorted(v for v, tk in self.upload_cache if tk == t)
            ]
            if not lists:
                continue
            steps = self.estimator.tracker.step(t, lists, self.estimator.noise_for)
            records.append(self.estimator.step(t, steps))
            self.fixed_tracker.step(t, lists, lambda obs: self.default_R)
            if self.limit_tracker is not None:
                self.limit_tracker.step(t, lists, self.true_noise_for)
        self._pending_ticks.clear()
        self._prune_upload_cache()
        return records

    def _prune_upload_cache(self, keep: int = 4096) -> None:
        if len(self.upload_cache) > 2 * keep:
            newest = sorted(self.upload_cache, key=lambda k: k[1])[-keep:]
            self.upload_cache = {k: self.upload_cache[k] for k in newest}

    def publish_message(self, tick: int) -> NoisePublish:
        """The current noise table for every registered CAV."""
        entries = []
        for veh in sorted(self.registered):
            R = self.estimator.noise_for(veh)
            entries.append((veh, float(R[0, 0]), float(R[0, 1]), float(R[1, 1])))
        return NoisePublish(tick=tick, entries=tuple(entries))

    def track_share_message(self, tick: int) -> TrackShare:
        """Direct-sharing baseline: every confirmed central track, mean + cov."""
        tracks = []
        for track in sorted(self.estimator.tracker.confirmed(), key=lambda t: t.track_id):
            x = track.est.x
            P = track.est.P
            upper = [float(P[i, j]) for i in range(4) for j in range(i, 4)]
            tracks.append((track.track_id, tuple(float(v) for v in x) + tuple(upper)))
        return TrackShare(tick=tick, tracks=tuple(tracks))


def _upload_to_object_list(msg: Upload) -> ObjectList:
    detections = tuple(
        Detection(observer=msg.vehicle, target=-1, z=np.array([x, y]), tick=msg.tick)
        for _, x, y in msg.detections
    )
    return ObjectList(observer=msg.vehicle, tick=msg.tick, detections=detections)


# ---------------------------------------------------------------------------
# Vehicle agent
# ---------------------------------------------------------------------------


class VehicleAgent:
    """One CAV's protocol state machine and on-board estimator stacks.

    ``world_id`` is the simulation identity used for sensing; the durable
    protocol identity is assigned by the edge at registration.  Three
    filter stacks run on identical inputs, differing only in which noise
    covariance weights each observer: the subscribed estimates, the fixed
    default, or the ground truth.
    """

    def __init__(
        self,
        world_id: int,
        token: int,
        dt: float,
        q: float,
        default_R: np.ndarray,
        *,
        subscribe: bool = True,
        oracle_association: bool = False,
        true_noise_for: NoiseLookup | None = None,
        area_side: float | None = None,
    ):
        self.world_id = world_id
        self.token = token
        self.dt = dt
        self.q = q
        self.default_R = np.asarray(default_R, dtype=float)
        self.want_subscribe = subscribe
        self.assigned: int | None = None
        self._register_sent = False
        self._subscribe_sent = False
        self.noise_table: dict[int, np.ndarray] = {}
        self.tracker = MultiTargetFilter(
            dt=dt, q=q, oracle_association=oracle_association, area_side=area_side
        )
        self.fixed_tracker = MultiTargetFilter(
            dt=dt, q=q, oracle_association=oracle_association, area_side=area_side
        )
        self.limit_tracker = (
            MultiTargetFilter(dt=dt, q=q, oracle_association=oracle_association, area_side=area_side)
            if true_noise_for is not None
            else None
        )
        self.true_noise_for = true_noise_for

    # -- noise lookup for the subscribed stack -------------------------------

    def subscribed_noise_for(self, observer: int) -> np.ndarray:
        R = self.noise_table.get(observer)
        return R if R is not None else self.default_R

    # -- protocol phases ------------------------------------------------------

    def control_messages(self) -> list[Message]:
        """Registration (once) and subscription (once, after the ack)."""
        out: list[Message] = []
        if not self._register_sent:
            out.append(Register(token=self.token))
            self._register_sent = True
        elif self.assigned is not None and self.want_subscribe and not self._subscribe_sent:
            out.append(Subscribe(vehicle=self.assigned))
            self._subscribe_sent = True
        return out

    def receive(self, env: Envelope) -> None:
        msg = env.msg
        if isinstance(msg, RegisterAck):
            self.assigned = msg.assigned
        elif isinstance(msg, NoisePublish):
            for veh, r11, r12, r22 in msg.entries:
                self.noise_table[veh] = floor_spd(
                    np.array([[r11, r12], [r12, r22]]), 1e-9
                )
        # Data payloads (broadcast object lists) are pulled by the harness
        # from the envelope; Reject replies are ignored by design.

    def upload_message(self, obj: ObjectList) -> Upload | None:
        if self.assigned is None:
            return None
        detections = tuple(
            (k, float(d.z[0]), float(d.z[1])) for k, d in enumerate(obj.detections)
        )
        return Upload(vehicle=self.assigned, tick=obj.tick, detections=detections)

    def rekeyed_list(self, obj: ObjectList) -> ObjectList:
        """The object list under this CAV's protocol identity."""
        assert self.assigned is not None
        detections = tuple(
            Detection(observer=self.assigned, target=d.target, z=d.z, tick=d.tick)
            for d in obj.detections
        )
        return ObjectList(observer=self.assigned, tick=obj.tick, detections=detections)

    # -- filtering -------------------------------------------------------------

    def filter_step(self, tick: int, lists: list[ObjectList]) -> None:
        """Run the three on-board stacks on identical object lists."""
        self.tracker.step(tick, lists, self.subscribed_noise_for)
        self.fixed_tracker.step(tick, lists, lambda obs: self.default_R)
        if self.limit_tracker is not None:
            self.limit_tracker.step(tick, lists, self.true_noise_for)

    def step(
        self,
        tick: int,
        inbox: list[Envelope],
        obj: ObjectList,
        schedule: Schedule,
        neighbors: list[int],
    ) -> tuple[list[tuple[Message, int]], list]:
        """One full vehicle tick: ingest, register/subscribe, upload,
        broadcast, apply subscribed noise, filter.

        Returns ``(outbox, confirmed track estimates)`` where outbox entries
        are ``(message, destination bus address)``.  The run harness drives
        the same methods in phases instead, so that zero-latency broadcasts
        sent and received within one tick can meet in the middle; this
        composition serves direct protocol use and tests.
        """
        for env in inbox:
            self.receive(env)
        outbox: list[tuple[Message, int]] = [
            (msg, EDGE) for msg in self.control_messages()
        ]
        lists = [obj]
        if self.assigned is not None:
            keyed = self.rekeyed_list(obj)
            lists = [keyed]
            msg = self.upload_message(obj)
            if schedule.due(tick, schedule.f_upl):
                outbox.append((msg, EDGE))
            if schedule.due(tick, schedule.f_bdc):
                outbox.extend((msg, peer) for peer in neighbors)
        for env in inbox:
            if isinstance(env.payload, ObjectList) and env.payload.tick == tick:
                lists.append(env.payload)
        lists = [lists[0]] + sorted(lists[1:], key=lambda o: o.observer)
        self.filter_step(tick, lists)
        return outbox, [t.est for t in self.tracker.confirmed()]
