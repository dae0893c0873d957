"""TCP deployment: sensing-device clients, the edge service and user clients.

Wire format (little-endian), one frame per message::

    u32  length of everything after this field
    4s   magic b"MIBF"
    u16  version
    u16  msg_type
    u32  sender_id
    u64  sample_id
    i32  snr_db_milli
    u8   rank
    u32  extents[rank]
    f32  payload[prod(extents)]

Channel impairment is applied by each receiver from the topology seed and
the frame's (sample_id, snr) metadata, using the same keyed draws as the
in-process evaluation, so a loopback run reproduces it bit for bit.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import LinkConfig
from .metrics import predict_labels, task_metric
from .models import Downstream, TaskDecoder, Upstream, decoder_forward
from .numerics import Tensor, count_ops, no_grad
from .pipeline import (WIRE_DTYPE, downlink_draw, edge_forward, encode_device, keyed_downstream_noise,
                       latent_eps, STAGE_LATENT_Z, uplink_draw)

log = logging.getLogger(__name__)

MAGIC = b"MIBF"
VERSION = 1
MAX_RANK = 8
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
USER_ID_BASE = 1 << 16

_HEAD = struct.Struct("<4sHHIQiB")
_LEN = struct.Struct("<I")


class MsgType(IntEnum):
    HELLO = 1
    FEATURE = 2
    BROADCAST = 3
    RESULT = 4
    BYE = 5


class ProtocolError(ValueError):
    pass


@dataclass
class Frame:
    msg_type: MsgType
    sender_id: int
    sample_id: int = 0
    snr_db_milli: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=WIRE_DTYPE))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.msg_type == other.msg_type and self.sender_id == other.sender_id
                and self.sample_id == other.sample_id and self.snr_db_milli == other.snr_db_milli
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())


def encode_frame(frame: Frame) -> bytes:
    payload = np.asarray(frame.payload, dtype="<f4")   # tobytes() is C-order; keeps rank 0
    if payload.ndim > MAX_RANK:
        raise ProtocolError(f"rank {payload.ndim} exceeds {MAX_RANK}")
    try:
        head = _HEAD.pack(MAGIC, VERSION, int(MsgType(frame.msg_type)), frame.sender_id, frame.sample_id,
                          frame.snr_db_milli, payload.ndim)
        dims = struct.pack(f"<{payload.ndim}I", *payload.shape)
    except (struct.error, ValueError) as exc:
        raise ProtocolError(f"unencodable frame: {exc}") from None
    body = head + dims + payload.tobytes()
    return _LEN.pack(len(body)) + body


def decode_frame(buf: bytes, max_size: int = DEFAULT_MAX_FRAME) -> Frame:
    """Parse one length-prefixed frame; anything malformed raises :class:`ProtocolError`."""
    if len(buf) < _LEN.size:
        raise ProtocolError("truncated length prefix")
    (length,) = _LEN.unpack_from(buf)
    if length > max_size:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_size}")
    if length != len(buf) - _LEN.size:
        raise ProtocolError(f"length prefix {length} != body of {len(buf) - _LEN.size} bytes")
    return _decode_body(memoryview(buf)[_LEN.size:])


def _decode_body(body) -> Frame:
    if len(body) < _HEAD.size:
        raise ProtocolError("truncated header")
    magic, version, mtype, sender, sample, snr, rank = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if rank > MAX_RANK:
        raise ProtocolError(f"rank {rank} exceeds {MAX_RANK}")
    off = _HEAD.size
    if len(body) < off + 4 * rank:
        raise ProtocolError("truncated extents")
    dims = struct.unpack_from(f"<{rank}I", body, off)
    off += 4 * rank
    n = 1
    for d in dims:
        n *= d
    if len(body) - off != 4 * n:
        raise ProtocolError(f"payload of {len(body) - off} bytes does not match extents {dims}")
    payload = np.frombuffer(body, dtype="<f4", count=n, offset=off).astype(WIRE_DTYPE).reshape(dims)
    return Frame(mtype, sender, sample, snr, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            if got:
                raise ProtocolError("connection closed mid-frame")
            return None
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_size: int = DEFAULT_MAX_FRAME) -> Frame | None:
    """Next frame from the socket, or None on a clean close between frames."""
    prefix = _recv_exact(sock, _LEN.size)
    if prefix is None:
        return None
    (length,) = _LEN.unpack(prefix)
    if length > max_size:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_size}")
    body = _recv_exact(sock, length) if length else b""
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return _decode_body(memoryview(body))


def send_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(encode_frame(frame))


def snr_to_milli(snr_db: float) -> int:
    return int(round(snr_db * 1000))


# ---------------------------------------------------------------- topology

@dataclass
class UserSpec:
    user_id: int
    kind: str
    downlink_snr_db: float = 10.0


@dataclass
class Topology:
    host: str = "127.0.0.1"
    port: int = 0
    device_ids: tuple = (0, 1, 2, 3)
    users: list[UserSpec] = field(default_factory=list)
    uplink_snr_db: tuple = (0.0, 0.0, 0.0, 0.0)
    uplink_rician_a: float = 1.0
    downlink_rician_b: float = 0.0
    equalize: bool = True
    noiseless: bool = False
    seed: int = 2024
    realization: int = 0
    stochastic: bool = True
    timeout_s: float = 5.0
    max_frame: int = DEFAULT_MAX_FRAME

    def __post_init__(self):
        self.users = [u if isinstance(u, UserSpec) else UserSpec(**u) for u in self.users]
        self.device_ids = tuple(int(d) for d in self.device_ids)
        self.uplink_snr_db = tuple(float(s) for s in self.uplink_snr_db)
        self.validate()

    def validate(self) -> None:
        # devices and users live in separate id spaces; on the wire users are offset by USER_ID_BASE
        for ids in (list(self.device_ids), [u.user_id for u in self.users]):
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate ids in {ids}")
        if self.device_ids != tuple(range(len(self.device_ids))):
            raise ValueError("device ids must be 0..N-1 (they index the view encoders)")
        if [u.user_id for u in self.users] != list(range(len(self.users))):
            raise ValueError("user ids must be 0..M-1 (they index the decoders)")
        if len(self.uplink_snr_db) != len(self.device_ids):
            raise ValueError("need one uplink SNR per device")
        for u in self.users:
            if snr_to_milli(u.downlink_snr_db) != u.downlink_snr_db * 1000:
                raise ValueError("downlink SNRs must be multiples of 0.001 dB to travel in frames")

    def check_models(self, up: Upstream | None = None, down: Downstream | None = None) -> None:
        if up is not None and up.arch.n_views != len(self.device_ids):
            raise ValueError("topology device count does not match the loaded encoders")
        if down is not None:
            if len(down.decoders) != len(self.users):
                raise ValueError("every user must map to a loaded decoder")
            for u, dec in zip(self.users, down.decoders):
                if dec.task.kind != u.kind:
                    raise ValueError(f"user {u.user_id} is {u.kind} but decoder is {dec.task.kind}")

    def links(self) -> LinkConfig:
        return LinkConfig(uplink_snr_db=self.uplink_snr_db, uplink_rician_a=self.uplink_rician_a,
                          downlink_snr_db=tuple(u.downlink_snr_db for u in self.users),
                          downlink_rician_b=self.downlink_rician_b, equalize=self.equalize,
                          noiseless_uplink=self.noiseless, noiseless_downlink=self.noiseless)

    @classmethod
    def for_models(cls, down: Downstream, downlink_snr_db: float | Sequence[float] = 10.0, **kw) -> "Topology":
        kinds = [d.task.kind for d in down.decoders]
        snrs = np.broadcast_to(np.asarray(downlink_snr_db, dtype=float), (len(kinds),))
        users = [UserSpec(m, k, float(s)) for m, (k, s) in enumerate(zip(kinds, snrs))]
        kw.setdefault("device_ids", tuple(range(down.arch.n_views)))
        kw.setdefault("uplink_snr_db", (0.0,) * down.arch.n_views)
        return cls(users=users, **kw)


def _connect(host: str, port: int, retries: int, delay: float) -> socket.socket:
    last = None
    for _ in range(max(1, retries)):
        try:
            return socket.create_connection((host, port), timeout=10.0)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"could not reach {host}:{port}: {last}")


# ---------------------------------------------------------------- clients

def run_sd_client(device_id: int, samples: Iterable[tuple[int, np.ndarray]], up: Upstream, topology: Topology,
                  retries: int = 20, retry_delay: float = 0.1) -> int:
    """Encode each (sample_id, view) and stream FEATURE frames to the edge; returns frames sent."""
    topology.check_models(up=up)
    sock = _connect(topology.host, topology.port, retries, retry_delay)
    sent = 0
    grid = (up.arch.feat_channels, up.arch.feat_grid, up.arch.feat_grid)
    snr = snr_to_milli(topology.uplink_snr_db[device_id])
    try:
        sock.settimeout(None)
        send_frame(sock, Frame(MsgType.HELLO, device_id))
        for sid, view in samples:
            eps = None
            if topology.stochastic:
                eps = latent_eps(topology.seed, topology.realization, sid, STAGE_LATENT_Z, device_id, grid)[None]
            with no_grad():
                e, _, _ = encode_device(up, device_id, np.asarray(view)[None], eps)
            send_frame(sock, Frame(MsgType.FEATURE, device_id, int(sid), snr, e.data[0].astype(WIRE_DTYPE)))
            sent += 1
        send_frame(sock, Frame(MsgType.BYE, device_id))
    finally:
        sock.close()
    return sent


@dataclass
class UserResult:
    sample_id: int
    user_id: int
    metric: float
    labels: np.ndarray


def result_payload(metric: float, labels: np.ndarray) -> np.ndarray:
    return np.concatenate([[metric], np.asarray(labels, dtype=float).ravel()]).astype(WIRE_DTYPE)


def run_user_client(user_id: int, decoder: TaskDecoder, topology: Topology,
                    ground_truth: Callable[[int], np.ndarray], retries: int = 20,
                    retry_delay: float = 0.1) -> list[UserResult]:
    """Receive broadcasts, apply the own downlink, decode and reply with RESULT frames."""
    spec = topology.users[user_id]
    if decoder.task.kind != spec.kind:
        raise ValueError(f"user {user_id} is {spec.kind} but decoder is {decoder.task.kind}")
    links = topology.links()
    sock = _connect(topology.host, topology.port, retries, retry_delay)
    wire_id = USER_ID_BASE + user_id
    out = []
    try:
        sock.settimeout(None)
        send_frame(sock, Frame(MsgType.HELLO, wire_id))
        while True:
            frame = read_frame(sock, topology.max_frame)
            if frame is None or frame.msg_type == MsgType.BYE:
                break
            if frame.msg_type != MsgType.BROADCAST:
                raise ProtocolError(f"user got unexpected {frame.msg_type.name}")
            o = frame.payload.reshape(1, -1)
            draw = downlink_draw(topology.seed, topology.realization, frame.sample_id, user_id, o.shape[1],
                                 frame.snr_db_milli / 1000.0, links)
            with no_grad():
                logits = decoder_forward(draw.apply(Tensor(o)), decoder).data
            labels = predict_labels(logits, decoder.task.kind)[0]
            metric = task_metric(labels, ground_truth(frame.sample_id), decoder.task.kind, decoder.task.num_classes)
            out.append(UserResult(frame.sample_id, user_id, metric, labels))
            send_frame(sock, Frame(MsgType.RESULT, wire_id, frame.sample_id, frame.snr_db_milli,
                                   result_payload(metric, labels)))
        send_frame(sock, Frame(MsgType.BYE, wire_id))
    finally:
        sock.close()
    return out


# ---------------------------------------------------------------- edge service

@dataclass
class ServiceReport:
    results: dict = field(default_factory=dict)          # (sample_id, user) -> payload
    dropped: list = field(default_factory=list)          # (sample_id, reason)
    broadcast_bytes: dict = field(default_factory=dict)  # (sample_id, user) -> payload bytes sent
    encode_ops: dict = field(default_factory=dict)       # sample_id -> flops of the edge encode
    frames_per_sample: dict = field(default_factory=dict)


class EdgeService:
    """Gathers N uplink features per sample, re-encodes once and broadcasts to all M users.

    One reader thread per peer feeds a single aggregation loop, so the models
    are only ever run from one thread.
    """

    def __init__(self, up: Upstream, down: Downstream, topology: Topology):
        topology.check_models(up, down)
        self.up, self.down, self.topo = up, down, topology
        self.links = topology.links()
        self.events: queue.Queue = queue.Queue()
        self.report = ServiceReport()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((topology.host, topology.port))
        self._listener.listen(len(topology.device_ids) + len(topology.users) + 4)
        self.port = self._listener.getsockname()[1]
        self._users: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._closing = threading.Event()

    # -- connection handling
    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn: socket.socket) -> None:
        conn.settimeout(None)
        try:
            while True:
                frame = read_frame(conn, self.topo.max_frame)
                if frame is None:
                    self.events.put(("closed", conn, None))
                    return
                self.events.put(("frame", conn, frame))
                if frame.msg_type == MsgType.BYE:
                    return
        except (ProtocolError, OSError) as exc:
            self.events.put(("error", conn, exc))

    # -- per-sample work
    def _process(self, sid: int, feats: dict[int, np.ndarray]) -> None:
        up, down, topo = self.up, self.down, self.topo
        k_u = up.arch.k_u(up.l_p)
        w = []
        for n in range(len(topo.device_ids)):
            e = feats[n].reshape(1, -1)
            if e.shape[1] != k_u:
                raise ProtocolError(f"device {n} sent {e.shape[1]} entries, expected {k_u}")
            draw = uplink_draw(topo.seed, topo.realization, sid, n, k_u, self.links)
            w.append(draw.apply(Tensor(e)))
        dn = keyed_downstream_noise(topo.seed, topo.realization, [sid], down, self.links, topo.stochastic)
        with no_grad(), count_ops() as ctr:
            streams, _, _ = edge_forward(down, w, up.l_p, dn.eps_s)
        self.report.encode_ops[sid] = ctr.flops
        payloads = [s.data[0].astype(WIRE_DTYPE) for s in streams]
        for m, spec in enumerate(topo.users):
            payload = payloads[down.user_stream[m]]
            frame = Frame(MsgType.BROADCAST, USER_ID_BASE - 1, sid, snr_to_milli(spec.downlink_snr_db), payload)
            self.report.broadcast_bytes[(sid, m)] = payload.tobytes()
            send_frame(self._users[m], frame)

    def serve(self) -> ServiceReport:
        """Run until every device and user has said BYE; returns what was exchanged."""
        threading.Thread(target=self._accept_loop, daemon=True).start()
        n_dev, n_users = len(self.topo.device_ids), len(self.topo.users)
        pending: dict[int, dict[int, np.ndarray]] = {}
        first_seen: dict[int, float] = {}
        ready: list[int] = []
        devices_done: set[int] = set()
        users_done: set[int] = set()
        bye_sent = False
        try:
            while len(users_done) < n_users:
                try:
                    kind, conn, frame = self.events.get(timeout=0.05)
                except queue.Empty:
                    kind = None
                if kind == "error":
                    log.error("peer error: %s", frame)
                elif kind == "frame":
                    self._on_frame(conn, frame, pending, first_seen, ready, devices_done, users_done)
                now = time.monotonic()
                waiting = [s for s in pending if s not in ready]
                for sid in waiting:
                    if now - first_seen[sid] > self.topo.timeout_s:
                        self._drop(sid, pending, "timeout")
                    elif len(devices_done) == n_dev:
                        self._drop(sid, pending, "missing view")
                if len(self._users) == n_users:
                    while ready:
                        sid = ready.pop(0)
                        self._process(sid, pending.pop(sid))
                    if len(devices_done) == n_dev and not pending and not bye_sent:
                        for m in range(n_users):
                            send_frame(self._users[m], Frame(MsgType.BYE, USER_ID_BASE - 1))
                        bye_sent = True
        finally:
            self.close()
        return self.report

    def _drop(self, sid, pending, reason) -> None:
        pending.pop(sid, None)
        self.report.dropped.append((sid, reason))
        log.error("sample %d dropped: %s", sid, reason)

    def _on_frame(self, conn, frame: Frame, pending, first_seen, ready, devices_done, users_done) -> None:
        sid, sender = frame.sample_id, frame.sender_id
        if frame.msg_type == MsgType.HELLO:
            if sender >= USER_ID_BASE:
                self._users[sender - USER_ID_BASE] = conn
        elif frame.msg_type == MsgType.FEATURE:
            if sid in self.report.encode_ops or any(s == sid for s, _ in self.report.dropped):
                log.warning("late feature for sample %d ignored", sid)
                return
            slot = pending.setdefault(sid, {})
            first_seen.setdefault(sid, time.monotonic())
            slot[sender] = frame.payload
            self.report.frames_per_sample[sid] = self.report.frames_per_sample.get(sid, 0) + 1
            if len(slot) == len(self.topo.device_ids):
                ready.append(sid)
        elif frame.msg_type == MsgType.RESULT:
            self.report.results[(sid, sender - USER_ID_BASE)] = frame.payload
        elif frame.msg_type == MsgType.BYE:
            if sender >= USER_ID_BASE:
                users_done.add(sender - USER_ID_BASE)
            else:
                devices_done.add(sender)

    def close(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for s in self._users.values():
            try:
                s.close()
            except OSError:
                pass


# ---------------------------------------------------------------- loopback

@dataclass
class LoopbackReport:
    service: ServiceReport
    user_results: dict[int, list[UserResult]]

    def predictions(self, user: int, sample_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.service.results[(sid, user)][1:] for sid in sample_ids])

    def result_bytes(self) -> bytes:
        """Every RESULT payload in (sample, user) order; identical across reruns."""
        return b"".join(self.service.results[k].tobytes() for k in sorted(self.service.results))


def run_loopback(up: Upstream, down: Downstream, topology: Topology, views: np.ndarray,
                 sample_ids: Sequence[int], ground_truth: Callable[[int, str], np.ndarray],
                 device_orders: dict[int, Sequence[int]] | None = None) -> LoopbackReport:
    """Start the edge service, N device clients and M user clients on localhost.

    ``views`` is indexed by sample id: ``views[sid, n]`` is device n's view.
    ``device_orders`` optionally permutes the order each device sends samples in.
    """
    service = EdgeService(up, down, topology)
    topo = Topology(**{**topology.__dict__, "port": service.port})
    out: dict = {}
    errors: list = []

    def guard(fn, key, *args):
        try:
            out[key] = fn(*args)
        except Exception as exc:  # surfaced after join
            errors.append((key, exc))

    threads = []
    for m, dec in enumerate(down.decoders):
        kind = dec.task.kind
        threads.append(threading.Thread(target=guard, args=(run_user_client, ("user", m), m, dec, topo,
                                                           lambda sid, k=kind: ground_truth(sid, k))))
    for n in topo.device_ids:
        order = list(sample_ids) if device_orders is None else list(device_orders.get(n, sample_ids))
        samples = [(sid, views[sid, n]) for sid in order]
        threads.append(threading.Thread(target=guard, args=(run_sd_client, ("sd", n), n, samples, up, topo)))
    for t in threads:
        t.start()
    report = service.serve()
    for t in threads:
        t.join(timeout=60)
    if errors:
        raise RuntimeError(f"loopback peers failed: {errors}")
    return LoopbackReport(report, {m: out[("user", m)] for m in range(len(down.decoders))})


def aggregate_metrics(report: LoopbackReport, down: Downstream, sample_ids: Sequence[int],
                      ground_truth: Callable[[int, str], np.ndarray]) -> list[float]:
    """Dataset-level metric per user from the returned labels (same definition as evaluate)."""
    out = []
    for m, dec in enumerate(down.decoders):
        t = dec.task
        shape = t.out_shape[-2:] if t.kind != "classification" else ()
        pred = report.predictions(m, sample_ids).reshape((len(sample_ids),) + tuple(shape)).astype(np.int64)
        gt = np.stack([ground_truth(sid, t.kind) for sid in sample_ids])
        out.append(task_metric(pred, gt, t.kind, t.num_classes))
    return out
