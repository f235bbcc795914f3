"""Star-topology message bus: m clients, one aggregation server.

Two backends with identical observable semantics:

* ``InprocBus`` -- synchronous lockstep exchange, the default.  A round is
  a post-all/complete barrier; aggregation happens when the barrier closes.
* ``TcpBus``    -- a real server thread behind localhost sockets speaking
  length-prefixed binary frames, demonstrating that the protocol is
  genuinely message-passing.  Payloads cross the wire as flat buffers;
  receivers reshape using shapes they already know, so frames never carry
  geometry.

Every scalar that crosses a link lands in the ``CommLedger`` (uplink and
downlink both), which the closed-form volume functions are checked against.
In encrypted mode the server half handles ``CipherMatrix`` payloads only
and owns no key material beyond public keys.
"""

import enum
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .crypto import CipherMatrix, PaillierPublicKey, cm_add

SERVER = -1

_HDR = struct.Struct("<QBiiiH")  # payload len, phase, src, dest, iteration, layer
_HELLO = 254
_ERROR = 250


class Phase(enum.IntEnum):
    SAMPLE_BCAST = 0
    FWD = 1
    BWD_Z = 2
    BWD_W = 3


class TransportError(Exception):
    pass


class ProtocolError(TransportError):
    """Duplicate or unexpected message inside a round."""


class RoundTimeoutError(TransportError):
    """Barrier never closed: at least one expected sender is missing."""


def payload_elements(payload) -> int:
    if isinstance(payload, CipherMatrix):
        return int(np.prod(payload.shape)) if payload.shape else len(payload.data)
    arr = np.asarray(payload)
    return int(arr.size)


@dataclass(frozen=True)
class Message:
    src: int
    dest: int
    phase: Phase
    iteration: int
    layer: int
    payload: object = field(repr=False)
    scalar_count: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "scalar_count", payload_elements(self.payload))

    @property
    def encrypted(self) -> bool:
        return isinstance(self.payload, CipherMatrix)

    def round_key(self):
        return (int(self.phase), self.iteration, self.layer)


# ---------------------------------------------------------------------------
# ledgers


class CommLedger:
    """Exact per-(iteration, phase, layer) traffic totals.

    Rows accumulate scalars (plaintext elements), ciphertexts (encrypted
    elements), and message counts; ``rounds`` counts closed barriers per
    iteration.  Rows only ever grow within an iteration.
    """

    def __init__(self):
        self.rows = {}
        self.rounds = {}

    def record(self, msg: Message):
        key = (msg.iteration, int(msg.phase), msg.layer)
        row = self.rows.setdefault(key, [0, 0, 0])
        if msg.encrypted:
            row[1] += msg.scalar_count
        else:
            row[0] += msg.scalar_count
        row[2] += 1

    def round_closed(self, iteration: int):
        self.rounds[iteration] = self.rounds.get(iteration, 0) + 1

    def totals(self, iteration=None, phases=None) -> dict:
        out = {"scalars": 0, "ciphertexts": 0, "messages": 0}
        for (it, ph, _layer), (s, c, m) in self.rows.items():
            if iteration is not None and it != iteration:
                continue
            if phases is not None and ph not in {int(p) for p in phases}:
                continue
            out["scalars"] += s
            out["ciphertexts"] += c
            out["messages"] += m
        if iteration is None:
            out["rounds"] = sum(self.rounds.values())
        else:
            out["rounds"] = self.rounds.get(iteration, 0)
        return out

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,phase,layer,scalars,ciphertexts,messages\n")
            for (it, ph, layer) in sorted(self.rows):
                s, c, m = self.rows[(it, ph, layer)]
                fh.write(f"{it},{Phase(ph).name},{layer},{s},{c},{m}\n")


class MemoryLedger:
    """Peak cached-activation scalars and parameter scalars per client."""

    def __init__(self):
        self.peak_activations = {}
        self.param_scalars = {}

    def note_params(self, client: int, scalars: int):
        self.param_scalars[client] = scalars

    def note_activations(self, client: int, scalars: int):
        prev = self.peak_activations.get(client, 0)
        self.peak_activations[client] = max(prev, scalars)

    def activation_total(self) -> int:
        return sum(self.peak_activations.values())

    def param_total(self) -> int:
        return sum(self.param_scalars.values())


# ---------------------------------------------------------------------------
# closed-form volumes (per-layer accounting convention: uplink plus downlink,
# self-terms never transmitted, so every count vanishes at m = 1)


def formula_forward_layer(m: int, n_s: int, width: int) -> int:
    """One FWD (or BWD_Z) round: (m-1) n_S w uplink + n_S w downlink."""
    return m * n_s * width if m > 1 else 0


def formula_grad_layer(m: int, d_in: int, d_out: int) -> int:
    """One BWD_W round: m gradients up, m broadcasts down."""
    return 2 * m * d_in * d_out if m > 1 else 0


def formula_iteration(m: int, layer_dims: list, n_s: int) -> int:
    """Whole iteration, summed layerwise; equals 2 L m d (n_S + d) when
    every width is the same d."""
    total = 0
    for l in range(len(layer_dims) - 1):
        total += 2 * formula_forward_layer(m, n_s, layer_dims[l + 1])
        total += formula_grad_layer(m, layer_dims[l], layer_dims[l + 1])
    return total


def formula_params(m: int, layer_dims: list) -> int:
    per_client = sum(layer_dims[l] * layer_dims[l + 1]
                     for l in range(len(layer_dims) - 1))
    return m * per_client


def formula_activations(n_s: int, layer_dims: list) -> int:
    """Cached layer inputs across clients: sum_l n_S d^l, i.e. n_S L d."""
    return sum(n_s * layer_dims[l] for l in range(len(layer_dims) - 1))


def ledger_check(comm: CommLedger, mem: MemoryLedger, m: int,
                 layer_dims: list, n_s: int, iteration: int = 0) -> dict:
    """Measured-vs-formula comparison after one full training iteration.

    Traffic compares plaintext scalars plus ciphertext elements against
    the volume formula (an encrypted element carries exactly one scalar);
    the sample broadcast is metadata outside the paper's accounting and
    is excluded.  Equality is exact or the check fails.
    """
    t = comm.totals(iteration, phases=(Phase.FWD, Phase.BWD_Z, Phase.BWD_W))
    measured = t["scalars"] + t["ciphertexts"]
    formula = formula_iteration(m, layer_dims, n_s)
    act_measured = mem.activation_total()
    act_formula = formula_activations(n_s, layer_dims)
    par_measured = mem.param_total()
    par_formula = formula_params(m, layer_dims)
    return {
        "comm": {"measured": measured, "formula": formula,
                 "ok": measured == formula},
        "activation_memory": {"measured": act_measured, "formula": act_formula,
                              "ok": act_measured == act_formula},
        "param_memory": {"measured": par_measured, "formula": par_formula,
                         "ok": par_measured == par_formula},
        "ok": (measured == formula and act_measured == act_formula
               and par_measured == par_formula),
    }


# ---------------------------------------------------------------------------
# aggregation core shared by both backends


def _expected_pairs(phase: Phase, m: int):
    """(src, dest) pairs a round must contain; the server's barrier set."""
    if m == 1:
        return set()
    if phase in (Phase.SAMPLE_BCAST, Phase.BWD_W):
        return {(i, SERVER) for i in range(m)}
    return {(j, i) for j in range(m) for i in range(m) if i != j}


def _check_blind(msg: Message, encrypt: bool):
    # sample-id metadata is outside the threat model; matrices are not
    if encrypt and msg.phase != Phase.SAMPLE_BCAST and not msg.encrypted:
        raise ProtocolError(
            f"plaintext {Phase(msg.phase).name} payload on an encrypted bus "
            f"(src {msg.src})")


def _sum_payloads(payloads: list):
    if isinstance(payloads[0], CipherMatrix):
        acc = payloads[0]
        for p in payloads[1:]:
            acc = cm_add(acc, p)
        return acc
    acc = np.array(payloads[0], dtype=np.float64)
    for p in payloads[1:]:
        acc = acc + p
    return acc


def _aggregate_round(phase: Phase, msgs: list, m: int):
    """Returns {dest client: list of response Messages}.

    Messages are folded in sender order so the aggregate is bit-identical
    no matter how the barrier happened to fill (float addition is order
    sensitive; modular cipher addition is not, but uniformity is free).
    """
    msgs = sorted(msgs, key=lambda x: x.src)
    meta = {"phase": phase, "iteration": msgs[0].iteration,
            "layer": msgs[0].layer}
    out = {}
    if phase == Phase.SAMPLE_BCAST:
        # relay every client's id set to every client
        for i in range(m):
            out[i] = [Message(src=msg.src, dest=i, payload=msg.payload, **meta)
                      for msg in msgs]
    elif phase == Phase.BWD_W:
        total = _sum_payloads([msg.payload for msg in msgs])
        for i in range(m):
            out[i] = [Message(src=SERVER, dest=i, payload=total, **meta)]
    else:
        by_dest = {}
        for msg in msgs:
            by_dest.setdefault(msg.dest, []).append(msg.payload)
        for dest, parts in by_dest.items():
            total = _sum_payloads(parts)
            out[dest] = [Message(src=SERVER, dest=dest, payload=total, **meta)]
    return out


def _unpack_responses(phase: Phase, responses: list):
    if phase == Phase.SAMPLE_BCAST:
        return {msg.src: msg.payload for msg in responses}
    return responses[0].payload


class InprocBus:
    """Lockstep exchange: post all uplinks, then close the barrier.

    ``complete_round`` validates the posted set against the full
    expectation, runs the server aggregation, ledgers every link
    crossing, and hands each client its downlink payload.
    """

    def __init__(self, m: int, ledger: CommLedger = None,
                 encrypt: bool = False, timeout: float = 5.0):
        self.m = m
        self.ledger = ledger if ledger is not None else CommLedger()
        self.encrypt = encrypt
        self.timeout = timeout
        self._pending = {}

    def post(self, msg: Message):
        box = self._pending.setdefault(msg.round_key(), {})
        pair = (msg.src, msg.dest)
        if pair in box:
            raise ProtocolError(
                f"duplicate post {pair} in round {msg.round_key()}")
        _check_blind(msg, self.encrypt)
        box[pair] = msg

    def complete_round(self, phase: Phase, iteration: int, layer: int) -> dict:
        key = (int(phase), iteration, layer)
        box = self._pending.pop(key, {})
        want = _expected_pairs(phase, self.m)
        extra = set(box) - want
        if extra:
            raise ProtocolError(f"unexpected messages {sorted(extra)}")
        missing = want - set(box)
        if missing:
            raise RoundTimeoutError(
                f"round {key} barrier: missing senders {sorted(missing)}")
        if not want:
            return {}
        for msg in box.values():
            self.ledger.record(msg)
        responses = _aggregate_round(phase, list(box.values()), self.m)
        for dest, msgs in responses.items():
            for msg in msgs:
                self.ledger.record(msg)
        self.ledger.round_closed(iteration)
        return {dest: _unpack_responses(phase, msgs)
                for dest, msgs in responses.items()}

    def close(self):
        self._pending.clear()


# ---------------------------------------------------------------------------
# TCP backend


def _enc_payload(payload) -> tuple:
    """Returns (kind, bytes). Kind 0 = float64 array, 1 = ids, 2 = cipher."""
    if isinstance(payload, CipherMatrix):
        chunks = []
        for c in payload.data:
            raw = int(c).to_bytes((int(c).bit_length() + 7) // 8 or 1, "big")
            chunks.append(struct.pack("<I", len(raw)) + raw)
        return 2, b"".join(chunks)
    arr = np.asarray(payload)
    if arr.dtype.kind in "iu":
        return 1, np.ascontiguousarray(arr, dtype="<i8").tobytes()
    return 0, np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _dec_payload(kind: int, raw: bytes, pk: PaillierPublicKey, key_id):
    if kind == 1:
        return np.frombuffer(raw, dtype="<i8").copy()
    if kind == 0:
        return np.frombuffer(raw, dtype="<f8").copy()
    data, off = [], 0
    while off < len(raw):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        data.append(int.from_bytes(raw[off:off + ln], "big"))
        off += ln
    return CipherMatrix(shape=(len(data),), data=data, key_id=key_id, pk=pk)


def _send_frame(sock, phase: int, src: int, dest: int, iteration: int,
                layer: int, kind: int, raw: bytes):
    # the payload-kind byte rides in front of the payload itself so the
    # envelope stays exactly the documented 23-byte header
    body = bytes([kind]) + raw
    sock.sendall(_HDR.pack(len(body), phase, src, dest, iteration, layer) + body)


def _recv_exact(sock, size: int, deadline: float) -> bytes:
    buf = b""
    while len(buf) < size:
        sock.settimeout(max(0.001, deadline - time.monotonic()))
        try:
            chunk = sock.recv(size - len(buf))
        except socket.timeout:
            raise RoundTimeoutError("timed out waiting for a frame")
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return buf


def _recv_frame(sock, deadline: float):
    hdr = _recv_exact(sock, _HDR.size, deadline)
    length, phase, src, dest, iteration, layer = _HDR.unpack(hdr)
    body = _recv_exact(sock, length, deadline)
    return phase, src, dest, iteration, layer, body[0], body[1:]


class TcpBus:
    """The same protocol over localhost sockets and a server thread.

    One connection per client; frames are the spec'd binary format.  The
    server thread owns the barrier state and the ledger; it knows public
    keys only.  Geometry never crosses the wire, so received matrices come
    back flat and callers reshape.
    """

    def __init__(self, m: int, ledger: CommLedger = None,
                 encrypt: bool = False, timeout: float = 10.0,
                 pubkeys: dict = None, host: str = "127.0.0.1"):
        self.m = m
        self.ledger = ledger if ledger is not None else CommLedger()
        self.encrypt = encrypt
        self.timeout = timeout
        self.pubkeys = dict(pubkeys or {})  # dest id -> PaillierPublicKey
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, 0))
        srv.listen(m)
        self._listener = srv
        self._stop = threading.Event()
        self._conns = {}
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        self._socks = {}
        for cid in range(m):
            s = socket.create_connection(srv.getsockname(), timeout=timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            _send_frame(s, _HELLO, cid, SERVER, 0, 0, 1, b"")
            self._socks[cid] = s

    # -- client side ---------------------------------------------------------

    def post(self, msg: Message):
        _check_blind(msg, self.encrypt)
        kind, raw = _enc_payload(msg.payload)
        _send_frame(self._socks[msg.src], int(msg.phase), msg.src, msg.dest,
                    msg.iteration, msg.layer, kind, raw)

    def complete_round(self, phase: Phase, iteration: int, layer: int) -> dict:
        if self.m == 1:
            return {}
        deadline = time.monotonic() + self.timeout
        per_client = self.m if phase == Phase.SAMPLE_BCAST else 1
        out = {}
        for cid in range(self.m):
            frames = []
            for _ in range(per_client):
                ph, src, dest, _it, _ly, kind, raw = _recv_frame(
                    self._socks[cid], deadline)
                if ph == _ERROR:
                    raise RoundTimeoutError(raw.decode() or "server error")
                key_id = "grad" if phase == Phase.BWD_W else dest
                payload = _dec_payload(kind, raw, self.pubkeys.get(key_id),
                                       key_id)
                frames.append(Message(src=src, dest=dest, phase=Phase(ph),
                                      iteration=_it, layer=_ly,
                                      payload=payload))
            out[cid] = _unpack_responses(phase, frames)
        return out

    def close(self):
        self._stop.set()
        for s in self._socks.values():
            s.close()
        try:
            self._listener.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)

    # -- server side ---------------------------------------------------------

    def _serve(self):
        pending = {}       # round key -> {(src, dest): Message}
        started = {}       # round key -> first-post time
        bufs = {}
        while not self._stop.is_set():
            socks = list(self._conns.values())
            try:
                ready, _, _ = select.select([self._listener] + socks, [], [], 0.05)
            except OSError:
                return
            for sock in ready:
                if sock is self._listener:
                    try:
                        conn, _ = self._listener.accept()
                    except OSError:
                        return
                    conn.setblocking(False)
                    bufs[conn] = b""
                    self._conns[id(conn)] = conn
                    continue
                try:
                    chunk = sock.recv(1 << 20)
                except (OSError, ValueError):
                    chunk = b""
                if not chunk:
                    self._conns = {k: v for k, v in self._conns.items()
                                   if v is not sock}
                    bufs.pop(sock, None)
                    continue
                bufs[sock] = bufs.get(sock, b"") + chunk
                self._drain(sock, bufs, pending, started)
            self._expire(pending, started)

    def _drain(self, sock, bufs, pending, started):
        while True:
            buf = bufs[sock]
            if len(buf) < _HDR.size:
                return
            length, phase, src, dest, iteration, layer = _HDR.unpack(
                buf[:_HDR.size])
            if len(buf) < _HDR.size + length:
                return
            body = buf[_HDR.size:_HDR.size + length]
            bufs[sock] = buf[_HDR.size + length:]
            if phase == _HELLO:
                self._client_socks = getattr(self, "_client_socks", {})
                self._client_socks[src] = sock
                continue
            kind, raw = body[0], body[1:]
            key_id = "grad" if phase == Phase.BWD_W else dest
            payload = _dec_payload(kind, raw, self.pubkeys.get(key_id), key_id)
            msg = Message(src=src, dest=dest, phase=Phase(phase),
                          iteration=iteration, layer=layer, payload=payload)
            key = msg.round_key()
            box = pending.setdefault(key, {})
            if (src, dest) in box:
                self._fail_round(key, pending, started,
                                 f"duplicate post ({src}, {dest})")
                continue
            try:
                _check_blind(msg, self.encrypt)
            except ProtocolError as exc:
                self._fail_round(key, pending, started, str(exc))
                continue
            box[(src, dest)] = msg
            started.setdefault(key, time.monotonic())
            if set(box) == _expected_pairs(Phase(phase), self.m):
                self._finish(key, box)
                pending.pop(key, None)
                started.pop(key, None)

    def _finish(self, key, box):
        phase, iteration, layer = Phase(key[0]), key[1], key[2]
        for msg in box.values():
            self.ledger.record(msg)
        responses = _aggregate_round(phase, list(box.values()), self.m)
        for dest, msgs in responses.items():
            for msg in msgs:
                self.ledger.record(msg)
        self.ledger.round_closed(iteration)
        for dest, msgs in responses.items():
            sock = self._client_socks[dest]
            for msg in msgs:
                kind, raw = _enc_payload(msg.payload)
                _send_frame(sock, int(msg.phase), msg.src, msg.dest,
                            msg.iteration, msg.layer, kind, raw)

    def _fail_round(self, key, pending, started, text: str):
        pending.pop(key, None)
        started.pop(key, None)
        for sock in getattr(self, "_client_socks", {}).values():
            try:
                _send_frame(sock, _ERROR, SERVER, SERVER, key[1], key[2], 1,
                            text.encode())
            except OSError:
                pass

    def _expire(self, pending, started):
        now = time.monotonic()
        stale = [k for k, t0 in started.items() if now - t0 > self.timeout]
        for key in stale:
            self._fail_round(key, pending, started,
                             f"round {key} barrier timed out")


def transport_backend(mode: str, m: int, **kw):
    """Bus factory; ``inproc`` is the default the acceptance suite uses."""
    if mode == "inproc":
        return InprocBus(m, **kw)
    if mode in ("tcp", "multiprocess-tcp"):
        return TcpBus(m, **kw)
    raise ValueError(f"unknown transport backend {mode!r}")
