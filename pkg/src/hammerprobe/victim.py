"""A handshake server that signs with a key read from simulated memory.

Signing is a digest stub: the "public key" is a hash of the key bits and a
signature binds that hash to the transcript, so a signature made from
corrupted key bits never verifies against the real public key.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .memos import (AslrPolicy, Machine, Process, aslr_place_stack_var, heap_object_offset,
                    place_heap_object)

KEY_BITS = 256
KEY_BYTES = KEY_BITS // 8
VERIFY_FAULT_CODE = 0x1A8  # synthetic alert code for a failed self-check


class ChannelMode(enum.Enum):
    ERROR_CODE = "ErrorCode"
    SILENT_RETRY = "SilentRetry"
    RELEASE_FAULTY = "ReleaseFaultySignature"


class Status(enum.Enum):
    ESTABLISHED = "Established"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class Countermeasures:
    suppress_error_codes: bool = False
    dual_sign_constant_time: bool = False
    key_blinding: bool = False


@dataclass(frozen=True)
class VictimConfig:
    verify_after_sign: bool = True
    channel_mode: ChannelMode = ChannelMode.ERROR_CODE
    countermeasures: Countermeasures = Countermeasures()
    attacker_controlled_malloc_size: int = 0
    key_reload_policy: str = "per_connection"
    heap_base: int = 0x2A0
    key_location: str = "heap"
    aslr: AslrPolicy = AslrPolicy(enabled=False)
    base_latency: int = 1
    retry_cost: int = 1
    handshake_cost_s: float = 0.05

    def __post_init__(self):
        if self.key_reload_policy not in ("per_connection", "persistent"):
            raise ValueError(f"unknown key_reload_policy {self.key_reload_policy!r}")
        if self.key_location not in ("heap", "stack"):
            raise ValueError(f"unknown key_location {self.key_location!r}")


@dataclass(frozen=True)
class HandshakeOutcome:
    connection: int
    status: Status
    latency: int
    error_code: int | None = None
    signature: bytes | None = None
    verified_ok: bool = False


@dataclass(frozen=True)
class Message:
    connection: int
    direction: str  # "c2s" or "s2c"
    kind: str
    payload: bytes = b""


def fingerprint(key: bytes) -> bytes:
    return hashlib.sha256(b"pk" + key).digest()


def sign(key: bytes, transcript: bytes) -> bytes:
    return hashlib.sha256(fingerprint(key) + transcript).digest()


def verify(public: bytes, signature: bytes | None, transcript: bytes) -> bool:
    return signature is not None and hashlib.sha256(public + transcript).digest() == signature


def transcript_for(connection: int) -> bytes:
    return f"handshake/{connection}".encode()


def key_bit(key: bytes, i: int) -> int:
    """Bit ``i`` of a key stored LSB-first within each byte."""
    return (key[i // 8] >> (i % 8)) & 1


@dataclass
class _Resident:
    """Where one copy of the key lives on a page."""
    vpage: int
    offset: int  # byte offset within the page


class VictimServer:
    """The signing server process. Holds the canonical key; not for attacker code."""

    def __init__(self, machine: Machine, key: bytes, cfg: VictimConfig = VictimConfig(),
                 rng: np.random.Generator | None = None, name: str = "victim"):
        if len(key) != KEY_BYTES:
            raise ValueError("key must be 32 bytes")
        self.machine = machine
        self.key = bytes(key)
        self.public = fingerprint(self.key)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        self.name = name
        self.proc: Process | None = None
        self.copies: list[_Resident] = []
        self.mask: bytes | None = None
        self._mask_page: int | None = None
        self._secondary: list[int] = []
        self.malloc_size = cfg.attacker_controlled_malloc_size
        self.connections = 0
        self.messages: list[Message] = []
        self.outcomes: list[HandshakeOutcome] = []
        self.log_messages = True

    # -- lifecycle ---------------------------------------------------------
    @property
    def running(self) -> bool:
        return self.proc is not None

    def _key_offset(self) -> int:
        if self.cfg.key_location == "stack":
            return aslr_place_stack_var(KEY_BYTES, self.rng, self.cfg.aslr)
        return heap_object_offset(self.cfg.heap_base, self.malloc_size)

    def start(self, malloc_size: int | None = None) -> None:
        """Load the key: key page first, then any secondary pages."""
        if self.running:
            raise RuntimeError("victim already running")
        if malloc_size is not None:
            self.malloc_size = malloc_size
        proc = self.machine.spawn(self.name, resident=True)
        if self.cfg.key_location == "heap":
            vpage, off = place_heap_object(proc, self.malloc_size, KEY_BYTES, self.cfg.heap_base)
        else:
            off = self._key_offset()
            (vpage,) = proc.alloc_pages(1)
        self.proc = proc
        self.copies = [_Resident(vpage, off)]
        cm = self.cfg.countermeasures
        if cm.key_blinding:
            self.mask = self.rng.bytes(KEY_BYTES)
            (self._mask_page,) = proc.alloc_pages(1)
            proc.write_bytes(self._mask_page, 0, self.mask)
            self._secondary.append(self._mask_page)
        if cm.dual_sign_constant_time:
            (p2,) = proc.alloc_pages(1)
            self.copies.append(_Resident(p2, off))
            self._secondary.append(p2)
        stored = self._stored_form(self.key)
        for c in self.copies:
            proc.write_bytes(c.vpage, c.offset, stored)

    def stop(self) -> None:
        """Release secondary pages first and the key page last."""
        if not self.running:
            return
        proc = self.proc
        proc.free_pages(reversed(self._secondary))
        proc.free_pages([self.copies[0].vpage])
        proc.exit()
        self.proc = None
        self.copies = []
        self._secondary = []
        self.mask = None
        self._mask_page = None

    def restart(self, malloc_size: int | None = None) -> None:
        self.stop()
        self.start(malloc_size)

    def _stored_form(self, key: bytes) -> bytes:
        if self.mask is None:
            return key
        return bytes(a ^ b for a, b in zip(key, self.mask))

    # -- key access ---------------------------------------------------------
    def _read_key(self, copy: int = 0) -> bytes:
        c = self.copies[copy]
        raw = self.proc.read_bytes(c.vpage, c.offset, KEY_BYTES)
        if self._mask_page is not None:
            mask = self.proc.read_bytes(self._mask_page, 0, KEY_BYTES)
            raw = bytes(a ^ b for a, b in zip(raw, mask))
        return raw

    @property
    def key_offset(self) -> int:
        return self.copies[0].offset

    def read_resident_bit(self, i: int) -> int:
        """Stored (possibly masked) bit ``i`` of the primary copy."""
        c = self.copies[0]
        return self.proc.read_bit(c.vpage, c.offset * 8 + i)

    def write_resident_bit(self, i: int, value: int) -> None:
        c = self.copies[0]
        self.proc.write_bit(c.vpage, c.offset * 8 + i, value)

    def corrupt_resident_bit(self, i: int) -> None:
        self.write_resident_bit(i, 1 - self.read_resident_bit(i))

    # -- protocol ---------------------------------------------------------------
    def _log(self, conn: int, direction: str, kind: str, payload: bytes = b"") -> None:
        if self.log_messages:
            self.messages.append(Message(conn, direction, kind, payload))

    def handle_handshake(self) -> HandshakeOutcome:
        if not self.running:
            raise RuntimeError("victim not running")
        cfg = self.cfg
        cm = cfg.countermeasures
        conn = self.connections
        self.connections += 1
        transcript = transcript_for(conn)
        self._log(conn, "c2s", "ClientHello+KeyShare")
        self._log(conn, "s2c", "ServerHello+KeyShare")
        latency = cfg.base_latency
        sig = sign(self._read_key(0), transcript)
        ok = verify(self.public, sig, transcript)
        if cm.dual_sign_constant_time:
            sig2 = sign(self._read_key(1), transcript)
            ok2 = verify(self.public, sig2, transcript)
            latency = cfg.base_latency + cfg.retry_cost
            if not ok and ok2:
                sig, ok = sig2, True
        if cfg.verify_after_sign and not ok:
            if cfg.channel_mode is ChannelMode.SILENT_RETRY and not cm.dual_sign_constant_time:
                sig = sign(self.key, transcript)
                latency += cfg.retry_cost
            elif cfg.channel_mode is ChannelMode.ERROR_CODE or cm.dual_sign_constant_time:
                code = None if cm.suppress_error_codes else VERIFY_FAULT_CODE
                self._log(conn, "s2c", "Alert" if code is not None else "Close")
                return self._finish(HandshakeOutcome(conn, Status.TERMINATED, latency, code))
        self._log(conn, "s2c", "CertificateVerify", sig)
        self._log(conn, "s2c", "Finished")
        return self._finish(HandshakeOutcome(conn, Status.ESTABLISHED, latency, None, sig))

    def _finish(self, out: HandshakeOutcome) -> HandshakeOutcome:
        self.machine.advance(self.cfg.handshake_cost_s)
        if self.cfg.key_reload_policy == "per_connection":
            self.restart()
        return out

    def connect(self) -> HandshakeOutcome:
        """Client side: run a handshake and check the signature against the public key."""
        out = self.handle_handshake()
        ok = out.status is Status.ESTABLISHED and verify(self.public, out.signature,
                                                           transcript_for(out.connection))
        out = HandshakeOutcome(out.connection, out.status, out.latency, out.error_code, out.signature, ok)
        if self.log_messages:
            self.outcomes.append(out)
        return out

    def export_messages(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["connection", "direction", "kind", "status", "latency"])
        by_conn = {o.connection: o for o in self.outcomes}
        for m in self.messages:
            o = by_conn.get(m.connection)
            w.writerow([m.connection, m.direction, m.kind,
                        "" if o is None else o.status.value, "" if o is None else o.latency])
        return out.getvalue()


class VictimEndpoint:
    """What the attacker can do to the victim: connect, and make it stop/start.

    Start/stop stand for actions the attacker can trigger from outside
    (crashing or reloading the service, opening the connection that makes it
    load its key); ``malloc_size`` is the attacker-influenced allocation that
    precedes the key object.
    """

    def __init__(self, server: VictimServer):
        self._server = server
        self.public_key = server.public
        self.config = server.cfg

    @property
    def running(self) -> bool:
        return self._server.running

    def connect(self) -> HandshakeOutcome:
        return self._server.connect()

    def start(self, malloc_size: int | None = None) -> None:
        self._server.start(malloc_size)

    def stop(self) -> None:
        self._server.stop()

    def restart(self, malloc_size: int | None = None) -> None:
        self._server.restart(malloc_size)


def random_key(rng: np.random.Generator) -> bytes:
    return rng.bytes(KEY_BYTES)
