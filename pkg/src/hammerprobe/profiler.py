"""Offline flip profiling from an unprivileged process.

Bank grouping and row adjacency come from a row-conflict timing oracle; each
page in the victim rows of a hammer window is then profiled for a number of
iterations (random victim data, one all-ones pass and one all-zeros pass per
iteration) and classified from its per-offset flip counts.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dram import PAGE_BYTES, Direction
from .memos import Process

log = logging.getLogger(__name__)

DELTA_MIN = 10
SIGMA_MAX_UNSTABLE = 80
PROFILE_FILLS = ("ones", "zeros")


class ProfilingError(RuntimeError):
    pass


class PageClass(enum.Enum):
    RELIABLE = "Reliable"
    UNSTABLE = "Unstable"
    UNUSABLE = "Unusable"


def classify_counts(delta: int, sigma: int, tie: bool = False) -> PageClass:
    """Reliable beats Unstable when both rules hold; a tied maximum is never Reliable."""
    if delta >= DELTA_MIN:
        if delta >= sigma and not tie:
            return PageClass.RELIABLE
        if sigma <= SIGMA_MAX_UNSTABLE or tie:
            return PageClass.UNSTABLE
    return PageClass.UNUSABLE


@dataclass
class PageProfile:
    page_id: int
    config: str
    iterations: int = 200
    up: dict[int, int] = field(default_factory=dict)    # offset -> 0->1 count
    down: dict[int, int] = field(default_factory=dict)  # offset -> 1->0 count
    pattern: str = "+".join(PROFILE_FILLS)
    aggressors: tuple[int, ...] = ()
    events: list[tuple[int, int]] = field(default_factory=list, repr=False)  # (iteration, offset)

    @property
    def counts(self) -> dict[int, int]:
        out = Counter(self.up)
        out.update(self.down)
        return dict(out)

    @property
    def total(self) -> int:
        return sum(self.up.values()) + sum(self.down.values())

    @property
    def target_offset(self) -> int | None:
        c = self.counts
        if not c:
            return None
        best = max(c.values())
        return min(o for o, v in c.items() if v == best)

    @property
    def delta(self) -> int:
        c = self.counts
        return max(c.values()) if c else 0

    @property
    def sigma(self) -> int:
        return self.total - self.delta

    @property
    def tie(self) -> bool:
        c = self.counts
        return bool(c) and sum(1 for v in c.values() if v == self.delta) > 1

    @property
    def direction(self) -> Direction | None:
        t = self.target_offset
        if t is None:
            return None
        return Direction.UP if t in self.up else Direction.DOWN

    @property
    def page_class(self) -> PageClass:
        return classify_counts(self.delta, self.sigma, self.tie)

    def other_offsets(self) -> list[int]:
        t = self.target_offset
        return sorted(o for o in self.counts if o != t)

    def dense(self, direction: Direction) -> np.ndarray:
        """Full per-offset count vector for one direction."""
        out = np.zeros(PAGE_BYTES * 8, dtype=np.int64)
        src = self.up if direction is Direction.UP else self.down
        for o, v in src.items():
            out[o] = v
        return out

    def record(self, iteration: int, offset: int, direction: Direction) -> None:
        d = self.up if direction is Direction.UP else self.down
        d[offset] = d.get(offset, 0) + 1
        self.events.append((iteration, offset))

    @classmethod
    def from_summary(cls, page_id: int, target_offset: int, delta: int, sigma: int,
                     direction: Direction = Direction.UP, config: str = "", iterations: int = 200):
        """Rebuild a profile that has the given (target, delta, sigma) summary.

        The sigma mass is spread over other offsets in chunks smaller than delta
        so the target stays the unique maximum.
        """
        p = cls(page_id, config, iterations)
        store = p.up if direction is Direction.UP else p.down
        if delta:
            store[target_offset] = delta
        chunk = max(delta - 1, 1)
        off = 0
        left = sigma
        while left > 0:
            if off == target_offset:
                off += 1
            n = min(chunk, left)
            store[off] = n
            left -= n
            off += 1
        return p


def classify(profile: PageProfile) -> PageClass:
    return profile.page_class


# -- timing oracle and layout discovery ----------------------------------------

class RowConflictOracle:
    """Answers "slow or fast" for pairs of the process's own pages."""

    def __init__(self, process: Process):
        self.process = process
        self.calls = 0

    def conflict(self, va: int, vb: int) -> bool:
        self.calls += 1
        return self.process.row_conflict(va, vb)

    def row_index(self, va: int) -> int:
        return self.process.row_index(va)


def find_same_bank_chunks(oracle: RowConflictOracle, vpages: Sequence[int],
                          min_groups: int = 1) -> list[list[int]]:
    """Split pages into same-bank groups using only conflict probes.

    A page joins a group when it conflicts with a member on a different row.
    Pages that share a row with every member tried so far are retried once
    the groups have grown.
    """
    groups: list[list[int]] = []
    probes: list[dict[int, int]] = []  # per group: row -> one member page

    def try_join(p: int) -> bool:
        r = oracle.row_index(p)
        for g, members in enumerate(probes):
            other = next((m for row, m in members.items() if row != r), None)
            if other is None:
                continue
            if oracle.conflict(p, other):
                groups[g].append(p)
                members.setdefault(r, p)
                return True
        return False

    deferred = []
    for p in vpages:
        if try_join(p):
            continue
        r = oracle.row_index(p)
        if any(r in m and len(m) == 1 for m in probes):
            deferred.append(p)
            continue
        groups.append([p])
        probes.append({r: p})
    for p in deferred:
        if not try_join(p):
            groups.append([p])
            probes.append({oracle.row_index(p): p})
    if len(groups) < min_groups:
        raise ProfilingError(f"chunk spans {len(groups)} banks, need {min_groups}")
    return groups


def row_runs(rows: Iterable[int]) -> list[list[int]]:
    """Maximal runs of consecutive integers."""
    runs: list[list[int]] = []
    for r in sorted(set(rows)):
        if runs and r == runs[-1][-1] + 1:
            runs[-1].append(r)
        else:
            runs.append([r])
    return runs


@dataclass
class RowRun:
    group: int
    rows: list[int]
    pages: dict[int, list[int]]  # row -> vpages in that row

    def __len__(self):
        return len(self.rows)


def find_adjacent_rows(oracle: RowConflictOracle, group: Sequence[int], group_id: int = 0) -> list[RowRun]:
    by_row: dict[int, list[int]] = defaultdict(list)
    for p in group:
        by_row[oracle.row_index(p)].append(p)
    return [RowRun(group_id, run, {r: sorted(by_row[r]) for r in run}) for run in row_runs(by_row)]


# -- windows ----------------------------------------------------------------------

@dataclass(frozen=True)
class WindowBank:
    group: int
    attacker_rows: tuple[tuple[int, ...], ...]  # vpages per attacker row
    victim_rows: tuple[tuple[int, ...], ...]    # vpages per victim row


@dataclass(frozen=True)
class AttackWindow:
    banks: tuple[WindowBank, ...]
    n_attacker_rows: int

    @property
    def n_banks(self) -> int:
        return len(self.banks)

    @property
    def aggressor_pages(self) -> tuple[int, ...]:
        return tuple(p for b in self.banks for row in b.attacker_rows for p in row)

    @property
    def victim_pages(self) -> tuple[int, ...]:
        return tuple(p for b in self.banks for row in b.victim_rows for p in row)

    def neighbours(self) -> dict[int, tuple[int, ...]]:
        """Victim page -> pages of the two attacker rows that sandwich it."""
        out = {}
        for b in self.banks:
            for i, row in enumerate(b.victim_rows):
                agg = b.attacker_rows[i] + b.attacker_rows[i + 1]
                for p in row:
                    out[p] = agg
        return out


def build_windows(runs: Sequence[RowRun], n_attacker_rows: int, n_banks: int,
                  alignments: Sequence[int] = (0, 1)) -> list[AttackWindow]:
    """Tile the longest run of each bank group with A V A ... A windows.

    Groups are taken ``n_banks`` at a time (the last batch is topped up with
    groups already covered) and each batch is truncated to its shortest run.
    Consecutive windows share their edge attacker row, so alignments 0 and 1
    together put every inner row of a run in a victim position once.
    """
    R = n_attacker_rows
    if R < 2:
        raise ValueError("need at least 2 attacker rows")
    if len(runs) < n_banks:
        raise ProfilingError(f"only {len(runs)} bank groups available, need {n_banks}")
    span = 2 * R - 1
    step = span - 1
    batches = []
    for i in range(0, len(runs), n_banks):
        batch = list(runs[i:i + n_banks])
        if len(batch) < n_banks:
            batch += list(runs[: n_banks - len(batch)])
        batches.append(batch)
    windows = []
    for batch in batches:
        length = min(len(r) for r in batch)
        for a in alignments:
            start = a
            while start + span <= length:
                banks = []
                for run in batch:
                    rows = run.rows[start:start + span]
                    banks.append(WindowBank(
                        run.group,
                        tuple(tuple(run.pages[r]) for r in rows[0::2]),
                        tuple(tuple(run.pages[r]) for r in rows[1::2]),
                    ))
                windows.append(AttackWindow(tuple(banks), R))
                start += step
    return windows


# -- profiling --------------------------------------------------------------------

def profile_window(process: Process, window: AttackWindow, iterations: int = 200,
                   rng: np.random.Generator | None = None, config: str | None = None) -> dict[int, PageProfile]:
    """Profile every victim page of ``window``; returns a profile per page (flippy or not)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    label = config or f"{window.n_attacker_rows}x{window.n_banks}"
    victims = list(window.victim_pages)
    aggressors = list(window.aggressor_pages)
    neighbours = window.neighbours()
    profiles = {p: PageProfile(p, label, iterations, aggressors=neighbours[p]) for p in victims}
    # Victim data: a pool page XORed with a fresh random byte per page, so each
    # bit is an independent fair coin in every iteration without drawing a full
    # page of randomness per victim page.
    pool = rng.integers(0, 256, size=(max(2 * len(victims), 64), PAGE_BYTES), dtype=np.uint8)
    for it in range(iterations):
        pick = rng.integers(len(pool), size=len(victims))
        mask = rng.integers(0, 256, size=(len(victims), 1), dtype=np.uint8)
        data = pool[pick] ^ mask
        for fill in PROFILE_FILLS:
            process.write_pages(victims, data)
            for f in process.hammer(aggressors, fill):
                prof = profiles.get(f.vpage)
                if prof is not None:
                    prof.record(it, f.bit_offset, f.direction)
    return profiles


@dataclass
class ProfileRun:
    config: str
    profiles: dict[int, PageProfile]
    pages_profiled: int

    @property
    def flippy(self) -> list[PageProfile]:
        return [p for p in self.profiles.values() if p.total > 0]

    @property
    def area_mb(self) -> float:
        return self.pages_profiled * PAGE_BYTES / 2**20

    @property
    def density_per_mb(self) -> float:
        return len(self.flippy) / self.area_mb if self.pages_profiled else 0.0

    def class_counts(self) -> dict[PageClass, int]:
        c = Counter(p.page_class for p in self.flippy)
        return {k: c.get(k, 0) for k in PageClass}


def profile_region(process: Process, vpages: Sequence[int], n_attacker_rows: int, n_banks: int,
                   iterations: int = 200, rng: np.random.Generator | None = None,
                   oracle: RowConflictOracle | None = None) -> ProfileRun:
    """Discover layout of ``vpages`` and profile every page the windows reach."""
    oracle = oracle or RowConflictOracle(process)
    groups = find_same_bank_chunks(oracle, vpages, min_groups=n_banks)
    runs = []
    for gid, g in enumerate(groups):
        rr = find_adjacent_rows(oracle, g, gid)
        runs.append(max(rr, key=len))
    windows = build_windows(runs, n_attacker_rows, n_banks)
    label = f"{n_attacker_rows}x{n_banks}"
    profiles: dict[int, PageProfile] = {}
    for w in windows:
        for page, prof in profile_window(process, w, iterations, rng, label).items():
            profiles.setdefault(page, prof)
    log.info("profiled %d pages in %d windows (%s)", len(profiles), len(windows), label)
    return ProfileRun(label, profiles, len(profiles))


# -- statistics ---------------------------------------------------------------------

@dataclass
class ConvergenceStats:
    mean_target: np.ndarray
    var_target: np.ndarray
    mean_other: np.ndarray
    var_other: np.ndarray
    separation: np.ndarray


def running_separation(target: np.ndarray, other: np.ndarray) -> ConvergenceStats:
    """Running mean/variance of two per-iteration series and their standard-error separation."""
    target = np.asarray(target, dtype=float)
    other = np.asarray(other, dtype=float)
    if target.size < 2 or target.shape != other.shape:
        raise ValueError("need two equal-length series of at least 2 iterations")
    k = np.arange(1, target.size + 1)

    def run(x):
        m = np.cumsum(x) / k
        sq = np.cumsum(x * x)
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(k > 1, (sq - k * m * m) / np.maximum(k - 1, 1), 0.0)
        return m, np.maximum(v, 0.0)

    mt, vt = run(target)
    mo, vo = run(other)
    se = np.sqrt((vt + vo) / k)
    diff = mt - mo
    with np.errstate(invalid="ignore", divide="ignore"):
        sep = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
    return ConvergenceStats(mt, vt, mo, vo, sep)


def convergence_stats(profile: PageProfile) -> ConvergenceStats:
    """Per-iteration flips at the target offset vs the mean over the page's other flippy offsets."""
    n = profile.iterations
    t = profile.target_offset
    target = np.zeros(n)
    other = np.zeros(n)
    n_other = max(len(profile.other_offsets()), 1)
    for it, off in profile.events:
        if off == t:
            target[it] += 1
        else:
            other[it] += 1.0 / n_other
    return running_separation(target, other)


# -- victim-resident re-profiling ------------------------------------------------

@dataclass
class ResidentProfile:
    page_id: int
    probe_offset: int
    flips_source: int
    flips_sink: int
    iterations: int

    @property
    def suitable(self) -> bool:
        return self.flips_source > 0 and self.flips_sink == 0

    @property
    def rate(self) -> float:
        return self.flips_source / (len(PROFILE_FILLS) * self.iterations)


def profile_with_resident_victim(process: Process, aggressors: Sequence[int], probe_bit: int,
                                 direction: Direction, copy, iterations: int = 200,
                                 page_id: int = -1) -> ResidentProfile:
    """Hammer a page that holds a running copy of the victim's key.

    ``copy`` is the attacker's own instance of the victim program, already
    placed on the page, with ``probe_bit`` being the key bit that sits on the
    probe offset. The bit is set to the flip's source value and then to its
    sink value; each setting gets ``iterations`` rounds of both fills.
    """
    counts = {}
    for value in (direction.source, direction.sink):
        copy.write_resident_bit(probe_bit, value)
        n = 0
        for _ in range(iterations):
            for fill in PROFILE_FILLS:
                process.hammer(aggressors, fill)
                if copy.read_resident_bit(probe_bit) != value:
                    n += 1
                    copy.write_resident_bit(probe_bit, value)
        counts[value] = n
    return ResidentProfile(page_id, probe_bit, counts[direction.source], counts[direction.sink], iterations)


# -- profile store ------------------------------------------------------------------

STORE_FIELDS = ["page_id", "config", "pattern", "iterations", "target_offset", "direction",
                "delta", "sigma", "class", "counts"]


def _fmt_counts(p: PageProfile) -> str:
    parts = [f"{o}:u{v}" for o, v in sorted(p.up.items())] + [f"{o}:d{v}" for o, v in sorted(p.down.items())]
    return " ".join(sorted(parts, key=lambda s: int(s.split(":")[0])))


def dump_profiles(profiles: Iterable[PageProfile]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(STORE_FIELDS)
    for p in sorted(profiles, key=lambda p: p.page_id):
        w.writerow([p.page_id, p.config, p.pattern, p.iterations,
                    "" if p.target_offset is None else p.target_offset,
                    "" if p.direction is None else p.direction.value,
                    p.delta, p.sigma, p.page_class.value, _fmt_counts(p)])
    return out.getvalue()


def load_profiles(text: str) -> list[PageProfile]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(STORE_FIELDS) - set(rows[0]):
        raise ValueError("profile store is missing columns")
    out = []
    for r in rows:
        p = PageProfile(int(r["page_id"]), r["config"], int(r["iterations"]), pattern=r["pattern"])
        for item in r["counts"].split():
            off, val = item.split(":")
            (p.up if val[0] == "u" else p.down)[int(off)] = int(val[1:])
        out.append(p)
    return out
