"""OS memory layer: page allocation through a FILO frame cache, per-process
virtual pages, heap/stack placement and the attacker-visible hammer syscall.

Processes only ever see virtual page numbers. Physical frames are reachable
through :meth:`Machine.virt_to_phys`, which is meant for test audits and can
be locked.
"""

from __future__ import annotations

import heapq
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dram import PAGE_BYTES, BankWindow, Direction, Dram, HammerConfig, fill_bytes

log = logging.getLogger(__name__)

HEAP_ALIGN = 16
STACK_ALIGN = 16


class OutOfMemory(MemoryError):
    pass


class AllocationError(ValueError):
    """Double free, foreign page or other misuse of the page API."""


class PlacementError(ValueError):
    pass


class PrivilegeError(PermissionError):
    pass


class PageFrameCache:
    """Bounded stack of recently freed frames."""

    def __init__(self, capacity: int = 512):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._stack: list[int] = []
        self._members: set[int] = set()

    def push(self, frame: int) -> bool:
        """Returns False (and keeps nothing) when the cache is full."""
        if frame in self._members:
            raise AllocationError(f"frame {frame} already cached")
        if len(self._stack) >= self.capacity:
            return False
        self._stack.append(frame)
        self._members.add(frame)
        return True

    def pop(self) -> int | None:
        if not self._stack:
            return None
        f = self._stack.pop()
        self._members.discard(f)
        return f

    def __len__(self):
        return len(self._stack)

    def __contains__(self, frame):
        return frame in self._members

    def __iter__(self):
        """Most recently pushed first."""
        return iter(reversed(self._stack))


class PageAllocator:
    """Frame cache in front of an ordered free pool.

    The pool starts as every frame in ascending order; cache overflow spills
    back into it, so later pool allocations may pick those frames up again.
    """

    def __init__(self, n_frames: int, cache_capacity: int = 512):
        self.n_frames = n_frames
        self.cache = PageFrameCache(cache_capacity)
        self._pool = list(range(n_frames))  # sorted list is a valid heap
        self._in_pool = set(self._pool)
        self._used: set[int] = set()

    def alloc(self) -> int:
        f = self.cache.pop()
        if f is None:
            if not self._pool:
                raise OutOfMemory("no free frames left")
            f = heapq.heappop(self._pool)
            self._in_pool.discard(f)
        self._used.add(f)
        return f

    def free(self, frame: int) -> None:
        if frame not in self._used:
            raise AllocationError(f"frame {frame} is not allocated")
        self._used.discard(frame)
        if not self.cache.push(frame):
            heapq.heappush(self._pool, frame)
            self._in_pool.add(frame)

    @property
    def n_free(self) -> int:
        return len(self.cache) + len(self._pool)


@dataclass(frozen=True)
class ObservedFlip:
    vpage: int
    bit_offset: int
    direction: Direction


@dataclass(frozen=True)
class AslrPolicy:
    enabled: bool = True
    stack_offset_granularity: int = STACK_ALIGN
    heap_alignment: int = HEAP_ALIGN
    low_bits: int = 0x8  # fixed low address bits of the variable
    fixed_offset: int = 0x7c8  # used when randomization is off

    def __post_init__(self):
        if self.stack_offset_granularity != STACK_ALIGN or self.heap_alignment != HEAP_ALIGN:
            raise ValueError("stack and heap granularity are fixed at 16 bytes")
        if not 0 <= self.low_bits < STACK_ALIGN:
            raise ValueError("low_bits must be in [0, 16)")
        if self.fixed_offset % STACK_ALIGN != self.low_bits:
            raise ValueError("fixed_offset must agree with low_bits mod 16")


def round_up16(n: int) -> int:
    return (n + HEAP_ALIGN - 1) // HEAP_ALIGN * HEAP_ALIGN


def heap_object_offset(heap_base: int, attacker_controlled_size: int) -> int:
    """Page offset of an object malloc'd right after an attacker-sized buffer."""
    if heap_base % HEAP_ALIGN:
        raise ValueError("heap base must be 16-byte aligned")
    if attacker_controlled_size < 0:
        raise ValueError("size must be >= 0")
    return (heap_base + round_up16(attacker_controlled_size)) % PAGE_BYTES


def aslr_place_stack_var(var_size: int, rng: np.random.Generator | int | None,
                         policy: AslrPolicy = AslrPolicy()) -> int:
    """Page offset of a stack variable; randomized in 16-byte slots that keep it in the page."""
    if var_size < 1 or var_size > PAGE_BYTES - policy.low_bits:
        raise ValueError("variable does not fit in a page")
    if not policy.enabled:
        if policy.fixed_offset + var_size > PAGE_BYTES:
            raise PlacementError("fixed offset leaves no room for the variable")
        return policy.fixed_offset
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_slots = (PAGE_BYTES - policy.low_bits - var_size) // STACK_ALIGN + 1
    return STACK_ALIGN * int(rng.integers(n_slots)) + policy.low_bits


class Machine:
    """One simulated host: DRAM, allocator, processes and a simulated clock."""

    def __init__(self, dram: Dram, cache_capacity: int = 512, clear_on_free: bool = False,
                 privileged_view: bool = False, hammer_cost_s: float = 0.35,
                 conflict_false_positive: float = 0.0, seed: int | None = None,
                 trace: bool = False):
        self.dram = dram
        self.allocator = PageAllocator(dram.geometry.n_frames, cache_capacity)
        self.clear_on_free = clear_on_free
        self.privileged_view = privileged_view
        self.privileged_locked = False
        self.hammer_cost_s = hammer_cost_s
        self.conflict_false_positive = conflict_false_positive
        self.clock = 0.0
        self.trace_enabled = trace
        self.trace: list[str] = []
        self.processes: dict[int, Process] = {}
        self._owner: dict[int, tuple[int, int]] = {}
        self._resident: set[int] = set()
        self._next_pid = 1
        self._layouts: dict[tuple, HammerConfig | None] = {}
        self.rng = np.random.default_rng(seed)

    # -- processes ---------------------------------------------------------
    def spawn(self, name: str = "proc", resident: bool = False) -> "Process":
        """``resident`` marks a long-running server whose pages see resident flip rates."""
        p = Process(self, self._next_pid, name, resident)
        self.processes[p.pid] = p
        self._next_pid += 1
        return p

    def _log(self, op: str, pid: int, vpage: int, frame: int) -> None:
        if not self.trace_enabled:
            return
        line = f"{op} {pid} {vpage}"
        if self.privileged_view:
            line += f" {frame}"
        self.trace.append(line)

    def _alloc(self, proc: "Process", n: int) -> list[int]:
        if n < 1:
            raise ValueError("n must be >= 1")
        out = []
        for _ in range(n):
            frame = self.allocator.alloc()
            vpage = proc._next_vpage
            proc._next_vpage += 1
            proc._pages[vpage] = frame
            self._owner[frame] = (proc.pid, vpage)
            if proc.resident:
                self._resident.add(frame)
            self._log("alloc", proc.pid, vpage, frame)
            out.append(vpage)
        return out

    def _free(self, proc: "Process", vpages: Iterable[int]) -> None:
        for v in vpages:
            frame = proc._pages.pop(v, None)
            if frame is None:
                raise AllocationError(f"pid {proc.pid} does not own vpage {v}")
            del self._owner[frame]
            proc._epoch += 1
            self._resident.discard(frame)
            if self.clear_on_free:
                self.dram.memory[frame * PAGE_BYTES:(frame + 1) * PAGE_BYTES] = 0
            self.allocator.free(frame)
            self._log("free", proc.pid, v, frame)

    def virt_to_phys(self, pid: int, vpage: int) -> int:
        """Privileged page-table walk. Attack code must never need this."""
        if self.privileged_locked:
            raise PrivilegeError("virt_to_phys is locked on this machine")
        try:
            return self.processes[pid]._pages[vpage]
        except KeyError:
            raise AllocationError(f"pid {pid} has no vpage {vpage}") from None

    def advance(self, seconds: float) -> None:
        self.clock += seconds

    # -- timing side channel -------------------------------------------------
    def _conflict(self, fa: int, fb: int) -> bool:
        m = self.dram.mapping
        a, b = m.frame_location(fa), m.frame_location(fb)
        slow = a[0] == b[0] and a[1] != b[1]
        if not slow and self.conflict_false_positive > 0:
            slow = bool(self.rng.random() < self.conflict_false_positive)
        return slow

    def _row_index(self, frame: int) -> int:
        return self.dram.mapping.frame_location(frame)[1]

    # -- hammering ------------------------------------------------------------
    def _layout(self, frames: tuple[int, ...]) -> HammerConfig | None:
        cfg = self._layouts.get(frames, False)
        if cfg is not False:
            return cfg
        rows = defaultdict(set)
        m = self.dram.mapping
        for f in frames:
            bank, row, _ = m.frame_location(f)
            rows[bank].add(row)
        windows = []
        for bank in sorted(rows):
            agg = rows[bank]
            victims = tuple(sorted(r for r in {a + 1 for a in agg} if r not in agg and r + 1 in agg))
            if victims:
                windows.append(BankWindow(bank, tuple(sorted(agg)), victims))
        if windows:
            cfg = HammerConfig(max(2, max(len(rows[b]) for b in rows)), len(rows),
                               window_layout=tuple(windows))
        else:
            cfg = None
        if len(self._layouts) > 4096:
            self._layouts.clear()
        self._layouts[frames] = cfg
        return cfg

    def _hammer(self, proc: "Process", vpages: Sequence[int], fill: str) -> list[ObservedFlip]:
        key = tuple(vpages)
        hit = proc._hammer_cache.get(key)
        if hit is None or hit[0] != proc._epoch:
            try:
                frames = tuple(proc._pages[v] for v in key)
            except KeyError as e:
                raise AllocationError(f"pid {proc.pid} does not own vpage {e.args[0]}") from None
            if len(proc._hammer_cache) > 256:
                proc._hammer_cache.clear()
            hit = (proc._epoch, np.array(frames, dtype=np.int64), self._layout(frames))
            proc._hammer_cache[key] = hit
        _, frames, cfg = hit
        self.dram.frames[frames] = fill_bytes(fill)
        self.clock += self.hammer_cost_s
        if cfg is None:
            self.dram.sessions += 1
            return []
        plan, idx = self.dram.hammer_indices(cfg, self._resident, fill)
        out = []
        for i in idx:
            owner = self._owner.get(int(plan.frames[i]))
            if owner is not None and owner[0] == proc.pid:
                c = plan.cells[i]
                out.append(ObservedFlip(owner[1], c.page_bit, c.direction))
        return out


class Process:
    """Attacker- or victim-side view of memory: virtual pages only."""

    def __init__(self, machine: Machine, pid: int, name: str, resident: bool = False):
        self._machine = machine
        self.pid = pid
        self.name = name
        self.resident = resident
        self._pages: dict[int, int] = {}
        self._next_vpage = 0
        self._epoch = 0
        self._hammer_cache: dict[tuple, tuple] = {}

    @property
    def vpages(self) -> list[int]:
        return sorted(self._pages)

    @property
    def clock(self) -> float:
        return self._machine.clock

    def owns(self, vpage: int) -> bool:
        return vpage in self._pages

    def alloc_pages(self, n: int = 1) -> list[int]:
        return self._machine._alloc(self, n)

    def free_pages(self, vpages: Iterable[int]) -> None:
        self._machine._free(self, list(vpages))

    def exit(self) -> None:
        self.free_pages(sorted(self._pages, reverse=True))
        self._machine.processes.pop(self.pid, None)

    def _frame(self, vpage: int) -> int:
        try:
            return self._pages[vpage]
        except KeyError:
            raise AllocationError(f"pid {self.pid} does not own vpage {vpage}") from None

    def read_page(self, vpage: int) -> bytes:
        return self._machine.dram.read_page(self._frame(vpage) * PAGE_BYTES)

    def write_page(self, vpage: int, data: bytes) -> None:
        self._machine.dram.write_page(self._frame(vpage) * PAGE_BYTES, data)

    def write_pages(self, vpages: Sequence[int], data: np.ndarray) -> None:
        """Write ``data`` (shape ``(len(vpages), 4096)`` uint8) in one shot."""
        frames = [self._frame(v) for v in vpages]
        self._machine.dram.frames[frames] = data

    def read_bytes(self, vpage: int, offset: int, n: int) -> bytes:
        if offset < 0 or offset + n > PAGE_BYTES:
            raise ValueError("read crosses the page boundary")
        base = self._frame(vpage) * PAGE_BYTES + offset
        return self._machine.dram.memory[base:base + n].tobytes()

    def write_bytes(self, vpage: int, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > PAGE_BYTES:
            raise ValueError("write crosses the page boundary")
        base = self._frame(vpage) * PAGE_BYTES + offset
        self._machine.dram.memory[base:base + len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)

    def read_bit(self, vpage: int, bit_offset: int) -> int:
        b = self.read_bytes(vpage, bit_offset // 8, 1)[0]
        return (b >> (bit_offset % 8)) & 1

    def write_bit(self, vpage: int, bit_offset: int, value: int) -> None:
        b = self.read_bytes(vpage, bit_offset // 8, 1)[0]
        mask = 1 << (bit_offset % 8)
        self.write_bytes(vpage, bit_offset // 8, bytes([(b | mask) if value else (b & ~mask)]))

    def hammer(self, aggressor_vpages: Sequence[int], fill: str = "ones") -> list[ObservedFlip]:
        """Fill the aggressor pages with ``fill`` and run one hammer session on their rows.

        Only flips on this process's own pages are reported.
        """
        return self._machine._hammer(self, aggressor_vpages, fill)

    def row_conflict(self, va: int, vb: int) -> bool:
        """Timing probe: True when the two pages collide in one bank on different rows."""
        return self._machine._conflict(self._frame(va), self._frame(vb))

    def row_index(self, vpage: int) -> int:
        """Row number recovered from a reverse-engineered address function."""
        return self._machine._row_index(self._frame(vpage))


def place_heap_object(process: Process, attacker_controlled_size: int, object_size: int,
                      heap_base: int = 0) -> tuple[int, int]:
    """Allocate a heap page and return ``(vpage, start offset)`` for an object behind an attacker-sized buffer."""
    if object_size < 1:
        raise ValueError("object size must be >= 1")
    off = heap_object_offset(heap_base, attacker_controlled_size)
    if off + object_size > PAGE_BYTES:
        raise PlacementError(f"object of {object_size} bytes at {off:#x} crosses the page end")
    (vpage,) = process.alloc_pages(1)
    return vpage, off
