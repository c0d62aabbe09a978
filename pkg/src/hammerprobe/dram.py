"""Synthetic DRAM: geometry, bank/row address mapping, cell store and flip response.

Flips are drawn per hammer session (one session stands for one 500K-activation
run), never per activation. Every flippy cell has exactly one direction and a
base probability that is scaled by the aggressor data pattern, an optional
per-bank-count effectiveness curve and, for frames owned by a running server
process, a residency factor.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAGE_BYTES = 4096
ROW_BYTES = 2 * PAGE_BYTES
PAGE_BITS = PAGE_BYTES * 8
ROW_BITS = ROW_BYTES * 8
COLUMN_BITS = 13  # log2(ROW_BYTES)

MODEL_FORMAT = "flipmodel v1"


class Direction(enum.Enum):
    UP = "0->1"
    DOWN = "1->0"

    @property
    def source(self) -> int:
        """Stored value a cell must hold for this flip to happen."""
        return 0 if self is Direction.UP else 1

    @property
    def sink(self) -> int:
        return 1 - self.source

    @classmethod
    def from_source(cls, bit: int) -> "Direction":
        return cls.UP if bit == 0 else cls.DOWN

    def flipped(self) -> "Direction":
        return Direction.DOWN if self is Direction.UP else Direction.UP


@dataclass(frozen=True)
class DramGeometry:
    n_banks: int
    rows_per_bank: int
    row_bytes: int = ROW_BYTES
    page_bits: int = PAGE_BITS

    def __post_init__(self):
        if self.n_banks < 1 or self.rows_per_bank < 1:
            raise ValueError("n_banks and rows_per_bank must be >= 1")
        if self.n_banks & (self.n_banks - 1):
            raise ValueError("n_banks must be a power of two")
        if self.row_bytes != ROW_BYTES:
            raise ValueError(f"row_bytes is fixed at {ROW_BYTES}")
        if self.page_bits != PAGE_BITS:
            raise ValueError(f"page_bits is fixed at {PAGE_BITS}")

    @property
    def size(self) -> int:
        return self.n_banks * self.rows_per_bank * self.row_bytes

    @property
    def n_frames(self) -> int:
        return self.size // PAGE_BYTES

    @property
    def bank_bits(self) -> int:
        return self.n_banks.bit_length() - 1

    @classmethod
    def for_size(cls, size_bytes: int, n_banks: int = 8) -> "DramGeometry":
        rows = size_bytes // (n_banks * ROW_BYTES)
        return cls(n_banks, max(rows, 1))


@dataclass(frozen=True)
class PhysAddr:
    value: int
    bank: int
    row: int
    page_half: int
    byte_offset: int

    @property
    def frame(self) -> int:
        return self.value // PAGE_BYTES


def _parity(x: int) -> int:
    return bin(x).count("1") & 1


class AddressMapping:
    """XOR-of-address-bits bank function with the row taken from the high bits.

    Bank bit ``i`` is the parity of ``addr & bank_masks[i]``. Each mask must
    contain exactly one bit from the bank-select field
    ``[COLUMN_BITS, row_shift)`` (distinct per mask); every other bit of the
    mask must be a row bit. That makes the mapping a bijection.
    """

    def __init__(self, geometry: DramGeometry, bank_masks: Sequence[int] | None = None):
        self.geometry = geometry
        nb = geometry.bank_bits
        self.row_shift = COLUMN_BITS + nb
        if bank_masks is None:
            bank_masks = [(1 << (COLUMN_BITS + i)) | (1 << (self.row_shift + i)) for i in range(nb)]
        if len(bank_masks) != nb:
            raise ValueError(f"need {nb} bank masks, got {len(bank_masks)}")
        select_field = ((1 << nb) - 1) << COLUMN_BITS
        seen = 0
        self._select_bits = []
        self._row_parts = []
        for m in bank_masks:
            sel = m & select_field
            if sel == 0 or sel & (sel - 1) or sel & seen:
                raise ValueError(f"bank mask {m:#x} needs one distinct bank-select bit")
            if m & ((1 << COLUMN_BITS) - 1):
                raise ValueError(f"bank mask {m:#x} must not use column bits")
            seen |= sel
            self._select_bits.append(sel.bit_length() - 1)
            self._row_parts.append(m & ~select_field)
        self.bank_masks = tuple(bank_masks)

    def decode(self, addr: int) -> PhysAddr:
        if not 0 <= addr < self.geometry.size:
            raise ValueError(f"address {addr:#x} out of range")
        bank = 0
        for i, m in enumerate(self.bank_masks):
            bank |= _parity(addr & m) << i
        return PhysAddr(
            value=addr,
            bank=bank,
            row=addr >> self.row_shift,
            page_half=(addr >> 12) & 1,
            byte_offset=addr & (PAGE_BYTES - 1),
        )

    def encode(self, bank: int, row: int, page_half: int = 0, byte_offset: int = 0) -> int:
        g = self.geometry
        if not (0 <= bank < g.n_banks and 0 <= row < g.rows_per_bank
                and page_half in (0, 1) and 0 <= byte_offset < PAGE_BYTES):
            raise ValueError("bank/row/half/offset out of range")
        base = row << self.row_shift
        for i, (sel, rowpart) in enumerate(zip(self._select_bits, self._row_parts)):
            raw = ((bank >> i) & 1) ^ _parity(base & rowpart)
            base |= raw << sel
        return base | (page_half << 12) | byte_offset

    def frame_location(self, frame: int) -> tuple[int, int, int]:
        a = self.decode(frame * PAGE_BYTES)
        return a.bank, a.row, a.page_half

    def frame_of(self, bank: int, row: int, page_half: int) -> int:
        return self.encode(bank, row, page_half) // PAGE_BYTES


def map_address(addr: int, geom: DramGeometry, mapping: AddressMapping | None = None):
    """Return ``(bank, row, page_half, byte_offset)`` for a physical address."""
    a = (mapping or AddressMapping(geom)).decode(addr)
    return a.bank, a.row, a.page_half, a.byte_offset


# -- aggressor patterns -------------------------------------------------------

def parse_pattern(desc: str) -> tuple[str, int]:
    if desc in ("ones", "zeros"):
        return desc, 0
    if desc.startswith("block:"):
        k = int(desc.split(":", 1)[1])
        if k < 1:
            raise ValueError(f"bad block size in {desc!r}")
        return "block", k
    raise ValueError(f"unknown pattern descriptor {desc!r}")


_FILL_CACHE: dict[tuple[str, int], np.ndarray] = {}


def fill_bytes(desc: str, n: int = PAGE_BYTES) -> np.ndarray:
    """Byte content of an aggressor page filled with ``desc`` (read-only, cached)."""
    arr = _FILL_CACHE.get((desc, n))
    if arr is None:
        arr = _fill_bytes(desc, n)
        arr.setflags(write=False)
        _FILL_CACHE[(desc, n)] = arr
    return arr


def _fill_bytes(desc: str, n: int) -> np.ndarray:
    kind, k = parse_pattern(desc)
    if kind == "ones":
        return np.full(n, 0xFF, dtype=np.uint8)
    if kind == "zeros":
        return np.zeros(n, dtype=np.uint8)
    bits = ((np.arange(n * 8) // k) % 2 == 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little")


# -- flip model ---------------------------------------------------------------

@dataclass
class FlipCell:
    bank: int
    row: int
    bit: int  # bit offset within the 8 KiB row, 0..65535
    direction: Direction
    base_prob: float
    pattern_response: dict[str, float] = field(default_factory=dict)
    resident_factor: float = 1.0

    @property
    def page_half(self) -> int:
        return self.bit // PAGE_BITS

    @property
    def page_bit(self) -> int:
        return self.bit % PAGE_BITS

    def multiplier(self, desc: str) -> float:
        return self.pattern_response.get(desc, 1.0)


class FlipModel:
    """Ground truth of which cells flip, in which direction and how often."""

    def __init__(self, cells: Iterable[FlipCell] = (), rng_seed: int = 0,
                 patterns: Sequence[str] = ("ones", "zeros"),
                 bank_response: Sequence[float] | None = None):
        self.rng_seed = rng_seed
        self.patterns = tuple(patterns)
        for p in self.patterns:
            parse_pattern(p)
        self.bank_response = tuple(bank_response) if bank_response else None
        self._rows: dict[tuple[int, int], dict[int, FlipCell]] = {}
        for c in cells:
            self.add(c)

    def add(self, cell: FlipCell) -> None:
        if not 0.0 <= cell.base_prob <= 1.0:
            raise ValueError("base_prob must be in [0, 1]")
        if not 0 <= cell.bit < ROW_BITS:
            raise ValueError("cell bit offset out of range")
        row = self._rows.setdefault((cell.bank, cell.row), {})
        old = row.get(cell.bit)
        if old is not None and old.direction is not cell.direction:
            raise ValueError(f"cell {cell.bank}/{cell.row}/{cell.bit} already has direction {old.direction.value}")
        row[cell.bit] = cell

    def cells_in_row(self, bank: int, row: int) -> list[FlipCell]:
        r = self._rows.get((bank, row))
        return [r[b] for b in sorted(r)] if r else []

    def cell(self, bank: int, row: int, bit: int) -> FlipCell | None:
        return self._rows.get((bank, row), {}).get(bit)

    def __iter__(self):
        for key in sorted(self._rows):
            yield from self.cells_in_row(*key)

    def __len__(self) -> int:
        return sum(len(r) for r in self._rows.values())

    def bank_multiplier(self, n_banks: int) -> float:
        if not self.bank_response:
            return 1.0
        idx = min(n_banks, len(self.bank_response)) - 1
        return self.bank_response[idx]

    def effective_prob(self, cell: FlipCell, desc: str, n_banks: int = 1, resident: bool = False) -> float:
        if desc not in self.patterns:
            raise ValueError(f"unknown pattern descriptor {desc!r}")
        p = cell.base_prob * cell.multiplier(desc) * self.bank_multiplier(n_banks)
        if resident:
            p *= cell.resident_factor
        return min(max(p, 0.0), 1.0)

    # serialization: one text record per flippy cell, floats via repr so the
    # round trip is exact.
    def dumps(self) -> str:
        out = io.StringIO()
        out.write(f"# {MODEL_FORMAT}\n")
        out.write(f"seed {self.rng_seed}\n")
        out.write("patterns " + " ".join(self.patterns) + "\n")
        if self.bank_response:
            out.write("bank_response " + " ".join(repr(x) for x in self.bank_response) + "\n")
        for c in self:
            mult = " ".join(f"{k}={v!r}" for k, v in sorted(c.pattern_response.items()))
            out.write(f"cell {c.bank} {c.row} {c.bit} {c.direction.value} {c.base_prob!r} "
                      f"{c.resident_factor!r}{(' ' + mult) if mult else ''}\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str) -> "FlipModel":
        lines = text.splitlines()
        if not lines or lines[0].strip() != f"# {MODEL_FORMAT}":
            raise ValueError("not a flip model record set")
        seed, patterns, bank_response, cells = 0, ("ones", "zeros"), None, []
        for ln in lines[1:]:
            parts = ln.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "seed":
                seed = int(parts[1])
            elif tag == "patterns":
                patterns = tuple(parts[1:])
            elif tag == "bank_response":
                bank_response = [float(x) for x in parts[1:]]
            elif tag == "cell":
                resp = dict((k, float(v)) for k, v in (p.split("=", 1) for p in parts[7:]))
                cells.append(FlipCell(int(parts[1]), int(parts[2]), int(parts[3]), Direction(parts[4]),
                                      float(parts[5]), resp, float(parts[6])))
            else:
                raise ValueError(f"unknown record {tag!r}")
        return cls(cells, rng_seed=seed, patterns=patterns, bank_response=bank_response)

    def __eq__(self, other):
        if not isinstance(other, FlipModel):
            return NotImplemented
        return self.dumps() == other.dumps()


def concave_bank_curve(peak: int = 8, max_banks: int = 16, drop: float = 0.3) -> tuple[float, ...]:
    """Per-bank-count multipliers rising to ``peak`` banks, then falling off."""
    out = []
    for b in range(1, max_banks + 1):
        if b <= peak:
            out.append(math.sqrt(b / peak))
        else:
            out.append(drop)
    return tuple(out)


# -- hammering ----------------------------------------------------------------

@dataclass(frozen=True)
class BankWindow:
    bank: int
    attacker_rows: tuple[int, ...]
    victim_rows: tuple[int, ...]


@dataclass(frozen=True)
class HammerConfig:
    n_attacker_rows: int
    n_banks: int
    activations: int = 500_000
    attacker_fill: str = "ones"
    window_layout: tuple[BankWindow, ...] = ()

    def __post_init__(self):
        if self.n_attacker_rows < 2:
            raise ValueError("need at least 2 attacker rows")
        if self.n_banks < 1:
            raise ValueError("need at least 1 bank")
        if self.activations <= 0:
            raise ValueError("activations must be positive")
        parse_pattern(self.attacker_fill)
        if self.window_layout and len(self.window_layout) > self.n_banks:
            raise ValueError("window layout spans more banks than configured")
        for w in self.window_layout:
            if set(w.attacker_rows) & set(w.victim_rows):
                raise ValueError(f"attacker and victim rows overlap in bank {w.bank}")

    @property
    def label(self) -> str:
        return f"{self.n_attacker_rows}x{self.n_banks}"

    def with_fill(self, fill: str) -> "HammerConfig":
        return HammerConfig(self.n_attacker_rows, self.n_banks, self.activations, fill, self.window_layout)


def alternating_layout(bank: int, first_row: int, n_attacker_rows: int) -> BankWindow:
    """A V A V ... A starting at ``first_row``."""
    attackers = tuple(first_row + 2 * i for i in range(n_attacker_rows))
    victims = tuple(first_row + 2 * i + 1 for i in range(n_attacker_rows - 1))
    return BankWindow(bank, attackers, victims)


@dataclass(frozen=True)
class FlipEvent:
    addr: PhysAddr  # page-aligned
    bit_offset: int
    direction: Direction
    iteration: int


class _Plan:
    """Flattened per-window view of the flippy cells, reused across sessions."""

    def __init__(self, dram: "Dram", cfg: HammerConfig):
        m = dram.mapping
        byte_idx, shift, src, cells = [], [], [], []
        for w in cfg.window_layout:
            for r in w.victim_rows:
                for c in dram.model.cells_in_row(w.bank, r):
                    page = m.encode(w.bank, r, c.page_half)
                    byte_idx.append(page + c.page_bit // 8)
                    shift.append(c.page_bit % 8)
                    src.append(c.direction.source)
                    cells.append(c)
        self.cells = cells
        self.byte_idx = np.array(byte_idx, dtype=np.int64)
        self.shift = np.array(shift, dtype=np.uint8)
        self.src = np.array(src, dtype=np.uint8)
        self.frames = self.byte_idx // PAGE_BYTES
        self.resident = np.array([c.resident_factor for c in cells], dtype=float)
        bank_mult = dram.model.bank_multiplier(cfg.n_banks)
        self.prob = {
            d: np.clip(np.array([c.base_prob * c.multiplier(d) for c in cells], dtype=float) * bank_mult, 0.0, 1.0)
            for d in dram.model.patterns
        }
        self.frame_cells: dict[int, np.ndarray] = {}
        for f in np.unique(self.frames):
            self.frame_cells[int(f)] = np.flatnonzero(self.frames == f)


class Dram:
    """Cell store plus flip physics for one simulated machine."""

    def __init__(self, geometry: DramGeometry, model: FlipModel | None = None,
                 mapping: AddressMapping | None = None, seed: int | None = None):
        self.geometry = geometry
        self.mapping = mapping or AddressMapping(geometry)
        self.model = model if model is not None else FlipModel()
        self.memory = np.zeros(geometry.size, dtype=np.uint8)
        self.frames = self.memory.reshape(-1, PAGE_BYTES)
        self.rng = np.random.default_rng(self.model.rng_seed if seed is None else seed)
        self.sessions = 0
        self._plans: dict[tuple, _Plan] = {}

    def _check_page(self, addr: int) -> None:
        if addr % PAGE_BYTES:
            raise ValueError(f"address {addr:#x} is not page aligned")
        if not 0 <= addr < self.geometry.size:
            raise ValueError(f"address {addr:#x} out of range")

    def read_page(self, addr: int) -> bytes:
        self._check_page(addr)
        return self.memory[addr:addr + PAGE_BYTES].tobytes()

    def write_page(self, addr: int, data: bytes) -> None:
        self._check_page(addr)
        if len(data) != PAGE_BYTES:
            raise ValueError("page writes must be exactly 4096 bytes")
        self.memory[addr:addr + PAGE_BYTES] = np.frombuffer(bytes(data), dtype=np.uint8)

    def plan(self, cfg: HammerConfig) -> _Plan:
        # fast path for callers that reuse one config object
        p = self._plans.get(id(cfg))
        if p is not None and p.cfg is cfg:
            return p
        key = (cfg.window_layout, cfg.n_banks)
        p = self._plans.get(key)
        if p is None:
            g = self.geometry
            for w in cfg.window_layout:
                if not 0 <= w.bank < g.n_banks:
                    raise ValueError(f"bank {w.bank} does not exist")
                for r in w.attacker_rows + w.victim_rows:
                    if not 0 <= r < g.rows_per_bank:
                        raise ValueError(f"row {r} does not exist in bank {w.bank}")
            p = self._plans[key] = _Plan(self, cfg)
        if len(self._plans) > 8192:
            self._plans.clear()
            self._plans[key] = p
        p.cfg = cfg
        self._plans[id(cfg)] = p
        return p

    def hammer_indices(self, cfg: HammerConfig, resident_frames: Iterable[int] = (),
                       fill: str | None = None) -> tuple[_Plan, np.ndarray]:
        """Run one session and return the plan plus indices of cells that flipped.

        ``fill`` overrides ``cfg.attacker_fill``.
        """
        fill = cfg.attacker_fill if fill is None else fill
        if fill not in self.model.patterns:
            raise ValueError(f"unknown pattern descriptor {fill!r}")
        plan = self.plan(cfg)
        self.sessions += 1
        n = plan.byte_idx.size
        if n == 0:
            return plan, plan.byte_idx[:0]
        prob = plan.prob[fill]
        hot = [plan.frame_cells[f] for f in resident_frames if f in plan.frame_cells]
        if hot:
            prob = prob.copy()
            idx = np.concatenate(hot)
            prob[idx] *= plan.resident[idx]
        stored = (self.memory[plan.byte_idx] >> plan.shift) & 1
        u = self.rng.random(n)
        hit = np.flatnonzero((stored == plan.src) & (u < prob))
        if hit.size:
            np.bitwise_xor.at(self.memory, plan.byte_idx[hit], (1 << plan.shift[hit]).astype(np.uint8))
        return plan, hit

    def hammer(self, cfg: HammerConfig, resident_frames: Iterable[int] = ()) -> list[FlipEvent]:
        it = self.sessions
        plan, hit = self.hammer_indices(cfg, resident_frames)
        events = []
        for i in hit:
            c = plan.cells[i]
            page = self.mapping.encode(c.bank, c.row, c.page_half)
            events.append(FlipEvent(self.mapping.decode(page), c.page_bit, c.direction, it))
        return events


def hammer(cfg: HammerConfig, model: FlipModel, memory: Dram) -> list[FlipEvent]:
    """One hammering session over ``cfg.window_layout`` applied to ``memory``."""
    if memory.model is not model:
        memory.model = model
        memory._plans.clear()
    return memory.hammer(cfg)
