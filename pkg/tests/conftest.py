import numpy as np
import pytest

from hammerprobe.dram import PAGE_BITS, AddressMapping, Dram, DramGeometry, FlipModel
from hammerprobe.memos import Machine


class SmallWorld:
    """A machine whose attacker owns every frame, plus ground-truth helpers for tests."""

    def __init__(self, cells=(), n_banks=2, rows=16, seed=0, spare_rows=0, **machine_kw):
        self.geometry = DramGeometry(n_banks, rows + spare_rows)
        self.mapping = AddressMapping(self.geometry)
        self.dram = Dram(self.geometry, FlipModel(cells), self.mapping, seed=seed)
        self.machine = Machine(self.dram, seed=seed, **machine_kw)
        self.attacker = self.machine.spawn("attacker")
        self.vpages = self.attacker.alloc_pages(self.geometry.n_frames)
        self.by_frame = {self.frame(v): v for v in self.vpages}
        # rows past ``rows`` go straight back to the allocator as free frames
        spare = [v for f, v in sorted(self.by_frame.items()) if self.mapping.frame_location(f)[1] >= rows]
        self.attacker.free_pages(spare)
        self.vpages = [v for v in self.vpages if v not in set(spare)]
        self.by_frame = {f: v for f, v in self.by_frame.items() if v in set(self.vpages)}

    def frame(self, vpage, proc=None):
        proc = proc or self.attacker
        return self.machine.virt_to_phys(proc.pid, vpage)

    def vpage_at(self, bank, row, half=0):
        return self.by_frame[self.mapping.frame_of(bank, row, half)]

    def row_pages(self, bank, row):
        return [self.vpage_at(bank, row, h) for h in (0, 1)]

    def sandwich(self, bank, row):
        return tuple(self.row_pages(bank, row - 1) + self.row_pages(bank, row + 1))


@pytest.fixture
def small_world():
    return SmallWorld


def exact_two_pass_pmf(p, iterations):
    """Distribution of a cell's profile count: each iteration gives 0, 1 or 2 flips."""
    step = np.array([0.5 + 0.5 * (1 - p) ** 2, p * (1 - p), 0.5 * p * p])
    pmf = np.array([1.0])
    for _ in range(iterations):
        pmf = np.convolve(pmf, step)
    return pmf


def pmf_interval(pmf, level=0.99):
    cdf = np.cumsum(pmf)
    tail = (1 - level) / 2
    lo = int(np.searchsorted(cdf, tail))
    hi = int(np.searchsorted(cdf, 1 - tail))
    return lo, hi
