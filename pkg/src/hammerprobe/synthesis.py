"""Generate flip models that hit a flippy-page density and a page-class mix.

Counts below are expected flips over a 200-iteration profile (both fill passes
with random victim data), so a cell's per-session probability is ``E / 200``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dram import (PAGE_BITS, PAGE_BYTES, AddressMapping, Direction, DramGeometry, FlipCell,
                   FlipModel)

PROFILE_ITERATIONS = 200
CONGRUENCE = 128  # key bits a 16-byte heap shift moves by

# Per-configuration presets. Densities are flippy pages per MB and mixes are
# reliable:unstable:unusable page counts for a measured multi-bank module.
REFERENCE_DENSITY = {"15x7": 85.44, "15x5": 92.05, "15x4": 102.96, "12x7": 86.45}
REFERENCE_CLASS_MIX = {
    "15x7": (685, 2076, 26324),
    "15x5": (218, 570, 26482),
    "15x4": (24, 56, 4708),
    "12x7": (33, 128, 2666),
}
# Single-bank sweep by attacker-row count; density only, no class data.
GSKILL_DENSITY = {13: 5.43, 10: 17.33, 9: 15.84}


@dataclass
class SynthesisParams:
    density_per_mb: float
    class_mix: tuple[float, float, float] = REFERENCE_CLASS_MIX["15x7"]
    frame_range: tuple[int, int] | None = None
    reliable_target: tuple[float, float] = (30.0, 120.0)
    stratify_targets: bool = False
    resident_dead_fraction: float = 0.05
    resident_factor_range: tuple[float, float] = (0.2, 1.0)
    block_sizes: tuple[int, ...] = ()
    unusable_low_fraction: float = 0.5


def _split(total: int, weights) -> list[int]:
    w = np.asarray(weights, dtype=float)
    if total == 0 or w.sum() == 0:
        return [0] * len(w)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


class _PageBuilder:
    def __init__(self, params: SynthesisParams, rng: np.random.Generator, patterns):
        self.p = params
        self.rng = rng
        self.patterns = patterns

    def _resident(self) -> float:
        if self.rng.random() < self.p.resident_dead_fraction:
            return 0.0
        return float(self.rng.uniform(*self.p.resident_factor_range))

    def _response(self) -> dict[str, float]:
        return {d: float(self.rng.uniform(0.0, 2.0)) for d in self.patterns if d.startswith("block:")}

    def _offsets(self, n: int, first: int | None = None) -> list[int]:
        out = [] if first is None else [first]
        while len(out) < n:
            o = int(self.rng.integers(PAGE_BITS))
            if o not in out:
                out.append(o)
        return out

    def cells(self, kind: str, target: int | None = None) -> list[tuple[int, float, float]]:
        """(page bit offset, expected count, resident factor) triples for one page."""
        rng = self.rng
        if kind == "reliable":
            e_t = rng.uniform(*self.p.reliable_target)
            n_noise = int(rng.choice([0, 1, 2], p=[0.5, 0.3, 0.2]))
            noise = [rng.uniform(6.0, max(6.0, 0.2 * e_t)) for _ in range(n_noise)]
            counts = [e_t] + noise
        elif kind == "unstable":
            e_t = rng.uniform(18.0, 24.0)
            n_noise = 7
            sigma = rng.uniform(45.0, 62.0)
            counts = [e_t] + [sigma / n_noise] * n_noise
        elif kind == "unusable_low":
            n = int(rng.integers(2, 4))
            total = rng.uniform(5.0, 8.0)
            counts = [total / n] * n
        elif kind == "unusable_high":
            # one leading cell well clear of the rest, so the page has an
            # unambiguous maximum but far more flips elsewhere
            n = int(rng.integers(8, 21))
            total = rng.uniform(150.0, 600.0)
            lead = total * rng.uniform(0.2, 0.35)
            counts = [lead] + [(total - lead) / n] * n
        else:
            raise ValueError(kind)
        offs = self._offsets(len(counts), target)
        return [(o, float(c), self._resident()) for o, c in zip(offs, counts)]


def synthesize_dram(geometry: DramGeometry, params: SynthesisParams, seed: int,
                    mapping: AddressMapping | None = None) -> FlipModel:
    """Plant flippy pages at the requested density and class proportions.

    Page counts are exact (largest-remainder rounding), placement is uniform
    over the frame range. The returned model carries ``planted``, a
    frame -> archetype map, for privileged checks.
    """
    mapping = mapping or AddressMapping(geometry)
    rng = np.random.default_rng(seed)
    lo, hi = params.frame_range or (0, geometry.n_frames)
    n_pages = hi - lo
    area_mb = n_pages * PAGE_BYTES / 2**20
    n_flippy = int(round(params.density_per_mb * area_mb))
    if params.density_per_mb < 0 or n_flippy > n_pages:
        raise ValueError(f"density {params.density_per_mb}/MB needs {n_flippy} flippy pages, "
                         f"only {n_pages} available")
    patterns = ("ones", "zeros") + tuple(f"block:{k}" for k in params.block_sizes)
    model = FlipModel(rng_seed=seed, patterns=patterns)
    model.planted = {}
    if n_flippy == 0:
        return model

    n_rel, n_unst, n_unus = _split(n_flippy, params.class_mix)
    n_low = int(round(n_unus * params.unusable_low_fraction))
    kinds = (["reliable"] * n_rel + ["unstable"] * n_unst
             + ["unusable_low"] * n_low + ["unusable_high"] * (n_unus - n_low))
    frames = rng.choice(np.arange(lo, hi), size=n_flippy, replace=False)

    targets: list[int | None] = [None] * n_flippy
    if params.stratify_targets:
        residues = rng.permutation(n_rel) % CONGRUENCE
        for i, c in enumerate(residues):
            targets[i] = int(c) + CONGRUENCE * int(rng.integers(1, 255))

    builder = _PageBuilder(params, rng, patterns)
    for frame, kind, target in zip(frames, kinds, targets):
        bank, row, half = mapping.frame_location(int(frame))
        for off, expected, resident in builder.cells(kind, target):
            prob = min(expected / PROFILE_ITERATIONS, 1.0)
            model.add(FlipCell(bank, row, half * PAGE_BITS + off, Direction.from_source(int(rng.integers(2))),
                               prob, builder._response(), resident))
        model.planted[int(frame)] = kind
    return model
