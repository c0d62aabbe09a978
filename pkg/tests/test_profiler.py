import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import SmallWorld, exact_two_pass_pmf, pmf_interval
from hammerprobe.dram import PAGE_BITS, Direction, FlipCell
from hammerprobe.profiler import (PageClass, PageProfile, ProfilingError, ResidentProfile,
                                  RowConflictOracle, build_windows, classify, classify_counts,
                                  convergence_stats, dump_profiles, find_adjacent_rows,
                                  find_same_bank_chunks, load_profiles, profile_region,
                                  profile_with_resident_victim, row_runs, running_separation)
from hammerprobe.victim import VictimConfig, VictimServer

# (page, target offset, delta, sigma) of ten measured example pages
EXAMPLE_PAGES = [
    (0x2c0046000, 2218, 116, 0), (0x2bfa62000, 7210, 73, 0), (0x1ca224000, 522, 45, 0),
    (0x1e7598000, 11347, 49, 17), (0x135dd0000, 7201, 62, 18), (0x1cd7fc000, 981, 41, 37),
    (0x2c0ae1000, 26034, 42, 28), (0x2c1c8c000, 1349, 80, 605), (0x2c1d12000, 9049, 172, 1153),
    (0x2c1d10000, 16076, 154, 2861),
]


# -- classification -----------------------------------------------------------------

@pytest.mark.parametrize("delta,sigma,expected", [
    (116, 0, PageClass.RELIABLE), (80, 605, PageClass.UNUSABLE), (41, 37, PageClass.RELIABLE),
    (9, 0, PageClass.UNUSABLE), (20, 60, PageClass.UNSTABLE), (10, 81, PageClass.UNUSABLE),
])
def test_classification_examples(delta, sigma, expected):
    assert classify_counts(delta, sigma) is expected


def test_example_pages_classify_7_reliable_3_unusable():
    got = [classify(PageProfile.from_summary(pid, t, d, s)) for pid, t, d, s in EXAMPLE_PAGES]
    assert got.count(PageClass.RELIABLE) == 7
    assert got.count(PageClass.UNUSABLE) == 3
    assert got.count(PageClass.UNSTABLE) == 0


@given(st.integers(0, 400), st.integers(0, 4000), st.booleans())
def test_classification_is_a_partition(delta, sigma, tie):
    cls = classify_counts(delta, sigma, tie)
    reliable = delta >= 10 and delta >= sigma and not tie
    unstable = not reliable and delta >= 10 and (sigma <= 80 or tie)
    assert (cls is PageClass.RELIABLE) == reliable
    assert (cls is PageClass.UNSTABLE) == unstable
    assert (cls is PageClass.UNUSABLE) == (not reliable and not unstable)


@given(st.integers(1, 300), st.integers(0, 3000), st.integers(0, PAGE_BITS - 1))
def test_from_summary_reproduces_summary(delta, sigma, target):
    p = PageProfile.from_summary(1, target, delta, sigma)
    assert (p.delta, p.sigma) == (delta, sigma)
    if delta > 1 or sigma == 0:
        assert p.target_offset == target and not p.tie


def test_tie_demotes_to_unstable():
    p = PageProfile(1, "x", up={10: 30, 20: 30})
    assert p.tie and p.page_class is PageClass.UNSTABLE


def test_empty_profile():
    p = PageProfile(1, "x")
    assert p.delta == p.sigma == 0 and p.target_offset is None and p.page_class is PageClass.UNUSABLE


# -- layout discovery -------------------------------------------------------------------

def test_row_runs_examples():
    assert row_runs([5, 6, 7, 9]) == [[5, 6, 7], [9]]
    assert row_runs([1, 3, 5]) == [[1], [3], [5]]
    assert row_runs([]) == []


def test_same_row_pages_do_not_conflict():
    w = SmallWorld(n_banks=2, rows=8)
    a, b = w.row_pages(1, 3)
    assert not w.attacker.row_conflict(a, b)
    assert w.attacker.row_conflict(a, w.vpage_at(1, 4))
    assert not w.attacker.row_conflict(a, w.vpage_at(0, 4))


def test_bank_groups_pure_on_4mib_chunk():
    w = SmallWorld(n_banks=8, rows=64)  # 4 MiB
    pages = list(w.vpages)
    np.random.default_rng(0).shuffle(pages)
    groups = find_same_bank_chunks(RowConflictOracle(w.attacker), pages, min_groups=8)
    assert len(groups) == 8
    for g in groups:
        banks = {w.mapping.frame_location(w.frame(v))[0] for v in g}
        assert len(banks) == 1
    assert sum(len(g) for g in groups) == len(pages)


def test_straddling_bank_bit_splits_groups():
    w = SmallWorld(n_banks=2, rows=8)
    a = w.vpage_at(0, 2)
    b = w.vpage_at(1, 2)  # differs only in the bank-select bit
    groups = find_same_bank_chunks(RowConflictOracle(w.attacker), [a, b, w.vpage_at(0, 3), w.vpage_at(1, 3)])
    assert len(groups) == 2


def test_chunk_too_small_for_banks():
    w = SmallWorld(n_banks=2, rows=8)
    with pytest.raises(ProfilingError):
        find_same_bank_chunks(RowConflictOracle(w.attacker), [w.vpage_at(0, 1)], min_groups=2)


def test_contiguous_block_gives_single_run():
    w = SmallWorld(n_banks=1, rows=32)
    runs = find_adjacent_rows(RowConflictOracle(w.attacker), w.vpages)
    assert len(runs) == 1 and len(runs[0]) == 32 and runs[0].rows == list(range(32))


def test_windows_cover_inner_rows():
    # 18 rows tile exactly with span 5 and step 4 at both alignments
    w = SmallWorld(n_banks=2, rows=18)
    oracle = RowConflictOracle(w.attacker)
    groups = find_same_bank_chunks(oracle, w.vpages, 2)
    runs = [find_adjacent_rows(oracle, g, i)[0] for i, g in enumerate(groups)]
    wins = build_windows(runs, 3, 2)
    victims = {w.mapping.frame_location(w.frame(v))[:2] for win in wins for v in win.victim_pages}
    assert {r for _, r in victims} == set(range(1, 17))
    for win in wins:
        for v, agg in win.neighbours().items():
            r = w.mapping.frame_location(w.frame(v))[1]
            assert {w.mapping.frame_location(w.frame(a))[1] for a in agg} == {r - 1, r + 1}


# -- profiling -----------------------------------------------------------------------

def _profile_single_bank(cells, seed, rows=8):
    w = SmallWorld(cells, n_banks=1, rows=rows, seed=seed)
    run = profile_region(w.attacker, w.vpages, 2, 1, 200, np.random.default_rng(seed))
    by_frame = {w.frame(v): p for v, p in run.profiles.items()}
    return w, run, by_frame


def test_single_cell_page_profile():
    cells = [FlipCell(0, 3, 2218, Direction.UP, 116 / 200)]
    w, run, by_frame = _profile_single_bank(cells, seed=1)
    p = by_frame[w.mapping.frame_of(0, 3, 0)]
    lo, hi = pmf_interval(exact_two_pass_pmf(116 / 200, 200), 0.9999)
    assert p.target_offset == 2218 and p.sigma == 0 and lo <= p.delta <= hi
    assert p.direction is Direction.UP and p.page_class is PageClass.RELIABLE
    assert len(run.flippy) == 1


def test_no_flippy_cells_give_empty_profiles():
    _, run, _ = _profile_single_bank([], seed=1)
    assert run.flippy == [] and all(p.delta == p.sigma == 0 for p in run.profiles.values())


def test_two_cells_within_exact_bounds():
    pmf1, pmf2 = exact_two_pass_pmf(0.4, 200), exact_two_pass_pmf(0.35, 200)
    i1, i2 = pmf_interval(pmf1), pmf_interval(pmf2)
    n, inside, first_is_target = 60, 0, 0
    for seed in range(n):
        cells = [FlipCell(0, 3, 100, Direction.UP, 0.4), FlipCell(0, 3, 900, Direction.DOWN, 0.35)]
        w, _, by_frame = _profile_single_bank(cells, seed, rows=5)
        p = by_frame[w.mapping.frame_of(0, 3, 0)]
        c = p.counts
        inside += (i1[0] <= c[100] <= i1[1]) and (i2[0] <= c[900] <= i2[1])
        first_is_target += p.target_offset == 100
        assert set(p.up) <= {100} and set(p.down) <= {900}
    # each pair misses its 99% interval with probability about 0.02
    assert inside >= n - 5
    # the 0.4 cell wins about 79% of the time
    assert first_is_target >= 0.6 * n


# -- convergence --------------------------------------------------------------------

def test_deterministic_flip_has_zero_variance():
    s = running_separation(np.ones(200), np.zeros(200))
    assert np.all(s.var_target == 0) and np.all(s.var_other == 0)
    assert np.all(np.isinf(s.separation))


def test_separation_grows_like_sqrt_k():
    rng = np.random.default_rng(4)
    x = rng.random(200) < 0.5
    s = running_separation(x.astype(float), np.zeros(200))
    # separation = mean / sqrt(var / k), about sqrt(k) for a fair coin
    assert s.separation[199] > s.separation[49] > s.separation[9]
    assert abs(s.separation[199] - np.sqrt(200)) < 0.25 * np.sqrt(200)


def test_running_separation_needs_two_points():
    with pytest.raises(ValueError):
        running_separation(np.ones(1), np.ones(1))


def test_convergence_on_profiled_reliable_page():
    cells = [FlipCell(0, 3, 500, Direction.UP, 0.4), FlipCell(0, 3, 7000, Direction.UP, 0.04)]
    w, _, by_frame = _profile_single_bank(cells, seed=2, rows=5)
    p = by_frame[w.mapping.frame_of(0, 3, 0)]
    s = convergence_stats(p)
    assert s.separation[-1] >= 3
    assert s.mean_target[-1] == pytest.approx(p.delta / 200)


# -- resident re-profiling -----------------------------------------------------------

def test_resident_suitability_examples():
    assert ResidentProfile(1, 17, 6, 0, 200).suitable
    assert not ResidentProfile(1, 12, 0, 0, 200).suitable
    assert not ResidentProfile(1, 12, 5, 1, 200).suitable


def _resident_run(prob, resident_factor=1.0, seed=0):
    heap_base, probe = 0x2A0, 5
    bit = 8 * heap_base + probe
    cells = [FlipCell(0, 3, bit, Direction.UP, prob, resident_factor=resident_factor)]
    w = SmallWorld(cells, n_banks=1, rows=6, seed=seed)
    target = w.vpage_at(0, 3)
    agg = w.sandwich(0, 3)
    w.attacker.free_pages([target])
    copy = VictimServer(w.machine, bytes(32), VictimConfig(heap_base=heap_base), np.random.default_rng(seed))
    copy.start(0)
    assert w.frame(copy.copies[0].vpage, copy.proc) == w.mapping.frame_of(0, 3, 0)
    return profile_with_resident_victim(w.attacker, agg, probe, Direction.UP, copy, 200)


def test_resident_flippy_page_is_suitable():
    r = _resident_run(0.2)
    assert r.suitable and r.flips_sink == 0 and r.flips_source > 0
    assert r.rate == r.flips_source / 400


def test_resident_prob_zero_is_unsuitable():
    assert not _resident_run(0.0).suitable
    assert not _resident_run(0.5, resident_factor=0.0).suitable


# -- store ---------------------------------------------------------------------------------

def test_store_round_trip():
    profs = [PageProfile.from_summary(pid, t, d, s, Direction.DOWN if pid % 2 else Direction.UP, "15x7")
             for pid, t, d, s in EXAMPLE_PAGES]
    text = dump_profiles(profs)
    back = load_profiles(text)
    assert [(p.page_id, p.up, p.down) for p in back] == [(p.page_id, p.up, p.down) for p in sorted(profs, key=lambda p: p.page_id)]
    assert dump_profiles(back) == text


def test_store_missing_columns():
    with pytest.raises(ValueError):
        load_profiles("page_id,config\n1,x\n")
