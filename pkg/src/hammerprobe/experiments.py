"""Experiment pipelines behind the CLI commands, plus CSV/manifest output."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacker import AttackConfig, Attacker, RecoveredKey, aslr_guess_frequency
from .config import ExperimentConfig, parse_label, stream, stream_seed
from .dram import PAGE_BYTES, AddressMapping, Dram, DramGeometry
from .memos import AslrPolicy, Machine, Process
from .profiler import PageClass, ProfileRun, dump_profiles, load_profiles, profile_region
from .synthesis import REFERENCE_DENSITY, REFERENCE_CLASS_MIX, SynthesisParams, synthesize_dram
from .victim import (ChannelMode, Countermeasures, VictimConfig, VictimEndpoint, VictimServer,
                     key_bit, random_key)

log = logging.getLogger(__name__)

MANIFEST = "MANIFEST.sha256"
FRAMES_PER_ROW_INDEX = 2  # pages per row in one bank


class ExperimentError(RuntimeError):
    pass


def _csv(rows, header) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def write_outputs(out_dir, files: dict[str, str]) -> None:
    """Write text files and refresh their entries in the sha256 manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    entries = read_manifest(out) if (out / MANIFEST).exists() else {}
    for name, text in files.items():
        entries[name] = hashlib.sha256(text.encode()).hexdigest()
    (out / MANIFEST).write_text("".join(f"{h}  {n}\n" for n, h in sorted(entries.items())))


def read_manifest(out_dir) -> dict[str, str]:
    entries = {}
    for line in (Path(out_dir) / MANIFEST).read_text().splitlines():
        if line.strip():
            h, name = line.split(None, 1)
            entries[name.strip()] = h
    return entries


def verify_manifest(out_dir) -> list[str]:
    """Names of files whose content no longer matches the manifest."""
    bad = []
    for name, h in read_manifest(out_dir).items():
        p = Path(out_dir) / name
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != h:
            bad.append(name)
    return bad


# -- world construction -----------------------------------------------------------

def victim_config(cfg: ExperimentConfig) -> VictimConfig:
    v = cfg.victim
    return VictimConfig(
        verify_after_sign=v.verify_after_sign,
        channel_mode=ChannelMode(v.channel_mode),
        countermeasures=Countermeasures(v.suppress_error_codes, v.dual_sign_constant_time, v.key_blinding),
        attacker_controlled_malloc_size=v.malloc_size,
        key_reload_policy=v.key_reload_policy,
        heap_base=v.heap_base,
        base_latency=v.base_latency,
        retry_cost=v.retry_cost,
        handshake_cost_s=cfg.costs.handshake_s,
    )


@dataclass
class World:
    machine: Machine
    attacker: Process
    region: list[int]
    params: SynthesisParams


def build_world(cfg: ExperimentConfig, seed: int, region_rows: int, params: SynthesisParams,
                spare_rows: int = 16) -> World:
    """Synthesize DRAM, boot a machine and let the attacker grab ``region_rows`` rows of every bank."""
    geom = DramGeometry(cfg.dram.n_banks, region_rows + spare_rows)
    mapping = AddressMapping(geom)
    model = synthesize_dram(geom, params, stream_seed(seed, "dram-synthesis"), mapping)
    dram = Dram(geom, model, mapping, seed=stream_seed(seed, "hammer"))
    machine = Machine(dram, cfg.dram.cache_capacity, cfg.dram.clear_on_free,
                      hammer_cost_s=cfg.costs.hammer_session_s,
                      conflict_false_positive=cfg.dram.conflict_false_positive,
                      seed=stream_seed(seed, "row-conflict"))
    attacker = machine.spawn("attacker")
    region = attacker.alloc_pages(region_rows * geom.n_banks * FRAMES_PER_ROW_INDEX)
    return World(machine, attacker, region, params)


def _inner_frames(cfg: ExperimentConfig, region_rows: int) -> tuple[int, int]:
    per_row = cfg.dram.n_banks * FRAMES_PER_ROW_INDEX
    return per_row, (region_rows - 1) * per_row


# -- profile / classify --------------------------------------------------------------

def profile_params(cfg: ExperimentConfig, label: str) -> SynthesisParams:
    p = cfg.profile
    density = float(p.density_per_mb) if p.density_per_mb else REFERENCE_DENSITY.get(label)
    mix = tuple(float(x) for x in p.class_mix.split(",")) if p.class_mix else REFERENCE_CLASS_MIX.get(label)
    if density is None or mix is None:
        raise ExperimentError(f"no synthesis preset for config {label}; set [profile] density_per_mb and class_mix")
    return SynthesisParams(density, mix, frame_range=_inner_frames(cfg, p.region_rows))


def run_profile(cfg: ExperimentConfig, label: str, seed: int | None = None) -> ProfileRun:
    seed = cfg.seed if seed is None else seed
    r, b = parse_label(label)
    world = build_world(cfg, seed, cfg.profile.region_rows, profile_params(cfg, label))
    world.machine.privileged_locked = True
    return profile_region(world.attacker, world.region, r, b, cfg.profile.iterations,
                          stream(seed, f"profiling-data/{label}"))


def cmd_profile(cfg: ExperimentConfig, out_dir) -> dict[str, ProfileRun]:
    runs = {}
    rows = []
    files = {}
    for label in cfg.profile.configs:
        run = run_profile(cfg, label)
        runs[label] = run
        target = REFERENCE_DENSITY.get(label, "")
        rows.append([label, f"{run.area_mb:.4f}", len(run.flippy), f"{run.density_per_mb:.4f}", target])
        files[f"profiles_{label}.csv"] = dump_profiles(run.flippy)
    files["density.csv"] = _csv(rows, ["config", "area_mb", "flippy_pages", "density_per_mb", "reference_density"])
    files["effective_config.ini"] = cfg.to_ini()
    write_outputs(out_dir, files)
    return runs


def classify_store(text: str) -> dict[PageClass, int]:
    counts = {k: 0 for k in PageClass}
    for p in load_profiles(text):
        if p.total:
            counts[p.page_class] += 1
    return counts


def cmd_classify(store_dir) -> dict[str, dict[PageClass, int]]:
    d = Path(store_dir)
    stores = sorted(d.glob("profiles_*.csv")) if d.is_dir() else []
    if not stores:
        raise ExperimentError(f"no profile store in {store_dir}")
    table = {}
    rows = []
    for path in stores:
        label = path.stem[len("profiles_"):]
        counts = classify_store(path.read_text())
        table[label] = counts
        ref = REFERENCE_CLASS_MIX.get(label, ("", "", ""))
        rows.append([label] + [counts[k] for k in PageClass] + list(ref))
    header = ["config", "reliable", "unstable", "unusable",
              "reference_reliable", "reference_unstable", "reference_unusable"]
    write_outputs(store_dir, {"classes.csv": _csv(rows, header)})
    return table


# -- attack ---------------------------------------------------------------------------

def attack_params(cfg: ExperimentConfig) -> SynthesisParams:
    a = cfg.attack
    return SynthesisParams(a.density_per_mb, tuple(a.class_mix), frame_range=_inner_frames(cfg, a.region_rows),
                           reliable_target=(a.reliable_target_low, a.reliable_target_high),
                           stratify_targets=a.stratify_targets,
                           resident_dead_fraction=a.resident_dead_fraction,
                           resident_factor_range=(a.resident_factor_low, a.resident_factor_high))


@dataclass
class AttackReport:
    seed: int
    key: bytes
    recovered: RecoveredKey
    attacker: Attacker
    profile: ProfileRun
    wall_seconds: float

    @property
    def accuracy(self) -> float:
        return self.recovered.accuracy(self.key)

    @property
    def suitable_pages(self) -> int:
        return sum(1 for r in self.attacker.resident.values()
                   if r.suitable and r.rate >= self.attacker.cfg.min_resident_rate)


def run_attack(cfg: ExperimentConfig, seed: int | None = None, keep_transcript: bool = True) -> AttackReport:
    t0 = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    a = cfg.attack
    r, b = parse_label(a.config)
    world = build_world(cfg, seed, a.region_rows, attack_params(cfg))
    machine = world.machine
    vcfg = victim_config(cfg)
    key = random_key(stream(seed, "victim-key"))
    server = VictimServer(machine, key, vcfg, rng=stream(seed, "victim"))
    server.log_messages = False
    server.start()
    endpoint = VictimEndpoint(server)

    attack_rng = stream(seed, "attack")
    copy_key = random_key(attack_rng)
    copy_rng = stream(seed, "attacker-copy")

    def launch_copy(malloc_size: int):
        copy = VictimServer(machine, copy_key, vcfg, rng=copy_rng, name="attacker-copy")
        copy.log_messages = False
        copy.start(malloc_size)
        return copy

    machine.privileged_locked = True
    prof = profile_region(world.attacker, world.region, r, b, a.profile_iterations, stream(seed, "profiling-data"))
    acfg = AttackConfig(a.trials, a.f_min, a.min_resident_rate, a.resident_iterations,
                        a.reclaim_initial_buffer, a.reclaim_growth_factor, a.reclaim_max_growth,
                        a.max_candidates_per_class)
    attacker = Attacker(world.attacker, endpoint, launch_copy, prof.flippy, acfg, keep_transcript)
    recovered = attacker.recover_key()
    return AttackReport(seed, key, recovered, attacker, prof, time.perf_counter() - t0)


def attack_files(report: AttackReport, privileged: bool) -> dict[str, str]:
    rec = report.recovered
    bit_rows = []
    for est in rec.bits:
        row = [est.index, "" if est.value is None else est.value, est.failures, est.trials,
               f"{est.confidence:.6f}", "" if est.direction is None else est.direction.value,
               est.page_id, est.offline_count, f"{est.p_hat:.6f}"]
        if privileged:
            row.append(key_bit(report.key, est.index))
        bit_rows.append(row)
    header = ["bit", "decoded", "failures", "trials", "confidence", "offline_direction",
              "page_id", "offline_count", "resident_rate"] + (["real_value"] if privileged else [])
    summary = [["seed", report.seed], ["decoded_bits", rec.n_decoded], ["complete", int(rec.complete)],
               ["pages_used", rec.pages_used], ["suitable_pages", report.suitable_pages],
               ["flippy_pages_profiled", len(report.profile.flippy)],
               ["handshakes", rec.handshakes], ["hammer_sessions", rec.hammer_sessions],
               ["reclaim_rounds", rec.reclaim_rounds], ["online_seconds", f"{rec.online_seconds:.2f}"],
               ["bits_per_hour", f"{rec.bits_per_hour:.4f}"]]
    if privileged:
        summary.append(["accuracy", f"{report.accuracy:.6f}"])
    return {
        "attack_bits.csv": _csv(bit_rows, header),
        "attack_trials.csv": report.attacker.transcript_csv(),
        "attack_summary.csv": _csv(summary, ["metric", "value"]),
    }


def cmd_attack(cfg: ExperimentConfig, out_dir, privileged: bool = False) -> AttackReport:
    report = run_attack(cfg)
    files = attack_files(report, privileged)
    files["effective_config.ini"] = cfg.to_ini()
    write_outputs(out_dir, files)
    return report


# -- aslr ---------------------------------------------------------------------------

def cmd_aslr_demo(cfg: ExperimentConfig, out_dir, sizes=None) -> dict[int, float]:
    sizes = tuple(sizes) if sizes else cfg.aslr.sizes
    policy = AslrPolicy(True, low_bits=cfg.aslr.low_bits, fixed_offset=0x7C0 + cfg.aslr.low_bits)
    freq = {}
    rows = []
    for n in sizes:
        if n < 16 or n % 16:
            raise ExperimentError(f"variable size {n} is not a positive multiple of 16")
        f = aslr_guess_frequency(n, cfg.aslr.trials, stream(cfg.seed, f"aslr/{n}"), policy)
        freq[n] = f
        rows.append([n, cfg.aslr.trials, f"{f:.4f}", f"{16 / n:.4f}"])
    write_outputs(out_dir, {"aslr.csv": _csv(rows, ["var_bytes", "trials", "frequency", "expected"]),
                            "effective_config.ini": cfg.to_ini()})
    return freq


# -- report -------------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(run_dir) -> tuple[str, bool]:
    """Summarize a run directory; returns the text and whether every check passed."""
    d = Path(run_dir)
    if not d.is_dir() or not (d / MANIFEST).exists():
        raise ExperimentError(f"no run outputs in {run_dir}")
    lines = []
    ok = True

    def check(name, passed, detail=""):
        nonlocal ok
        ok = ok and passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}{('  ' + detail) if detail else ''}")

    bad = verify_manifest(d)
    check("checksums", not bad, ("mismatch: " + ", ".join(bad)) if bad else "")
    if (d / "density.csv").exists():
        for r in _read_csv(d / "density.csv"):
            if r["reference_density"]:
                ref = float(r["reference_density"])
                got = float(r["density_per_mb"])
                check(f"density {r['config']}", abs(got - ref) <= 0.10 * ref, f"{got:.2f}/MB vs {ref:.2f}/MB")
    if (d / "classes.csv").exists():
        for r in _read_csv(d / "classes.csv"):
            if r["reference_reliable"]:
                ref = np.array([float(r[f"reference_{k}"]) for k in ("reliable", "unstable", "unusable")])
                got = np.array([float(r[k]) for k in ("reliable", "unstable", "unusable")])
                scale = got.sum() / ref.sum() if ref.sum() else 0.0
                # small runs hold only a handful of reliable pages, so this is informational
                lines.append(f"info  class mix {r['config']}  " + "/".join(str(int(x)) for x in got)
                             + " vs scaled reference " + "/".join(f"{x:.1f}" for x in scale * ref))
    if (d / "attack_summary.csv").exists():
        s = {r["metric"]: r["value"] for r in _read_csv(d / "attack_summary.csv")}
        check("attack decoded all bits", s.get("decoded_bits") == "256", f"{s.get('decoded_bits')}/256")
        if "accuracy" in s:
            check("attack accuracy", float(s["accuracy"]) == 1.0, s["accuracy"])
        lines.append(f"info  bits/hour {s.get('bits_per_hour')}  pages used {s.get('pages_used')}")
    if (d / "aslr.csv").exists():
        for r in _read_csv(d / "aslr.csv"):
            f, e = float(r["frequency"]), float(r["expected"])
            check(f"aslr n={r['var_bytes']}", abs(f - e) <= 0.05, f"{f:.3f} vs {e:.3f}")
    return "\n".join(lines) + "\n", ok
