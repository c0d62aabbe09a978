"""INI experiment configuration with an effective-config dump.

Every section maps onto a dataclass; unknown keys and bad values raise
:class:`ConfigError` naming ``[section] key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import zlib
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


def _tuple_of(conv):
    def parse(s: str):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    return parse


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s: str) -> int:
    return int(s, 0)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class ExperimentSection:
    seed: int = 1
    out: str = "runs/default"


@dataclass
class DramSection:
    n_banks: int = 8
    cache_capacity: int = 512
    clear_on_free: bool = False
    conflict_false_positive: float = 0.0


@dataclass
class ProfileSection:
    configs: tuple[str, ...] = ("15x7", "15x5", "15x4", "12x7")
    iterations: int = 200
    region_rows: int = 64
    # empty -> per-configuration preset
    density_per_mb: str = ""
    class_mix: str = ""


@dataclass
class AttackSection:
    config: str = "15x4"
    region_rows: int = 262
    density_per_mb: float = 83.5
    class_mix: tuple[float, ...] = (768.0, 100.0, 500.0)
    stratify_targets: bool = True
    reliable_target_low: float = 30.0
    reliable_target_high: float = 120.0
    resident_dead_fraction: float = 0.05
    resident_factor_low: float = 0.2
    resident_factor_high: float = 1.0
    profile_iterations: int = 200
    trials: int = 200
    f_min: int = 3
    min_resident_rate: float = 0.035
    resident_iterations: int = 200
    reclaim_initial_buffer: int = 4
    reclaim_growth_factor: int = 2
    reclaim_max_growth: int = 4
    max_candidates_per_class: int = 8


@dataclass
class VictimSection:
    channel_mode: str = "ErrorCode"
    verify_after_sign: bool = True
    suppress_error_codes: bool = False
    dual_sign_constant_time: bool = False
    key_blinding: bool = False
    malloc_size: int = 0
    key_reload_policy: str = "per_connection"
    heap_base: int = 0x2A0
    base_latency: int = 1
    retry_cost: int = 1


@dataclass
class CostSection:
    hammer_session_s: float = 0.35
    handshake_s: float = 0.05


@dataclass
class AslrSection:
    sizes: tuple[int, ...] = (16, 32, 64)
    trials: int = 2000
    low_bits: int = 8


_SECTIONS = {
    "experiment": ExperimentSection,
    "dram": DramSection,
    "profile": ProfileSection,
    "attack": AttackSection,
    "victim": VictimSection,
    "costs": CostSection,
    "aslr": AslrSection,
}

# field annotations are strings under postponed evaluation
_PARSERS = {"int": _int, "float": float, "bool": _bool, "str": str,
            "tuple[str, ...]": _tuple_of(str), "tuple[float, ...]": _tuple_of(float),
            "tuple[int, ...]": _tuple_of(_int)}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dram: DramSection = field(default_factory=DramSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    attack: AttackSection = field(default_factory=AttackSection)
    victim: VictimSection = field(default_factory=VictimSection)
    costs: CostSection = field(default_factory=CostSection)
    aslr: AslrSection = field(default_factory=AslrSection)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config syntax: {e}") from None
        cfg = cls()
        for name in cp.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"[{name}]: unknown section")
            sec = getattr(cfg, name)
            types = {f.name: f.type for f in fields(sec)}
            for key, raw in cp[name].items():
                if key not in types:
                    raise ConfigError(f"[{name}] {key}: unknown key")
                t = types[key]
                conv = _PARSERS[t]
                try:
                    setattr(sec, key, conv(raw))
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"[{name}] {key}: {e}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def validate(self) -> None:
        def need(cond, where):
            if not cond:
                raise ConfigError(where)
        from .victim import ChannelMode
        try:
            ChannelMode(self.victim.channel_mode)
        except ValueError:
            raise ConfigError(f"[victim] channel_mode: unknown mode {self.victim.channel_mode!r}") from None
        need(self.victim.key_reload_policy in ("per_connection", "persistent"),
             f"[victim] key_reload_policy: unknown policy {self.victim.key_reload_policy!r}")
        need(self.victim.heap_base % 16 == 0, "[victim] heap_base: must be a multiple of 16")
        for label in self.profile.configs + (self.attack.config,):
            try:
                parse_label(label)
            except ValueError:
                raise ConfigError(f"hammer config label {label!r} is not RxB") from None
        need(len(self.attack.class_mix) == 3, "[attack] class_mix: need three weights")
        need(self.attack.trials >= 1, "[attack] trials: must be >= 1")
        need(self.attack.f_min >= 1, "[attack] f_min: must be >= 1")
        need(self.profile.iterations >= 1, "[profile] iterations: must be >= 1")
        need(self.attack.profile_iterations >= 1, "[attack] profile_iterations: must be >= 1")
        need(self.dram.n_banks >= 1 and self.dram.n_banks & (self.dram.n_banks - 1) == 0,
             "[dram] n_banks: must be a power of two")
        need(all(n >= 16 and n % 16 == 0 for n in self.aslr.sizes),
             "[aslr] sizes: must be positive multiples of 16")
        need(0 <= self.aslr.low_bits < 16, "[aslr] low_bits: must be in [0, 16)")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        out = io.StringIO()
        cp.write(out)
        return out.getvalue()

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields changed, e.g. ``replace(victim={"key_blinding": True})``."""
        new = ExperimentConfig(**{n: dataclasses.replace(getattr(self, n)) for n in _SECTIONS})
        for name, changes in sections.items():
            setattr(new, name, dataclasses.replace(getattr(new, name), **changes))
        new.validate()
        return new


def parse_label(label: str) -> tuple[int, int]:
    r, b = label.lower().split("x")
    r, b = int(r), int(b)
    if r < 2 or b < 1:
        raise ValueError(label)
    return r, b


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named part of an experiment."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**63))
