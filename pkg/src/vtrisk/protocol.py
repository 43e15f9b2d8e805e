"""S1-S2 pacing protocol: parameter sweep enumeration and stimulus timetables."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyRange, ScheduleExceedsHorizon


@dataclass(frozen=True)
class Range:
    """Inclusive ``[initial, final]`` range with step ``inc``."""

    initial: float
    final: float
    inc: float

    def values(self):
        if self.inc <= 0:
            raise EmptyRange(f"increment must be > 0, got {self.inc}")
        if self.final < self.initial:
            raise EmptyRange(f"empty range {self.initial}..{self.final}")
        n = int(np.floor((self.final - self.initial) / self.inc + 1e-9)) + 1
        return tuple(round(self.initial + i * self.inc, 10) for i in range(n))

    @classmethod
    def of(cls, v):
        if isinstance(v, Range):
            return v
        if isinstance(v, dict):
            return cls(float(v["initial"]), float(v["final"]), float(v.get("inc", 1.0)))
        if isinstance(v, (list, tuple)):
            return cls(*(float(x) for x in v))
        return cls(float(v), float(v), 1.0)

    def to_json(self):
        return {"initial": self.initial, "final": self.final, "inc": self.inc}


@dataclass(frozen=True)
class ProtocolSpec:
    pacing_sites: Range = Range(1, 34, 1)
    s2_bcl_ms: Range = Range(270, 295, 5)
    n_s2: Range = Range(1, 3, 1)
    cv_factors: Range = Range(1.0, 1.25, 0.25)
    apd_factors: Range = Range(0.75, 1.25, 0.25)
    s1_bcl_ms: float = 600.0
    n_s1: int = 6
    t_end: float = 6000.0

    def axes(self):
        return (
            tuple(int(v) for v in self.pacing_sites.values()),
            self.s2_bcl_ms.values(),
            tuple(int(v) for v in self.n_s2.values()),
            self.cv_factors.values(),
            self.apd_factors.values(),
        )

    def to_json(self):
        return {
            "pacing_sites": self.pacing_sites.to_json(),
            "s2_bcl_ms": self.s2_bcl_ms.to_json(),
            "n_s2": self.n_s2.to_json(),
            "cv_factors": self.cv_factors.to_json(),
            "apd_factors": self.apd_factors.to_json(),
            "s1_bcl_ms": self.s1_bcl_ms,
            "n_s1": self.n_s1,
            "t_end": self.t_end,
        }

    @classmethod
    def from_dict(cls, d):
        base = cls()
        kw = {}
        for name in ("pacing_sites", "s2_bcl_ms", "n_s2", "cv_factors", "apd_factors"):
            kw[name] = Range.of(d[name]) if name in d else getattr(base, name)
        for name in ("s1_bcl_ms", "t_end"):
            kw[name] = float(d.get(name, getattr(base, name)))
        kw["n_s1"] = int(d.get("n_s1", base.n_s1))
        unknown = set(d) - set(kw)
        if unknown:
            raise ConfigError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**kw)


def load_protocol(path=None):
    if path is None:
        text = resources.files("vtrisk.data").joinpath("protocol.json").read_text()
    else:
        text = Path(path).read_text()
    return ProtocolSpec.from_dict(json.loads(text))


@dataclass(frozen=True)
class SweepConfig:
    config_index: int
    pacing_site_id: int
    s2_bcl_ms: float
    n_s2: int
    cv_factor: float
    apd_factor: float

    @property
    def is_baseline(self):
        return self.cv_factor == 1.0 and self.apd_factor == 1.0

    def to_json(self):
        return {
            "config_index": self.config_index,
            "site": self.pacing_site_id,
            "s2_bcl_ms": self.s2_bcl_ms,
            "n_s2": self.n_s2,
            "cv_factor": self.cv_factor,
            "apd_factor": self.apd_factor,
        }


@dataclass(frozen=True)
class StimulusSchedule:
    times: tuple
    site_ids: tuple
    labels: tuple = field(default=())

    def __post_init__(self):
        if len(self.times) != len(self.site_ids):
            raise ConfigError("times and site ids differ in length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("stimulus times must be strictly increasing")

    def __len__(self):
        return len(self.times)


def enumerate_configs(spec=ProtocolSpec()):
    """Full Cartesian product in lexicographic (site, s2_bcl, n_s2, cv, apd) order."""
    combos = itertools.product(*spec.axes())
    return [SweepConfig(i, site, bcl, n, cv, apd) for i, (site, bcl, n, cv, apd) in enumerate(combos)]


def build_schedule(config, spec=ProtocolSpec()):
    """Six S1 at the S1 BCL, then ``n_s2`` S2 at ``s2_bcl`` intervals."""
    s1 = [i * spec.s1_bcl_ms for i in range(spec.n_s1)]
    last = s1[-1] if s1 else 0.0
    s2 = [last + (i + 1) * config.s2_bcl_ms for i in range(config.n_s2)]
    times = tuple(float(t) for t in s1 + s2)
    if times and times[-1] >= spec.t_end:
        raise ScheduleExceedsHorizon(f"last stimulus at {times[-1]} ms is past t_end={spec.t_end} ms")
    labels = tuple(["S1"] * len(s1) + ["S2"] * len(s2))
    return StimulusSchedule(times, (config.pacing_site_id,) * len(times), labels)
