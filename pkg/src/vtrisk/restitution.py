"""APD and CV restitution curves with protocol and scenario multipliers.

Multipliers are stored as an ordered tuple and applied one after another, so
adding a scenario factor ``m`` scales every returned value by exactly ``m``
(one floating-point multiplication, no refitting).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, NotExcitable
from .voxel_model import Layer, TissueLabel

BETA_BLOCKER_APD = 1.45
BETA_BLOCKER_CV = 0.94

_TISSUE_NAMES = {"HEALTHY": TissueLabel.HEALTHY, "BORDER_ZONE": TissueLabel.BORDER_ZONE, "BZ": TissueLabel.BORDER_ZONE}
_LAYER_NAMES = {"ENDO": Layer.ENDO, "MID": Layer.MID, "EPI": Layer.EPI}


@dataclass(frozen=True)
class RestitutionCurve:
    """``apd``: ``asymptote - amplitude*exp(-DI/tau)`` (ms).
    ``cv``: ``asymptote*(1 - amplitude*exp(-DI/tau))`` (mm/ms)."""

    kind: str
    asymptote: float
    amplitude: float
    tau: float
    di_min: float = 20.0

    def __post_init__(self):
        if self.kind not in ("apd", "cv"):
            raise ConfigError(f"unknown curve kind {self.kind!r}")
        if self.asymptote <= 0 or self.tau <= 0 or self.amplitude < 0 or self.di_min < 0:
            raise ConfigError(f"invalid restitution parameters {self}")
        if self(self.di_min) <= 0:
            raise ConfigError(f"curve is non-positive at di_min: {self}")

    def __call__(self, di):
        di = np.asarray(di, dtype=np.float64)
        decay = np.exp(-di / self.tau)
        if self.kind == "apd":
            out = self.asymptote - self.amplitude * decay
        else:
            out = self.asymptote * (1.0 - self.amplitude * decay)
        return out if out.ndim else float(out)

    def to_json(self):
        return {"asymptote": self.asymptote, "amplitude": self.amplitude, "tau": self.tau, "di_min": self.di_min}


def _check_excitable(tissue):
    tissue = TissueLabel(tissue)
    if tissue not in (TissueLabel.HEALTHY, TissueLabel.BORDER_ZONE):
        raise NotExcitable(f"{tissue.name} tissue has no restitution curve")
    return tissue


@dataclass(frozen=True)
class RestitutionSet:
    apdr: dict
    cvr: dict
    apd_scale: tuple = (1.0,)
    cv_scale: tuple = (1.0,)
    scenario: str = "BASELINE"

    def __post_init__(self):
        if any(f <= 0 for f in self.apd_scale + self.cv_scale):
            raise ConfigError("restitution factors must be > 0")
        for tissue in (TissueLabel.HEALTHY, TissueLabel.BORDER_ZONE):
            if tissue not in self.cvr:
                raise ConfigError(f"missing CV curve for {tissue.name}")
            for layer in (Layer.ENDO, Layer.MID, Layer.EPI):
                if (tissue, layer) not in self.apdr:
                    raise ConfigError(f"missing APD curve for {tissue.name}/{layer.name}")

    @property
    def apd_factor(self):
        return math.prod(self.apd_scale)

    @property
    def cv_factor(self):
        return math.prod(self.cv_scale)

    def apd_curve(self, tissue, layer):
        return self.apdr[(_check_excitable(tissue), Layer(layer))]

    def cv_curve(self, tissue):
        return self.cvr[_check_excitable(tissue)]

    def apd(self, tissue, layer, di):
        val = self.apd_curve(tissue, layer)(di)
        for f in self.apd_scale:
            val = val * f
        return val

    def cv(self, tissue, di):
        val = self.cv_curve(tissue)(di)
        for f in self.cv_scale:
            val = val * f
        return val

    def with_protocol_factors(self, cv_factor, apd_factor):
        """Set the sweep multipliers (first slot), keeping scenario factors."""
        return dataclasses.replace(
            self,
            apd_scale=(float(apd_factor),) + self.apd_scale[1:],
            cv_scale=(float(cv_factor),) + self.cv_scale[1:],
        )

    def scaled(self, apd=1.0, cv=1.0, scenario=None):
        return dataclasses.replace(
            self,
            apd_scale=self.apd_scale + (float(apd),),
            cv_scale=self.cv_scale + (float(cv),),
            scenario=scenario or self.scenario,
        )

    def max_apd(self):
        """Upper bound of any APD this set can produce (ms)."""
        return max(c.asymptote for c in self.apdr.values()) * self.apd_factor

    def to_json(self):
        return {
            "scenario": self.scenario,
            "apd_scale": list(self.apd_scale),
            "cv_scale": list(self.cv_scale),
            "apdr": {
                f"{t.name}/{l.name}": c.to_json() for (t, l), c in sorted(self.apdr.items())
            },
            "cvr": {t.name: c.to_json() for t, c in sorted(self.cvr.items())},
        }

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def apd(rset, tissue, layer, di):
    return rset.apd(tissue, layer, di)


def cv(rset, tissue, di):
    return rset.cv(tissue, di)


def apply_beta_blocker(rset):
    """APD x1.45, CV x0.94 on top of whatever factors ``rset`` carries."""
    return rset.scaled(apd=BETA_BLOCKER_APD, cv=BETA_BLOCKER_CV, scenario="BETA_BLOCKER")


def restitution_from_dict(d):
    try:
        apdr = {}
        for key, p in d["apdr"].items():
            tname, lname = key.split("/")
            apdr[(_TISSUE_NAMES[tname], _LAYER_NAMES[lname])] = RestitutionCurve("apd", **p)
        cvr = {_TISSUE_NAMES[t]: RestitutionCurve("cv", **p) for t, p in d["cvr"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad restitution table: {exc}") from exc
    return RestitutionSet(
        apdr,
        cvr,
        tuple(float(f) for f in d.get("apd_scale", [1.0])),
        tuple(float(f) for f in d.get("cv_scale", [1.0])),
        d.get("scenario", "BASELINE"),
    )


def load_restitution(path=None):
    """Load ``restitution.json``; the packaged default table when ``path`` is None."""
    if path is None:
        text = resources.files("vtrisk.data").joinpath("restitution.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"restitution file: {exc}") from exc
    return restitution_from_dict(d)


default_restitution = load_restitution
