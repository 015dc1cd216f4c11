"""Pooled Cohort Equations 10-year ASCVD risk from a coefficient file.

    risk = 1 - S0 ** exp(L - mean_lp),   L = sum(beta * term(profile))

Coefficients are data: ``data/pce_coefficients.json`` carries the published
sex/race strata. Race is fixed to "white or other" and diabetes to true for the
cohort, but both can be overridden for reference checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import KnownFactorProfile

DEFAULT_COEFFICIENTS = Path(__file__).parent / "data" / "pce_coefficients.json"

STRATA = ("male_white", "female_white", "male_black", "female_black")


TERM_GRAMMAR: dict[str, Callable[[dict], float]] = {
    "ln(age)": lambda c: c["ln_age"],
    "ln(age)^2": lambda c: c["ln_age"] ** 2,
    "ln(tc)": lambda c: c["ln_tc"],
    "ln(age)*ln(tc)": lambda c: c["ln_age"] * c["ln_tc"],
    "ln(hdl)": lambda c: c["ln_hdl"],
    "ln(age)*ln(hdl)": lambda c: c["ln_age"] * c["ln_hdl"],
    "ln(sbp)[treated]": lambda c: c["ln_sbp"] * c["treated"],
    "ln(age)*ln(sbp)[treated]": lambda c: c["ln_age"] * c["ln_sbp"] * c["treated"],
    "ln(sbp)[untreated]": lambda c: c["ln_sbp"] * (1.0 - c["treated"]),
    "ln(age)*ln(sbp)[untreated]": lambda c: c["ln_age"] * c["ln_sbp"] * (1.0 - c["treated"]),
    "smoker": lambda c: c["smoker"],
    "ln(age)*smoker": lambda c: c["ln_age"] * c["smoker"],
    "diabetes": lambda c: c["diabetes"],
}


class PceDomainError(ValueError):
    """A continuous PCE input is non-positive, so its logarithm is undefined."""


@dataclass(frozen=True)
class Stratum:
    terms: tuple[tuple[str, float], ...]
    mean_lp: float
    s0: float

    def __post_init__(self):
        if not 0.0 < self.s0 < 1.0:
            raise ValueError(f"baseline survival must lie in (0, 1), got {self.s0}")
        unknown = [d for d, _ in self.terms if d not in TERM_GRAMMAR]
        if unknown:
            raise ValueError(f"unknown term descriptors: {unknown}")

    def beta(self, descriptor: str) -> float:
        return sum(b for d, b in self.terms if d == descriptor)


@dataclass(frozen=True)
class PceCoefficientTable:
    strata: dict[str, Stratum]
    version: str = ""
    units: dict[str, str] | None = None

    def stratum(self, gender: int, race: str = "white_or_other") -> Stratum:
        sex = "male" if gender == 1 else "female"
        key = f"{sex}_{'black' if race in ('black', 'african_american') else 'white'}"
        return self.strata[key]


def load_coefficients(path: str | Path = DEFAULT_COEFFICIENTS) -> PceCoefficientTable:
    with open(path) as fh:
        doc = json.load(fh)
    strata = {}
    for key in STRATA:
        s = doc["strata"][key]
        strata[key] = Stratum(tuple((t["descriptor"], float(t["beta"])) for t in s["terms"]), float(s["mean_lp"]), float(s["s0"]))
    return PceCoefficientTable(strata, doc.get("version", ""), doc.get("units"))


def _log(name: str, value: float | None) -> float:
    if value is None:
        raise ValueError(f"PCE input {name} is missing; run complete_case_filter first")
    if not value > 0 or not math.isfinite(value):
        raise PceDomainError(f"PCE input {name} must be positive and finite, got {value}")
    return math.log(value)


def linear_predictor(profile: KnownFactorProfile, stratum: Stratum) -> float:
    if profile.smoker is None:
        raise ValueError("PCE input smoker is missing; run complete_case_filter first")
    covariates = {
        "ln_age": _log("age", profile.age),
        "ln_tc": _log("tc", profile.tc),
        "ln_hdl": _log("hdl_c", profile.hdl_c),
        "ln_sbp": _log("sbp", profile.sbp),
        "treated": 1.0 if profile.hbp_treated else 0.0,
        "smoker": 1.0 if profile.smoker else 0.0,
        "diabetes": 1.0 if profile.diabetes else 0.0,
    }
    return sum(beta * TERM_GRAMMAR[d](covariates) for d, beta in stratum.terms)


def pce_risk(profile: KnownFactorProfile, table: PceCoefficientTable) -> float:
    stratum = table.stratum(profile.gender, profile.race)
    lp = linear_predictor(profile, stratum)
    return 1.0 - stratum.s0 ** math.exp(lp - stratum.mean_lp)


class ScoringError(ValueError):
    def __init__(self, patient_id: str, cause: Exception):
        super().__init__(f"instance {patient_id}: {cause}")
        self.patient_id = patient_id
        self.cause = cause


def score_cohort(profiles: Sequence[KnownFactorProfile], table: PceCoefficientTable) -> np.ndarray:
    """PCE scores aligned with ``profiles``; the knowledge score vector with k = 1."""
    out = np.empty(len(profiles))
    for i, p in enumerate(profiles):
        try:
            out[i] = pce_risk(p, table)
        except ValueError as exc:
            raise ScoringError(p.patient_id, exc) from exc
    return out
