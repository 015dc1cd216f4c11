"""ASCVD-in-T2DM cohort construction.

Outcome and index events are found by fuzzy (normalized-substring) matching of
the free-text diagnosis column against a replaceable dictionary. Patients pass
an inclusion funnel, then fall into one of three groups relative to their index
date; the final cohort keeps the ``ascvd_after`` (label 1) and ``ascvd_never``
(label 0) groups.
"""

from __future__ import annotations

import csv
import json
import logging
import unicodedata
from dataclasses import dataclass, field
from datetime import date, timedelta
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .ehr_store import EhrRepository, EncounterRow

log = logging.getLogger(__name__)

MATCH_MODES = ("substring", "normalized-substring")
GROUPS = ("ascvd_before", "ascvd_after", "ascvd_never")

FUNNEL_CRITERIA = (
    "no T2DM index event in index period",
    "no visit in lookback window",
    "no T2DM outpatient visit after index",
    "gestational or type 1 diabetes",
    "under 18",
    "unknown gender",
)

DEFAULT_DICTIONARY = Path(__file__).parent / "data" / "dictionary.json"


@dataclass(frozen=True)
class Pattern:
    text: str
    mode: str = "normalized-substring"

    def __post_init__(self):
        if self.mode not in MATCH_MODES:
            raise ValueError(f"unknown match mode {self.mode!r}")
        if not self.text:
            raise ValueError("empty pattern")


@lru_cache(maxsize=1 << 16)
def normalize_text(text: str) -> str:
    """Case-fold and drop whitespace, punctuation and symbols."""
    text = unicodedata.normalize("NFKC", text).casefold()
    return "".join(ch for ch in text if unicodedata.category(ch)[0] not in "PZSC")


@dataclass
class DiagnosisDictionary:
    ascvd_patterns: list[Pattern]
    t2dm_patterns: list[Pattern]
    t2dm_drug_classes: set[str]
    drug_class_map: dict[str, str]
    exclusion_patterns: list[Pattern] = field(default_factory=list)
    ascvd_icd_prefixes: tuple[str, ...] = ()
    t2dm_icd_prefixes: tuple[str, ...] = ("E11",)
    exclusion_icd_prefixes: tuple[str, ...] = ("E10", "O24")
    antihypertensive_classes: set[str] = field(default_factory=set)
    drug_classes: set[str] | None = None
    lab_items: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ascvd_patterns or not self.t2dm_patterns:
            raise ValueError("ascvd_patterns and t2dm_patterns must be non-empty")
        if self.drug_classes is not None:
            unknown = set(self.drug_class_map.values()) - set(self.drug_classes)
            if unknown:
                raise ValueError(f"drug_class_map uses undeclared classes: {sorted(unknown)}")
        self._drug_lookup = {k.strip().casefold(): v for k, v in self.drug_class_map.items()}
        self._lab_lookup = {k.strip().casefold(): v for k, v in self.lab_items.items()}

    def drug_class(self, drug_name: str) -> str | None:
        return self._drug_lookup.get(drug_name.strip().casefold())

    def lab_item(self, test_item_name: str) -> dict | None:
        """``{"factor", "scale"}`` for a lab item name, or None if not a PCE lab."""
        return self._lab_lookup.get(test_item_name.strip().casefold())

    @classmethod
    def from_dict(cls, doc: dict) -> "DiagnosisDictionary":
        def patterns(items):
            out = []
            for item in items or ():
                if isinstance(item, str):
                    out.append(Pattern(item))
                else:
                    out.append(Pattern(item["pattern"], item.get("mode", "normalized-substring")))
            return out

        return cls(
            ascvd_patterns=patterns(doc["ascvd_patterns"]),
            t2dm_patterns=patterns(doc["t2dm_patterns"]),
            t2dm_drug_classes=set(doc["t2dm_drug_classes"]),
            drug_class_map=dict(doc["drug_class_map"]),
            exclusion_patterns=patterns(doc.get("exclusion_patterns")),
            ascvd_icd_prefixes=tuple(p.upper() for p in doc.get("ascvd_icd_prefixes", ())),
            t2dm_icd_prefixes=tuple(p.upper() for p in doc.get("t2dm_icd_prefixes", ("E11",))),
            exclusion_icd_prefixes=tuple(p.upper() for p in doc.get("exclusion_icd_prefixes", ("E10", "O24"))),
            antihypertensive_classes=set(doc.get("antihypertensive_classes", ())),
            drug_classes=set(doc["drug_classes"]) if "drug_classes" in doc else None,
            lab_items=dict(doc.get("lab_items", {})),
        )


def load_dictionary(path: str | Path = DEFAULT_DICTIONARY) -> DiagnosisDictionary:
    with open(path, encoding="utf-8") as fh:
        return DiagnosisDictionary.from_dict(json.load(fh))


@dataclass(frozen=True)
class StudyWindow:
    index_period_start: date = date(2012, 8, 1)
    index_period_end: date = date(2016, 3, 31)
    lookback_days: int = 360
    observation_days: int = 365

    def __post_init__(self):
        if not self.index_period_start < self.index_period_end:
            raise ValueError("index_period_start must precede index_period_end")
        if self.lookback_days <= 0 or self.observation_days <= 0:
            raise ValueError("lookback_days and observation_days must be positive")


@dataclass(frozen=True)
class CohortInstance:
    patient_id: str
    index_date: date
    group: str
    label: int
    event_or_censor_days: int
    censored: bool

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}")
        if (self.label == 1) != (self.group == "ascvd_after"):
            raise ValueError("label must be 1 exactly for the ascvd_after group")
        if self.event_or_censor_days < 0:
            raise ValueError("event_or_censor_days must be non-negative")


@dataclass
class FunnelReport:
    """Sequential exclusion counts, first failing criterion wins."""

    n_patients: int = 0
    excluded: dict[str, int] = field(default_factory=lambda: {c: 0 for c in FUNNEL_CRITERIA})
    group_counts: dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUPS})

    def rows(self) -> list[tuple[str, int, int]]:
        remaining = self.n_patients
        out = [("all patients", 0, remaining)]
        for criterion in FUNNEL_CRITERIA:
            remaining -= self.excluded[criterion]
            out.append((criterion, self.excluded[criterion], remaining))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["criterion", "excluded_count", "remaining_count"])
            w.writerows(self.rows())


def match_diagnosis(text: str | None, patterns: Sequence[Pattern]) -> bool:
    if not text:
        return False
    normalized = None
    for p in patterns:
        if p.mode == "substring":
            if p.text in text:
                return True
        else:
            if normalized is None:
                normalized = normalize_text(text)
            needle = normalize_text(p.text)
            if needle and needle in normalized:
                return True
    return False


def _icd_startswith(code: str | None, prefixes: Iterable[str]) -> bool:
    return bool(code) and any(code.startswith(p) for p in prefixes)


def is_t2dm_encounter(enc: EncounterRow, dictionary: DiagnosisDictionary) -> bool:
    return match_diagnosis(enc.diagnosis, dictionary.t2dm_patterns) or _icd_startswith(
        enc.icd_code, dictionary.t2dm_icd_prefixes
    )


def is_ascvd_encounter(enc: EncounterRow, dictionary: DiagnosisDictionary) -> bool:
    return match_diagnosis(enc.diagnosis, dictionary.ascvd_patterns) or _icd_startswith(
        enc.icd_code, dictionary.ascvd_icd_prefixes
    )


def is_excluded_encounter(enc: EncounterRow, dictionary: DiagnosisDictionary) -> bool:
    return match_diagnosis(enc.diagnosis, dictionary.exclusion_patterns) or _icd_startswith(
        enc.icd_code, dictionary.exclusion_icd_prefixes
    )


def find_index_event(
    repo: EhrRepository, patient_id: str, dictionary: DiagnosisDictionary, window: StudyWindow
) -> date | None:
    """Earliest T2DM diagnosis or T2DM-class prescription inside the index period."""
    lo, hi = window.index_period_start, window.index_period_end
    candidates = [
        e.commit_time for e in repo.encounters_for(patient_id) if lo <= e.commit_time <= hi and is_t2dm_encounter(e, dictionary)
    ]
    candidates += [
        m.commit_time
        for m in repo.medications_for(patient_id)
        if lo <= m.commit_time <= hi and dictionary.drug_class(m.drug_name) in dictionary.t2dm_drug_classes
    ]
    return min(candidates) if candidates else None


def age_in_years(birthday: date, on: date) -> float:
    return (on - birthday).days / 365


def _assess(repo, patient_id, dictionary, window):
    """Return (failed criterion or None, instance-or-None)."""
    index = find_index_event(repo, patient_id, dictionary, window)
    if index is None:
        return FUNNEL_CRITERIA[0], None
    encounters = repo.encounters_for(patient_id)
    lookback_lo = window.index_period_start - timedelta(days=window.lookback_days)
    if not any(lookback_lo <= e.commit_time < window.index_period_start for e in encounters):
        return FUNNEL_CRITERIA[1], None
    if not any(
        e.commit_time >= index and e.encounter_type == "outpatient" and is_t2dm_encounter(e, dictionary)
        for e in encounters
    ):
        return FUNNEL_CRITERIA[2], None
    if any(is_excluded_encounter(e, dictionary) for e in encounters):
        return FUNNEL_CRITERIA[3], None
    patient = repo.patient_by_id.get(patient_id)
    if patient is None:
        # encounters without a patient row have no birthday or gender
        return FUNNEL_CRITERIA[5], None
    if age_in_years(patient.birthday, index) < 18:
        return FUNNEL_CRITERIA[4], None
    if patient.gender == "unknown":
        return FUNNEL_CRITERIA[5], None

    first_ascvd = next((e.commit_time for e in encounters if is_ascvd_encounter(e, dictionary)), None)
    last_seen = encounters[-1].commit_time
    if first_ascvd is not None and first_ascvd < index:
        group, label, days, censored = "ascvd_before", 0, 0, True
    elif first_ascvd is not None:
        group, label, days, censored = "ascvd_after", 1, (first_ascvd - index).days, False
    else:
        group, label, days, censored = "ascvd_never", 0, max(0, (last_seen - index).days), True
    return None, CohortInstance(patient_id, index, group, label, days, censored)


def apply_inclusion(
    repo: EhrRepository,
    dictionary: DiagnosisDictionary,
    window: StudyWindow,
    funnel: FunnelReport | None = None,
) -> list[CohortInstance]:
    """Included patients over all three groups, sorted by patient_id.

    Pass a ``FunnelReport`` to collect exclusion tallies.
    """
    funnel = funnel if funnel is not None else FunnelReport()
    patient_ids = sorted(set(repo.patient_by_id) | {e.patient_id for e in repo.encounters})
    funnel.n_patients = len(patient_ids)
    included = []
    for pid in patient_ids:
        reason, instance = _assess(repo, pid, dictionary, window)
        if reason is not None:
            funnel.excluded[reason] += 1
            continue
        funnel.group_counts[instance.group] += 1
        included.append(instance)
    return included


def finalize_cohort(instances: Iterable[CohortInstance]) -> list[CohortInstance]:
    """Drop the ``ascvd_before`` group; the remaining instances carry labels and times."""
    cohort = sorted((i for i in instances if i.group != "ascvd_before"), key=lambda i: i.patient_id)
    n_pos = sum(i.label for i in cohort)
    if cohort and (n_pos == 0 or n_pos == len(cohort)):
        log.warning("cohort has a single class (%d positives of %d); AUC will be undefined", n_pos, len(cohort))
    return cohort


def write_cohort_csv(cohort: Sequence[CohortInstance], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "index_date", "group", "label", "event_or_censor_days", "censored"])
        for i in cohort:
            w.writerow([i.patient_id, i.index_date.isoformat(), i.group, i.label, i.event_or_censor_days, int(i.censored)])


def read_cohort_csv(path: str | Path) -> list[CohortInstance]:
    with open(path, newline="") as fh:
        return [
            CohortInstance(
                patient_id=r["patient_id"],
                index_date=date.fromisoformat(r["index_date"]),
                group=r["group"],
                label=int(r["label"]),
                event_or_censor_days=int(r["event_or_censor_days"]),
                censored=bool(int(r["censored"])),
            )
            for r in csv.DictReader(fh)
        ]
