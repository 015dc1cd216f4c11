"""In-memory relational EHR repository loaded from six CSV tables.

Encounter is the hub table; LabTest, FollowUp and Medication hang off it by
``encounter_id`` and Patient / Organization are joined by their own keys.
Dirty data (null or malformed ICD codes, dangling foreign keys) is kept and
audited rather than silently dropped.
"""

from __future__ import annotations

import csv
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Mapping

log = logging.getLogger(__name__)

TABLE_HEADERS: dict[str, tuple[str, ...]] = {
    "patient": ("patient_id", "gender", "birthday"),
    "encounter": (
        "encounter_id",
        "patient_id",
        "organization_id",
        "commit_time",
        "encounter_type",
        "icd_code",
        "diagnosis",
        "cost",
    ),
    "labtest": ("encounter_id", "test_item_name", "test_value", "commit_time"),
    "followup": ("encounter_id", "systolic_bp", "daily_smoking", "commit_time"),
    "medication": ("encounter_id", "drug_name", "commit_time"),
    "organization": ("organization_id", "name"),
}

ENCOUNTER_TYPES = ("outpatient", "inpatient", "followup", "other")

_GENDER_ALIASES = {"male": "male", "m": "male", "1": "male", "female": "female", "f": "female", "2": "female"}
_ENCOUNTER_ALIASES = {"follow-up": "followup", "follow_up": "followup"}
_TRUE_STRINGS = {"1", "true", "t", "yes", "y"}
_FALSE_STRINGS = {"0", "false", "f", "no", "n"}
_ICD_FORMAT = re.compile(r"^[A-Z][0-9]{2}(\.?[0-9A-Z]{1,4})?$")


class SchemaError(ValueError):
    """A table file is missing or its header does not match the schema."""


@dataclass(frozen=True)
class PatientRow:
    patient_id: str
    gender: str
    birthday: date


@dataclass(frozen=True)
class EncounterRow:
    encounter_id: str
    patient_id: str
    organization_id: str
    commit_time: date
    encounter_type: str
    icd_code: str | None
    diagnosis: str | None
    cost: float | None


@dataclass(frozen=True)
class LabTestRow:
    encounter_id: str
    test_item_name: str
    test_value: float
    commit_time: date


@dataclass(frozen=True)
class FollowUpRow:
    encounter_id: str
    systolic_bp: float | None
    daily_smoking: bool | None
    commit_time: date


@dataclass(frozen=True)
class MedicationRow:
    encounter_id: str
    drug_name: str
    commit_time: date


@dataclass
class LoadReport:
    rows_loaded: dict[str, int] = field(default_factory=dict)
    rows_skipped: dict[str, int] = field(default_factory=dict)
    dangling: dict[str, int] = field(default_factory=dict)

    @property
    def total_skipped(self) -> int:
        return sum(self.rows_skipped.values())

    def summary(self) -> str:
        parts = []
        for table in TABLE_HEADERS:
            skipped = self.rows_skipped.get(table, 0)
            parts.append(f"{table}: {self.rows_loaded.get(table, 0)} loaded, {skipped} row{'s' if skipped != 1 else ''} skipped")
        for key, count in sorted(self.dangling.items()):
            if count:
                parts.append(f"dangling {key}: {count}")
        return "; ".join(parts)


@dataclass(frozen=True)
class IcdAudit:
    n_encounters: int
    n_null: int
    n_valid: int
    defined: bool

    @property
    def null_rate(self) -> float | None:
        return self.n_null / self.n_encounters if self.defined else None

    @property
    def valid_rate(self) -> float | None:
        nonnull = self.n_encounters - self.n_null
        if not self.defined or nonnull == 0:
            return None
        return self.n_valid / nonnull


class EhrRepository:
    """Row collections plus patient / encounter indexes. Treat as immutable once built."""

    def __init__(
        self,
        patients: Iterable[PatientRow] = (),
        encounters: Iterable[EncounterRow] = (),
        labtests: Iterable[LabTestRow] = (),
        followups: Iterable[FollowUpRow] = (),
        medications: Iterable[MedicationRow] = (),
        organizations: Mapping[str, str] | None = None,
        load_report: LoadReport | None = None,
    ):
        self.patients: tuple[PatientRow, ...] = tuple(patients)
        self.encounters: tuple[EncounterRow, ...] = tuple(encounters)
        self.labtests: tuple[LabTestRow, ...] = tuple(labtests)
        self.followups: tuple[FollowUpRow, ...] = tuple(followups)
        self.medications: tuple[MedicationRow, ...] = tuple(medications)
        self.organizations: dict[str, str] = dict(organizations or {})
        self.load_report = load_report or LoadReport()
        self._build_indexes()

    def _build_indexes(self) -> None:
        self.patient_by_id: dict[str, PatientRow] = {}
        for p in self.patients:
            if p.patient_id in self.patient_by_id:
                raise SchemaError(f"duplicate patient_id {p.patient_id!r}")
            self.patient_by_id[p.patient_id] = p

        self.encounter_by_id: dict[str, EncounterRow] = {}
        enc_by_patient: dict[str, list[EncounterRow]] = defaultdict(list)
        for e in self.encounters:
            if e.encounter_id in self.encounter_by_id:
                raise SchemaError(f"duplicate encounter_id {e.encounter_id!r}")
            self.encounter_by_id[e.encounter_id] = e
            enc_by_patient[e.patient_id].append(e)

        def by_patient(rows):
            out = defaultdict(list)
            dangling = 0
            for row in rows:
                enc = self.encounter_by_id.get(row.encounter_id)
                if enc is None:
                    dangling += 1
                    continue
                out[enc.patient_id].append(row)
            return out, dangling

        labs, d_lab = by_patient(self.labtests)
        fus, d_fu = by_patient(self.followups)
        meds, d_med = by_patient(self.medications)

        sort_key = lambda r: r.commit_time  # noqa: E731
        self._encounters_by_patient = {k: tuple(sorted(v, key=sort_key)) for k, v in enc_by_patient.items()}
        self._labs_by_patient = {k: tuple(sorted(v, key=sort_key)) for k, v in labs.items()}
        self._followups_by_patient = {k: tuple(sorted(v, key=sort_key)) for k, v in fus.items()}
        self._medications_by_patient = {k: tuple(sorted(v, key=sort_key)) for k, v in meds.items()}

        self.load_report.dangling = {
            "encounter.patient_id": sum(1 for e in self.encounters if e.patient_id not in self.patient_by_id),
            "encounter.organization_id": sum(
                1 for e in self.encounters if e.organization_id and e.organization_id not in self.organizations
            ),
            "labtest.encounter_id": d_lab,
            "followup.encounter_id": d_fu,
            "medication.encounter_id": d_med,
        }

    def encounters_for(self, patient_id: str) -> tuple[EncounterRow, ...]:
        """Encounters of one patient, sorted by commit_time."""
        return self._encounters_by_patient.get(patient_id, ())

    def labtests_for(self, patient_id: str) -> tuple[LabTestRow, ...]:
        return self._labs_by_patient.get(patient_id, ())

    def followups_for(self, patient_id: str) -> tuple[FollowUpRow, ...]:
        return self._followups_by_patient.get(patient_id, ())

    def medications_for(self, patient_id: str) -> tuple[MedicationRow, ...]:
        return self._medications_by_patient.get(patient_id, ())

    def patient_ids(self) -> list[str]:
        return sorted(self.patient_by_id)

    def __repr__(self) -> str:
        return (
            f"EhrRepository(patients={len(self.patients)}, encounters={len(self.encounters)}, "
            f"labtests={len(self.labtests)}, followups={len(self.followups)}, medications={len(self.medications)})"
        )


def parse_date(text: str) -> date:
    # time-of-day, if present, is ignored
    return date.fromisoformat(text.strip()[:10])


def parse_gender(text: str | None) -> str:
    return _GENDER_ALIASES.get((text or "").strip().lower(), "unknown")


def parse_encounter_type(text: str | None) -> str:
    key = (text or "").strip().lower()
    key = _ENCOUNTER_ALIASES.get(key, key)
    return key if key in ENCOUNTER_TYPES else "other"


def parse_bool(text: str | None) -> bool | None:
    key = (text or "").strip().lower()
    if key in _TRUE_STRINGS:
        return True
    if key in _FALSE_STRINGS:
        return False
    return None


def _opt(text: str | None) -> str | None:
    if text is None:
        return None
    text = text.strip()
    return text or None


def _opt_float(text: str | None) -> float | None:
    text = _opt(text)
    return None if text is None else float(text)


def normalize_icd(code: str | None) -> str | None:
    """Upper-case, trimmed ICD code or None for blanks."""
    code = _opt(code)
    return code.upper() if code else None


def is_icd_format(code: str | None) -> bool:
    """True when ``code`` looks like an ICD-10 code (letter, two digits, optional subdivision)."""
    code = normalize_icd(code)
    return bool(code) and _ICD_FORMAT.match(code) is not None


def _parse_patient(r: dict) -> PatientRow:
    pid = _opt(r["patient_id"])
    if not pid:
        raise ValueError("empty patient_id")
    return PatientRow(pid, parse_gender(r["gender"]), parse_date(r["birthday"]))


def _parse_encounter(r: dict) -> EncounterRow:
    eid, pid = _opt(r["encounter_id"]), _opt(r["patient_id"])
    if not eid or not pid:
        raise ValueError("empty key")
    cost = _opt_float(r["cost"])
    if cost is not None and cost < 0:
        raise ValueError("negative cost")
    return EncounterRow(
        encounter_id=eid,
        patient_id=pid,
        organization_id=_opt(r["organization_id"]) or "",
        commit_time=parse_date(r["commit_time"]),
        encounter_type=parse_encounter_type(r["encounter_type"]),
        icd_code=normalize_icd(r["icd_code"]),
        diagnosis=_opt(r["diagnosis"]),
        cost=cost,
    )


def _parse_labtest(r: dict) -> LabTestRow:
    eid, name = _opt(r["encounter_id"]), _opt(r["test_item_name"])
    if not eid or not name:
        raise ValueError("empty key or test_item_name")
    return LabTestRow(eid, name, float(r["test_value"]), parse_date(r["commit_time"]))


def _parse_followup(r: dict) -> FollowUpRow:
    eid = _opt(r["encounter_id"])
    if not eid:
        raise ValueError("empty encounter_id")
    sbp = _opt_float(r["systolic_bp"])
    if sbp is not None and not 0 < sbp < 400:
        raise ValueError(f"systolic_bp out of range: {sbp}")
    return FollowUpRow(eid, sbp, parse_bool(r["daily_smoking"]), parse_date(r["commit_time"]))


def _parse_medication(r: dict) -> MedicationRow:
    eid, drug = _opt(r["encounter_id"]), _opt(r["drug_name"])
    if not eid or not drug:
        raise ValueError("empty key or drug_name")
    return MedicationRow(eid, drug, parse_date(r["commit_time"]))


def _parse_organization(r: dict) -> tuple[str, str]:
    oid = _opt(r["organization_id"])
    if not oid:
        raise ValueError("empty organization_id")
    return oid, (r["name"] or "").strip()


_PARSERS: dict[str, Callable[[dict], object]] = {
    "patient": _parse_patient,
    "encounter": _parse_encounter,
    "labtest": _parse_labtest,
    "followup": _parse_followup,
    "medication": _parse_medication,
    "organization": _parse_organization,
}


def _read_table(table: str, path: Path, report: LoadReport) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{table} table not found: {path}")
    expected = TABLE_HEADERS[table]
    rows = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lstrip("﻿") for h in header) != expected:
            raise SchemaError(f"{path}: header {header!r} does not match {list(expected)}")
        parse = _PARSERS[table]
        for lineno, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(expected):
                log.warning("%s:%d: expected %d fields, got %d; skipped", path, lineno, len(expected), len(values))
                skipped += 1
                continue
            try:
                rows.append(parse(dict(zip(expected, values))))
            except (ValueError, KeyError) as exc:
                log.warning("%s:%d: %s; skipped", path, lineno, exc)
                skipped += 1
    report.rows_loaded[table] = len(rows)
    report.rows_skipped[table] = skipped
    return rows


def load_repository(table_paths: Mapping[str, str | Path]) -> EhrRepository:
    """Load the six tables named in ``table_paths`` (keys as in ``TABLE_HEADERS``).

    Missing files and header mismatches raise; rows with unparseable required
    fields are skipped and counted in ``repo.load_report``.
    """
    missing = set(TABLE_HEADERS) - set(table_paths)
    if missing:
        raise SchemaError(f"no path given for tables: {sorted(missing)}")
    report = LoadReport()
    tables = {name: _read_table(name, table_paths[name], report) for name in TABLE_HEADERS}
    repo = EhrRepository(
        patients=tables["patient"],
        encounters=tables["encounter"],
        labtests=tables["labtest"],
        followups=tables["followup"],
        medications=tables["medication"],
        organizations=dict(tables["organization"]),
        load_report=report,
    )
    if report.total_skipped:
        log.warning("load report: %s", report.summary())
    return repo


def table_paths_in(directory: str | Path) -> dict[str, Path]:
    """Conventional ``<table>.csv`` layout inside one directory."""
    directory = Path(directory)
    return {name: directory / f"{name}.csv" for name in TABLE_HEADERS}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_repository(repo: EhrRepository, directory: str | Path) -> dict[str, Path]:
    """Write the repository back out as six CSVs; reloading yields the same rows."""
    paths = table_paths_in(directory)
    Path(directory).mkdir(parents=True, exist_ok=True)
    collections = {
        "patient": repo.patients,
        "encounter": repo.encounters,
        "labtest": repo.labtests,
        "followup": repo.followups,
        "medication": repo.medications,
    }
    for name, rows in collections.items():
        with open(paths[name], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADERS[name])
            for row in rows:
                w.writerow([_fmt(getattr(row, col)) for col in TABLE_HEADERS[name]])
    with open(paths["organization"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADERS["organization"])
        for oid, name in repo.organizations.items():
            w.writerow([oid, name])
    return paths


def audit_icd_validity(repo: EhrRepository, icd_catalog: set[str] | frozenset[str]) -> IcdAudit:
    """Null rate over all encounters, valid rate over non-null codes against ``icd_catalog``.

    Catalog entries are compared after upper-casing; both ``E11.901`` and
    ``E11901`` spellings match a catalog entry written either way.
    """
    catalog = {c.upper() for c in icd_catalog} | {c.upper().replace(".", "") for c in icd_catalog}
    n = len(repo.encounters)
    n_null = sum(1 for e in repo.encounters if e.icd_code is None)
    n_valid = sum(
        1
        for e in repo.encounters
        if e.icd_code is not None and (e.icd_code in catalog or e.icd_code.replace(".", "") in catalog)
    )
    return IcdAudit(n_encounters=n, n_null=n_null, n_valid=n_valid, defined=n > 0)
