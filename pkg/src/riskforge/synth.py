"""Synthetic EHR repositories with a planted, known outcome mechanism.

Each eligible patient gets PCE risk factors, a one-year ICD history and an
ASCVD outcome drawn from

    P(event) = sigmoid(b0 + knowledge * (logit(pce) - mean) + data * sum(code effects) + noise)

with ``b0`` solved so the expected event rate matches ``event_rate``. A fraction of
patients is made deliberately ineligible (one failed inclusion criterion each)
so the cohort funnel has something to exclude. ``ground_truth.csv`` records the
true probabilities for oracle tests.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .cohort import StudyWindow
from .ehr_store import TABLE_HEADERS
from .features import KnownFactorProfile
from .pce import PceCoefficientTable, load_coefficients, pce_risk

log = logging.getLogger(__name__)

# 3-character categories with planted log-odds effects
PLANTED_EFFECTS = {"I10": 0.8, "E78": 0.6, "H81": 0.5, "G47": 0.5, "J45": 0.6, "R09": 0.4}
BACKGROUND_CODES = (
    "A09", "B35", "C34", "D64", "E03", "E66", "F32", "F41", "G43", "H10", "H25", "H52",
    "H66", "J00", "J06", "J18", "J31", "J40", "K21", "K29", "K59", "L30", "M13", "M24",
    "M25", "M54", "M81", "N18", "N39", "O80", "Q21", "R05", "R10", "R51", "R53", "S52",
    "T78", "W19", "Z01",
)
INELIGIBLE_KINDS = ("ascvd_before", "under_18", "unknown_gender", "type1", "no_lookback", "no_index", "no_t2dm_visit")

ASCVD_EVENTS = (
    ("acute myocardial infarction", "I21.9"),
    ("cerebral infarction", "I63.9"),
    ("unstable angina", "I20.0"),
    ("transient ischemic attack", "G45.9"),
    ("coronary heart disease, stable angina", "I25.1"),
)
T2DM_DRUGS = ("metformin", "glimepiride", "sitagliptin", "acarbose")
BP_DRUGS = ("amlodipine", "valsartan", "enalapril", "metoprolol", "hydrochlorothiazide")
OTHER_DRUGS = ("atorvastatin", "aspirin", "omeprazole", "amoxicillin")


@dataclass
class SynthSpec:
    n_patients: int = 1000
    event_rate: float = 0.35
    knowledge_signal_strength: float = 1.0
    data_signal_strength: float = 1.0
    missingness: dict[str, float] = field(
        default_factory=lambda: {"tc": 0.1, "hdl_c": 0.12, "sbp": 0.05, "smoker": 0.08}
    )
    ineligible_rate: float = 0.1
    code_prevalence: float = 0.2
    noise_sd: float = 0.5
    dirty_icd_rate: float = 0.05
    max_follow_up_days: int = 1300
    seed: int = 0
    window: StudyWindow = field(default_factory=StudyWindow)

    def __post_init__(self):
        if self.n_patients < 10:
            raise ValueError("n_patients must be >= 10")
        rates = [self.event_rate, self.ineligible_rate, self.code_prevalence, self.dirty_icd_rate, *self.missingness.values()]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")
        if self.knowledge_signal_strength < 0 or self.data_signal_strength < 0:
            raise ValueError("signal strengths must be non-negative")
        unknown = set(self.missingness) - {"tc", "hdl_c", "sbp", "smoker"}
        if unknown:
            raise ValueError(f"unknown missingness factors: {sorted(unknown)}")
        if self.event_rate in (0.0, 1.0) or self.n_patients * min(self.event_rate, 1 - self.event_rate) < 5:
            log.warning("event_rate %.3f with %d patients leaves too few events of one class", self.event_rate, self.n_patients)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["window"] = {k: (v.isoformat() if isinstance(v, date) else v) for k, v in asdict(self.window).items()}
        return doc


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _solve_intercept(linear: np.ndarray, rate: float) -> float:
    """b0 with mean(sigmoid(b0 + linear)) == rate, by bisection."""
    if rate <= 0.0:
        return -50.0
    if rate >= 1.0:
        return 50.0
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + linear).mean() < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _Writer:
    def __init__(self):
        self.rows = {name: [] for name in TABLE_HEADERS}
        self.n_enc = 0

    def encounter(self, pid, when, etype, icd=None, diagnosis=None, org="ORG1", cost=None):
        self.n_enc += 1
        eid = f"E{self.n_enc:08d}"
        self.rows["encounter"].append([eid, pid, org, when.isoformat(), etype, icd or "", diagnosis or "", "" if cost is None else f"{cost:.2f}"])
        return eid


def _random_code(rng, category: str) -> str:
    return f"{category}.{int(rng.integers(0, 10))}{int(rng.integers(0, 10))}"


def _clear_lookback(w: _Writer, starts: dict, win: StudyWindow) -> None:
    """Push one patient's pre-period rows out of the lookback window (keeps linked rows in step)."""
    lo = win.index_period_start - timedelta(days=win.lookback_days)
    moved = {}
    for row in w.rows["encounter"][starts["encounter"] :]:
        when = date.fromisoformat(row[3])
        if lo <= when < win.index_period_start:
            row[3] = (when - timedelta(days=win.lookback_days)).isoformat()
            moved[row[0]] = win.lookback_days
    for name in ("labtest", "followup", "medication"):
        for row in w.rows[name][starts[name] :]:
            if row[0] in moved:
                row[-1] = (date.fromisoformat(row[-1]) - timedelta(days=moved[row[0]])).isoformat()


def generate_synthetic(
    spec: SynthSpec,
    output_dir: str | Path,
    coefficients: PceCoefficientTable | None = None,
) -> dict[str, Path]:
    """Write the six EHR tables plus ``ground_truth.csv`` and ``synth_spec.json``."""
    table = coefficients or load_coefficients()
    rng = np.random.default_rng(spec.seed)
    win = spec.window
    n = spec.n_patients
    period = (win.index_period_end - win.index_period_start).days

    # patient-level draws, vectorised and in a fixed order
    male = rng.random(n) < 0.5
    age = rng.uniform(40.0, 79.0, n)
    tc = np.clip(rng.normal(195.0, 38.0, n), 110.0, 320.0).round(1)
    hdl = np.clip(rng.normal(48.0, 13.0, n), 20.0, 100.0).round(1)
    sbp = np.clip(rng.normal(136.0, 18.0, n), 95.0, 200.0).round(0)
    treated = rng.random(n) < 0.45
    smoker = rng.random(n) < 0.2
    index_offset = rng.integers(0, period - 30, n)
    all_codes = list(PLANTED_EFFECTS) + list(BACKGROUND_CODES)
    has_code = rng.random((n, len(all_codes))) < spec.code_prevalence
    noise = rng.normal(0.0, spec.noise_sd, n)
    ineligible = rng.random(n) < spec.ineligible_rate
    ineligible_kind = rng.integers(0, len(INELIGIBLE_KINDS), n)
    missing = {f: rng.random(n) < spec.missingness.get(f, 0.0) for f in ("tc", "hdl_c", "sbp", "smoker")}

    pce = np.array(
        [
            pce_risk(KnownFactorProfile(f"P{i}", int(male[i]), float(age[i]), float(tc[i]), float(hdl[i]), float(sbp[i]), bool(treated[i]), bool(smoker[i])), table)
            for i in range(n)
        ]
    )
    knowledge_logit = _logit(pce) - _logit(pce).mean()
    effects = np.array([PLANTED_EFFECTS.get(c, 0.0) for c in all_codes])
    data_effect = has_code.astype(float) @ effects
    data_effect = data_effect - data_effect.mean()
    linear = spec.knowledge_signal_strength * knowledge_logit + spec.data_signal_strength * data_effect + noise
    b0 = _solve_intercept(linear, spec.event_rate)
    true_risk = _sigmoid(b0 + linear)
    label = (rng.random(n) < true_risk).astype(int)
    event_day = rng.integers(1, spec.max_follow_up_days, n)
    censor_day = rng.integers(180, spec.max_follow_up_days, n)

    w = _Writer()
    orgs = [f"ORG{j}" for j in range(1, 6)]
    w.rows["organization"] = [[o, f"Hospital {o[-1]}"] for o in orgs]
    gender_spellings = {True: ("male", "M", "1"), False: ("female", "F", "2")}
    truth = []
    for i in range(n):
        pid = f"P{i + 1:06d}"
        starts = {name: len(rows) for name, rows in w.rows.items()}
        org = orgs[int(rng.integers(0, len(orgs)))]
        index = win.index_period_start + timedelta(days=int(index_offset[i]))
        kind = INELIGIBLE_KINDS[ineligible_kind[i]] if ineligible[i] else None
        patient_age = float(age[i]) if kind != "under_18" else float(rng.uniform(12.0, 17.5))
        birthday = index - timedelta(days=int(round(patient_age * 365)))
        gender = gender_spellings[bool(male[i])][int(rng.integers(0, 3))] if kind != "unknown_gender" else ""
        w.rows["patient"].append([pid, gender, birthday.isoformat()])

        def day(offset):
            return index + timedelta(days=int(offset))

        if kind != "no_lookback":
            lb = win.index_period_start - timedelta(days=int(rng.integers(1, win.lookback_days)))
            w.encounter(pid, lb, "outpatient", _random_code(rng, "Z00"), "general examination", org)
        if kind == "no_index":
            # diabetes documented only before the index period
            before = win.index_period_start - timedelta(days=int(rng.integers(1, 200)))
            w.encounter(pid, before, "outpatient", "E11.9", "type 2 diabetes mellitus", org)
        elif kind == "no_t2dm_visit":
            # prescription-only index; diabetes later coded on an inpatient stay, never outpatient
            eid = w.encounter(pid, index, "outpatient", None, None, org)
            w.rows["medication"].append([eid, T2DM_DRUGS[int(rng.integers(0, len(T2DM_DRUGS)))], index.isoformat()])
            w.encounter(pid, day(rng.integers(7, 120)), "inpatient", "E11.9", "type 2 diabetes mellitus", org)
        else:
            if rng.random() < 0.25:
                eid = w.encounter(pid, index, "outpatient", None, None, org)
                w.rows["medication"].append([eid, T2DM_DRUGS[int(rng.integers(0, len(T2DM_DRUGS)))], index.isoformat()])
                visit = day(rng.integers(7, 120))
                w.encounter(pid, visit, "outpatient", "E11.9", "type 2 diabetes mellitus", org, cost=float(rng.uniform(20, 300)))
            else:
                w.encounter(pid, index, "outpatient", _random_code(rng, "E11"), "type 2 diabetes mellitus without complications", org, cost=float(rng.uniform(20, 300)))
        if kind == "type1":
            w.encounter(pid, day(-rng.integers(400, 800)), "outpatient", "E10.9", "type 1 diabetes mellitus", org)
        if kind == "ascvd_before":
            name, code = ASCVD_EVENTS[int(rng.integers(0, len(ASCVD_EVENTS)))]
            w.encounter(pid, day(-rng.integers(30, 300)), "inpatient", code, name, org)

        # one-year disease history
        for j in np.flatnonzero(has_code[i]):
            cat = all_codes[j]
            r = rng.random()
            if r < spec.dirty_icd_rate / 2:
                icd = None
            elif r < spec.dirty_icd_rate:
                icd = f"x{cat.lower()}?"  # malformed code
            else:
                icd = _random_code(rng, cat)
            w.encounter(pid, day(-rng.integers(1, 366)), "outpatient", icd, f"history {cat}", org)
        # older history outside the observation window, no effect on anything
        for _ in range(int(rng.integers(0, 3))):
            cat = BACKGROUND_CODES[int(rng.integers(0, len(BACKGROUND_CODES)))]
            w.encounter(pid, day(-rng.integers(400, 700)), "outpatient", _random_code(rng, cat), f"history {cat}", org)

        # labs: an older out-of-window value, then the in-window value (most recent wins)
        for factor, item, value in (("tc", "tc", tc[i]), ("hdl_c", "hdl-c", hdl[i])):
            old = w.encounter(pid, day(-rng.integers(400, 600)), "outpatient", None, None, org)
            w.rows["labtest"].append([old, item, f"{value * rng.uniform(0.7, 1.3):.1f}", day(-rng.integers(400, 600)).isoformat()])
            if not missing[factor][i]:
                when = day(-rng.integers(0, 300))
                eid = w.encounter(pid, when, "outpatient", None, None, org)
                w.rows["labtest"].append([eid, item, f"{value:.1f}", when.isoformat()])

        # follow-up visits: an earlier in-window reading, then the most recent one
        first = int(rng.integers(200, 365))
        last = int(rng.integers(0, first))
        eid = w.encounter(pid, day(-first), "followup", None, None, org)
        w.rows["followup"].append([eid, f"{float(np.clip(sbp[i] + rng.normal(0, 12), 90, 220)):.0f}", str(int(not smoker[i])), day(-first).isoformat()])
        eid = w.encounter(pid, day(-last), "followup", None, None, org)
        sbp_text = "" if missing["sbp"][i] else f"{sbp[i]:.0f}"
        smoke_text = "" if missing["smoker"][i] else str(int(smoker[i]))
        w.rows["followup"].append([eid, sbp_text, smoke_text, day(-last).isoformat()])
        # a follow-up visit with blank fields after the last reading
        if missing["sbp"][i] and missing["smoker"][i]:
            # without any reading, the earlier visit must not supply values either
            w.rows["followup"][-2][1] = ""
            w.rows["followup"][-2][2] = ""
        elif missing["sbp"][i]:
            w.rows["followup"][-2][1] = ""
        elif missing["smoker"][i]:
            w.rows["followup"][-2][2] = ""

        if treated[i]:
            when = day(-rng.integers(0, 300))
            eid = w.encounter(pid, when, "outpatient", None, None, org)
            w.rows["medication"].append([eid, BP_DRUGS[int(rng.integers(0, len(BP_DRUGS)))], when.isoformat()])
        if rng.random() < 0.5:
            when = day(-rng.integers(0, 300))
            eid = w.encounter(pid, when, "outpatient", None, None, org)
            w.rows["medication"].append([eid, OTHER_DRUGS[int(rng.integers(0, len(OTHER_DRUGS)))], when.isoformat()])

        # outcome and censoring
        if label[i]:
            name, code = ASCVD_EVENTS[int(rng.integers(0, len(ASCVD_EVENTS)))]
            w.encounter(pid, day(event_day[i]), "inpatient", code, name, org, cost=float(rng.uniform(2000, 40000)))
            horizon = event_day[i]
        else:
            horizon = censor_day[i]
        for offset in sorted(rng.integers(1, horizon + 1, 2)):
            if kind in ("no_index", "no_t2dm_visit"):
                # no further outpatient diabetes evidence
                w.encounter(pid, day(offset), "outpatient", _random_code(rng, "Z01"), "routine visit", org)
            else:
                w.encounter(pid, day(offset), "outpatient", "E11.9", "type 2 diabetes mellitus", org)
        if not label[i]:
            w.encounter(pid, day(horizon), "outpatient", _random_code(rng, "Z01"), "routine visit", org)

        if kind == "no_lookback":
            _clear_lookback(w, starts, win)

        truth.append(
            [pid, int(kind is None), kind or "", int(label[i]), float(true_risk[i]), float(pce[i]), float(knowledge_logit[i]), float(data_effect[i])]
        )

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, header in TABLE_HEADERS.items():
        paths[name] = out / f"{name}.csv"
        with open(paths[name], "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            wr.writerows(w.rows[name])
    paths["ground_truth"] = out / "ground_truth.csv"
    with open(paths["ground_truth"], "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["patient_id", "eligible", "ineligible_reason", "label", "true_risk", "pce_score", "knowledge_logit", "data_effect"])
        for row in truth:
            wr.writerow(row[:4] + [repr(v) for v in row[4:]])
    paths["synth_spec"] = out / "synth_spec.json"
    doc = {"spec": spec.to_json(), "intercept": b0, "planted_effects": PLANTED_EFFECTS, "codes": all_codes}
    paths["synth_spec"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return paths


def read_ground_truth(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {
            r["patient_id"]: {
                "eligible": r["eligible"] == "1",
                "ineligible_reason": r["ineligible_reason"],
                "label": int(r["label"]),
                "true_risk": float(r["true_risk"]),
                "pce_score": float(r["pce_score"]),
                "knowledge_logit": float(r["knowledge_logit"]),
                "data_effect": float(r["data_effect"]),
            }
            for r in csv.DictReader(fh)
        }



