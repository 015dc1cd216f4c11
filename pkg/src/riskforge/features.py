"""Knowledge-based risk factors and data-driven ICD features.

All extraction uses the observation window ``0 <= index - commit_time <= days``
(day granularity). Repeated measurements resolve to the most recent value in
the window. Nothing is imputed.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import CohortInstance, DiagnosisDictionary, age_in_years
from .ehr_store import EhrRepository, is_icd_format

KNOWN_FACTORS = ("gender", "age", "tc", "hdl_c", "sbp", "treated", "smoker")
OPTIONAL_FACTORS = ("tc", "hdl_c", "sbp", "smoker")

DEFAULT_CHAPTER_MAP = Path(__file__).parent / "data" / "icd10_chapters.csv"


class EmptyCohortError(RuntimeError):
    """No instances survive a filter that downstream training needs."""


@dataclass(frozen=True)
class KnownFactorProfile:
    patient_id: str
    gender: int  # 1 = male
    age: float
    tc: float | None = None
    hdl_c: float | None = None
    sbp: float | None = None
    hbp_treated: bool = False
    smoker: bool | None = None
    race: str = "white_or_other"
    diabetes: bool = True

    @property
    def missing(self) -> tuple[str, ...]:
        return tuple(f for f in OPTIONAL_FACTORS if getattr(self, f) is None)

    @property
    def complete(self) -> bool:
        return not self.missing

    def as_row(self) -> list[float]:
        """Values in ``KNOWN_FACTORS`` order; requires a complete profile."""
        if not self.complete:
            raise ValueError(f"profile {self.patient_id} is missing {self.missing}")
        return [float(self.gender), self.age, self.tc, self.hdl_c, self.sbp, float(self.hbp_treated), float(self.smoker)]


@dataclass
class FeatureMatrix:
    values: np.ndarray
    feature_names: list[str]
    instance_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.instance_ids), len(self.feature_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("feature names must be unique")
        if np.isnan(self.values).any():
            raise ValueError("feature matrix contains missing values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def rows(self, index: Sequence[int] | np.ndarray) -> "FeatureMatrix":
        index = np.asarray(index, dtype=int)
        return FeatureMatrix(self.values[index], list(self.feature_names), [self.instance_ids[i] for i in index])

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = {n: j for j, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"unknown feature columns: {missing}")
        return FeatureMatrix(self.values[:, [pos[n] for n in names]], list(names), list(self.instance_ids))

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if other.instance_ids != self.instance_ids:
            raise ValueError("instance ids differ")
        return FeatureMatrix(
            np.hstack([self.values, other.values]), self.feature_names + other.feature_names, list(self.instance_ids)
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance_id", *self.feature_names])
            for pid, row in zip(self.instance_ids, self.values):
                w.writerow([pid, *(repr(float(v)) for v in row)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "FeatureMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "instance_id":
                raise ValueError(f"{path}: first column must be instance_id")
            ids, rows = [], []
            for r in reader:
                ids.append(r[0])
                rows.append([float(v) for v in r[1:]])
        return cls(np.array(rows, dtype=float).reshape(len(ids), len(header) - 1), header[1:], ids)


@dataclass
class MissingnessReport:
    n_profiles: int
    present: dict[str, int]
    n_complete: int

    def as_dict(self) -> dict:
        return {"n_profiles": self.n_profiles, "present": dict(self.present), "n_complete": self.n_complete}


def in_window(index: date, when: date, days: int) -> bool:
    return 0 <= (index - when).days <= days


def extract_known_factors(
    repo: EhrRepository,
    instance: CohortInstance,
    dictionary: DiagnosisDictionary,
    observation_days: int = 365,
) -> KnownFactorProfile:
    pid, index = instance.patient_id, instance.index_date
    patient = repo.patient_by_id[pid]

    labs: dict[str, tuple[date, float]] = {}
    for row in repo.labtests_for(pid):
        spec = dictionary.lab_item(row.test_item_name)
        if spec is None or not in_window(index, row.commit_time, observation_days):
            continue
        factor = spec["factor"]
        # rows are time-sorted, so a later row overwrites an earlier one
        labs[factor] = (row.commit_time, row.test_value * float(spec.get("scale", 1.0)))

    sbp = smoker = None
    for row in repo.followups_for(pid):
        if not in_window(index, row.commit_time, observation_days):
            continue
        if row.systolic_bp is not None:
            sbp = row.systolic_bp
        if row.daily_smoking is not None:
            smoker = row.daily_smoking

    treated = any(
        in_window(index, m.commit_time, observation_days)
        and dictionary.drug_class(m.drug_name) in dictionary.antihypertensive_classes
        for m in repo.medications_for(pid)
    )

    def positive(v):
        return v if v is not None and v > 0 else None

    return KnownFactorProfile(
        patient_id=pid,
        gender=1 if patient.gender == "male" else 0,
        age=age_in_years(patient.birthday, index),
        tc=positive(labs.get("tc", (None, None))[1]),
        hdl_c=positive(labs.get("hdl_c", (None, None))[1]),
        sbp=positive(sbp),
        hbp_treated=treated,
        smoker=smoker,
    )


def complete_case_filter(
    profiles: Sequence[KnownFactorProfile], *, allow_empty: bool = False
) -> tuple[list[KnownFactorProfile], MissingnessReport]:
    attrs = {"gender": "gender", "age": "age", "tc": "tc", "hdl_c": "hdl_c", "sbp": "sbp", "treated": "hbp_treated", "smoker": "smoker"}
    present = {f: sum(1 for p in profiles if getattr(p, attrs[f]) is not None) for f in KNOWN_FACTORS}
    survivors = [p for p in profiles if p.complete]
    report = MissingnessReport(len(profiles), present, len(survivors))
    if not survivors and not allow_empty:
        raise EmptyCohortError(f"no complete cases among {len(profiles)} profiles")
    return survivors, report


def known_factor_matrix(profiles: Sequence[KnownFactorProfile]) -> FeatureMatrix:
    return FeatureMatrix(
        np.array([p.as_row() for p in profiles], dtype=float).reshape(len(profiles), len(KNOWN_FACTORS)),
        list(KNOWN_FACTORS),
        [p.patient_id for p in profiles],
    )


# --- ICD features -------------------------------------------------------------------------------


@dataclass(frozen=True)
class ChapterMap:
    chapters: tuple[tuple[int, str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "_starts", [c[1] for c in self.chapters])

    @property
    def n_chapters(self) -> int:
        return len(self.chapters)

    def chapter_of(self, code: str | None) -> int | None:
        """Chapter number for a code by its 3-character block, or None."""
        if not is_icd_format(code):
            return None
        block = code.strip().upper()[:3]
        # blocks are disjoint and sorted by start
        i = bisect_right(self._starts, block) - 1
        if i >= 0:
            chapter, start, end = self.chapters[i]
            if start <= block <= end:
                return chapter
        return None


def load_chapter_map(path: str | Path = DEFAULT_CHAPTER_MAP) -> ChapterMap:
    with open(path, newline="") as fh:
        rows = [(int(r["chapter"]), r["block_start"].strip().upper(), r["block_end"].strip().upper()) for r in csv.DictReader(fh)]
    rows.sort(key=lambda r: r[1])
    for (_, _, end), (_, start, _) in zip(rows, rows[1:]):
        if start <= end:
            raise ValueError(f"overlapping chapter blocks near {start}")
    return ChapterMap(tuple(rows))


def three_digit(code: str | None, chapter_map: ChapterMap) -> str | None:
    """3-character ICD category when ``code`` is a valid, chapter-mapped code."""
    if chapter_map.chapter_of(code) is None:
        return None
    return code.strip().upper()[:3]


def _window_buckets(repo, instance, chapter_map, observation_days, mode):
    buckets = set()
    for e in repo.encounters_for(instance.patient_id):
        if not in_window(instance.index_date, e.commit_time, observation_days):
            continue
        if mode == "chapter22":
            ch = chapter_map.chapter_of(e.icd_code)
            if ch is not None:
                buckets.add(f"c{ch}")
        else:
            cat = three_digit(e.icd_code, chapter_map)
            if cat is not None:
                buckets.add(cat)
    return buckets


def build_icd_features(
    repo: EhrRepository,
    instances: Sequence[CohortInstance],
    mode: str = "threedigit",
    observation_days: int = 365,
    chapter_map: ChapterMap | None = None,
) -> FeatureMatrix:
    """Binary disease-history indicators from in-window encounter codes.

    ``chapter22`` yields one column per chapter (c1..c22); ``threedigit`` one column
    per 3-character category observed across ``instances``, sorted.
    """
    if mode not in ("chapter22", "threedigit"):
        raise ValueError(f"unknown mode {mode!r}")
    chapter_map = chapter_map or load_chapter_map()
    per_instance = [_window_buckets(repo, i, chapter_map, observation_days, mode) for i in instances]
    if mode == "chapter22":
        names = [f"c{ch}" for ch, _, _ in sorted(chapter_map.chapters)]
    else:
        names = sorted(set().union(*per_instance)) if per_instance else []
    col = {n: j for j, n in enumerate(names)}
    values = np.zeros((len(instances), len(names)))
    for i, buckets in enumerate(per_instance):
        for b in buckets:
            values[i, col[b]] = 1.0
    return FeatureMatrix(values, names, [i.patient_id for i in instances])


# --- filter selection ---------------------------------------------------------------------------


def chi2_exact(a: int, b: int, c: int, d: int) -> Fraction:
    """Pearson chi-squared for the 2x2 table [[a, b], [c, d]], no continuity correction.

    Returned as an exact fraction; a zero margin gives 0.
    """
    n = a + b + c + d
    denom = (a + b) * (c + d) * (a + c) * (b + d)
    if denom == 0:
        return Fraction(0)
    return Fraction(n * (a * d - b * c) ** 2, denom)


def chi2_scores(features: FeatureMatrix, labels: np.ndarray) -> list[Fraction]:
    y = np.asarray(labels).astype(int)
    x = features.values.astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    a = (x & (y[:, None] == 1)).sum(axis=0)  # feature 1, label 1
    b = (x & (y[:, None] == 0)).sum(axis=0)  # feature 1, label 0
    return [chi2_exact(int(a[j]), int(b[j]), n_pos - int(a[j]), n_neg - int(b[j])) for j in range(features.m)]


@dataclass(frozen=True)
class Chi2Selection:
    selected: tuple[str, ...]
    statistics: dict[str, float]


def chi2_select(features: FeatureMatrix, labels: np.ndarray, top_k: int = 20) -> tuple[FeatureMatrix, Chi2Selection]:
    """Keep the ``top_k`` columns with the largest 2x2 chi-squared statistic.

    Ties are broken by feature name. Columns must be binary.
    """
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("chi2_select needs both classes present")
    if not np.isin(features.values, (0.0, 1.0)).all():
        raise ValueError("chi2_select expects binary feature columns")
    scores = chi2_scores(features, y)
    order = sorted(range(features.m), key=lambda j: (-scores[j], features.feature_names[j]))
    keep = [features.feature_names[j] for j in order[: max(0, top_k)]]
    stats = {features.feature_names[j]: float(scores[j]) for j in range(features.m)}
    return features.columns(keep), Chi2Selection(tuple(keep), stats)


# --- standardization ----------------------------------------------------------------------------


@dataclass
class StandardizationStats:
    feature_names: list[str]
    mean: np.ndarray
    std: np.ndarray

    def transform(self, features: FeatureMatrix) -> FeatureMatrix:
        if features.feature_names != self.feature_names:
            raise ValueError("feature names differ from the fitted statistics")
        scale = np.where(self.std > 0, self.std, 1.0)
        out = (features.values - self.mean) / scale
        out[:, self.std == 0] = 0.0
        return FeatureMatrix(out, list(features.feature_names), list(features.instance_ids))

    def to_json(self) -> dict:
        return {"feature_names": self.feature_names, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "StandardizationStats":
        return cls(list(doc["feature_names"]), np.array(doc["mean"], dtype=float), np.array(doc["std"], dtype=float))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def fit_standardization(train: FeatureMatrix) -> StandardizationStats:
    if train.n == 0:
        raise ValueError("cannot standardize an empty training matrix")
    mean = train.values.mean(axis=0)
    # population standard deviation
    std = train.values.std(axis=0)
    # columns equal to a constant up to rounding count as constant
    std = np.where(std <= 1e-12 * np.maximum(1.0, np.abs(mean)), 0.0, std)
    return StandardizationStats(list(train.feature_names), mean, std)


def standardize(train: FeatureMatrix, test: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix, StandardizationStats]:
    stats = fit_standardization(train)
    return stats.transform(train), stats.transform(test), stats


def profiles_by_id(profiles: Iterable[KnownFactorProfile]) -> dict[str, KnownFactorProfile]:
    return {p.patient_id: p for p in profiles}
