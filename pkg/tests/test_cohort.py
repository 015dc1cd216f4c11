from datetime import date, timedelta

import hypothesis.strategies as st
import pytest
from hypothesis import HealthCheck, given, settings

from riskforge.cohort import (
    FUNNEL_CRITERIA,
    CohortInstance,
    DiagnosisDictionary,
    FunnelReport,
    Pattern,
    StudyWindow,
    apply_inclusion,
    find_index_event,
    finalize_cohort,
    match_diagnosis,
    normalize_text,
    read_cohort_csv,
    write_cohort_csv,
)
from riskforge.synth import SynthSpec, generate_synthetic
from riskforge.ehr_store import load_repository, table_paths_in

WINDOW = StudyWindow()


def test_empty_text_never_matches():
    pats = [Pattern("stroke"), Pattern("mi", "substring")]
    assert not match_diagnosis("", pats)
    assert not match_diagnosis(None, pats)


def test_literal_substring():
    assert match_diagnosis("acute myocardial infarction, anterior", [Pattern("myocardial infarction", "substring")])


def test_normalize_text():
    assert normalize_text("Type-2  Diabetes, Mellitus!") == "type2diabetesmellitus"
    assert normalize_text("２型 糖尿病") == "2型糖尿病"


FIVE = [
    Pattern("myocardial infarction", "substring"),
    Pattern("Cerebral Infarction"),
    Pattern("angina"),
    Pattern("TIA", "substring"),
    Pattern("冠心病"),
]
# hand trace: substring patterns are case- and punctuation-sensitive, the others are not
TWENTY = [
    ("acute myocardial infarction", True),
    ("Acute Myocardial Infarction", False),
    ("old myocardial-infarction", False),
    ("old myocardial infarction", True),
    ("cerebral infarction", True),
    ("CEREBRAL-INFARCTION, left", True),
    ("cerebralinfarction", True),
    ("cerebral hemorrhage", False),
    ("unstable angina", True),
    ("Angina Pectoris", True),
    ("an gina", True),
    ("TIA episode", True),
    ("tia episode", False),
    ("essential hypertension", False),
    ("稳定型冠心病", True),
    ("冠 心 病", True),
    ("冠状动脉", False),
    ("", False),
    ("myocardial", False),
    ("infarction", False),
]


def test_twenty_string_fixture():
    got = [match_diagnosis(text, FIVE) for text, _ in TWENTY]
    assert got == [expected for _, expected in TWENTY]


def test_pattern_validation():
    with pytest.raises(ValueError):
        Pattern("x", "regex")
    with pytest.raises(ValueError):
        Pattern("")


def test_dictionary_rejects_undeclared_class():
    doc = {"ascvd_patterns": ["mi"], "t2dm_patterns": ["t2dm"], "t2dm_drug_classes": ["biguanide"], "drug_class_map": {"metformin": "biguanide", "x": "magic"}, "drug_classes": ["biguanide"]}
    with pytest.raises(ValueError):
        DiagnosisDictionary.from_dict(doc)
    with pytest.raises(ValueError):
        DiagnosisDictionary.from_dict({**doc, "ascvd_patterns": [], "drug_class_map": {}})


def test_dictionary_modes(dictionary):
    d = DiagnosisDictionary.from_dict({"ascvd_patterns": [{"pattern": "MI", "mode": "substring"}], "t2dm_patterns": ["type 2 diabetes"], "t2dm_drug_classes": [], "drug_class_map": {}})
    assert d.ascvd_patterns[0].mode == "substring"
    assert d.t2dm_patterns[0].mode == "normalized-substring"
    assert dictionary.drug_class(" Metformin ") == "biguanide"
    assert dictionary.drug_class("unknown") is None


def test_window_validation():
    with pytest.raises(ValueError):
        StudyWindow(date(2016, 1, 1), date(2015, 1, 1))
    with pytest.raises(ValueError):
        StudyWindow(lookback_days=0)


def test_instance_validation():
    with pytest.raises(ValueError):
        CohortInstance("P", date(2013, 1, 1), "ascvd_after", 0, 5, False)
    with pytest.raises(ValueError):
        CohortInstance("P", date(2013, 1, 1), "ascvd_never", 0, -1, True)


# --- repository fixtures ------------------------------------------------------------------------


def enc(eid, pid, when, etype="outpatient", icd="", dx=""):
    return (eid, pid, "O1", when, etype, icd, dx, "")


def test_index_earliest_of_diagnosis_and_drug(make_repo, dictionary):
    repo = make_repo(
        patient=[("P1", "male", "1950-01-01")],
        encounter=[enc("E1", "P1", "2013-05-01", dx="type 2 diabetes"), enc("E2", "P1", "2012-09-01")],
        medication=[("E2", "metformin", "2012-09-01")],
    )
    assert find_index_event(repo, "P1", dictionary, WINDOW) == date(2012, 9, 1)


def test_index_outside_period(make_repo, dictionary):
    repo = make_repo(encounter=[enc("E1", "P1", "2012-07-31", icd="E11.9")])
    assert find_index_event(repo, "P1", dictionary, WINDOW) is None


def test_five_patient_index_fixture(make_repo, dictionary):
    repo = make_repo(
        encounter=[
            # A: ICD-only evidence, first one in period wins
            enc("A1", "A", "2012-06-01", icd="E11.9"),
            enc("A2", "A", "2013-02-02", icd="E11.65"),
            enc("A3", "A", "2014-02-02", icd="E11.9"),
            # B: insulin is not a T2DM class, sitagliptin is
            enc("B1", "B", "2013-01-10"),
            enc("B2", "B", "2013-04-10"),
            # C: Chinese free text
            enc("C1", "C", "2016-03-31", dx="2型糖尿病"),
            # D: type 1 text only, no index
            enc("D1", "D", "2014-01-01", dx="type 1 diabetes mellitus"),
            # E: evidence only after the period
            enc("E1", "E", "2016-04-01", dx="type 2 diabetes"),
        ],
        medication=[("B1", "insulin glargine", "2013-01-10"), ("B2", "Sitagliptin", "2013-04-10")],
    )
    got = {pid: find_index_event(repo, pid, dictionary, WINDOW) for pid in "ABCDE"}
    assert got == {"A": date(2013, 2, 2), "B": date(2013, 4, 10), "C": date(2016, 3, 31), "D": None, "E": None}


def _eight_patient_repo(make_repo):
    lb = "2012-01-15"  # inside the 360-day lookback before 2012-08-01
    t2 = "type 2 diabetes mellitus"
    return make_repo(
        patient=[
            ("P1", "male", "1960-01-01"),
            ("P2", "female", "1955-03-03"),
            ("P3", "male", "1950-01-01"),
            ("P4", "female", "1970-01-01"),
            ("P5", "female", "1990-01-01"),
            ("P6", "male", "1996-01-01"),
            ("P7", "unknown", "1960-01-01"),
            ("P8", "female", "1965-01-01"),
        ],
        encounter=[
            # P1: eligible, ASCVD 100 days after index
            enc("1a", "P1", lb), enc("1b", "P1", "2013-01-01", icd="E11.9", dx=t2),
            enc("1c", "P1", "2013-04-11", "inpatient", "I21.9", "acute myocardial infarction"),
            enc("1d", "P1", "2013-06-01", icd="E11.9"),
            # P2: eligible, no ASCVD, last encounter 2014-06-30
            enc("2a", "P2", lb), enc("2b", "P2", "2013-03-01", dx=t2), enc("2c", "P2", "2014-06-30", "other"),
            # P3: eligible, stroke before index
            enc("3a", "P3", lb), enc("3b", "P3", "2012-10-01", "inpatient", dx="cerebral infarction"),
            enc("3c", "P3", "2013-01-01", icd="E11"),
            # P4: no lookback visit (2011-08-01 is 365 days before the period)
            enc("4a", "P4", "2011-08-01"), enc("4b", "P4", "2013-01-01", icd="E11.9"),
            # P5: gestational diabetes history
            enc("5a", "P5", lb, icd="O24.4"), enc("5b", "P5", "2013-01-01", icd="E11.9"),
            # P6: 17 at index
            enc("6a", "P6", lb), enc("6b", "P6", "2013-01-01", icd="E11.9"),
            # P7: unknown gender
            enc("7a", "P7", lb), enc("7b", "P7", "2013-01-01", icd="E11.9"),
            # P8: index via prescription, diabetes never coded on an outpatient visit
            enc("8a", "P8", lb), enc("8b", "P8", "2013-01-01"), enc("8c", "P8", "2013-02-01", "inpatient", "E11.9"),
        ],
        medication=[("8b", "metformin", "2013-01-01")],
    )


def test_eight_patient_fixture(make_repo, dictionary):
    repo = _eight_patient_repo(make_repo)
    funnel = FunnelReport()
    included = apply_inclusion(repo, dictionary, WINDOW, funnel)
    got = {(i.patient_id, i.group, i.label, i.event_or_censor_days, i.censored) for i in included}
    assert got == {
        ("P1", "ascvd_after", 1, 100, False),
        ("P2", "ascvd_never", 0, (date(2014, 6, 30) - date(2013, 3, 1)).days, True),
        ("P3", "ascvd_before", 0, 0, True),
    }
    assert funnel.excluded == {
        "no T2DM index event in index period": 0,
        "no visit in lookback window": 1,
        "no T2DM outpatient visit after index": 1,
        "gestational or type 1 diabetes": 1,
        "under 18": 1,
        "unknown gender": 1,
    }
    assert funnel.rows()[-1] == ("unknown gender", 1, 3)
    final = finalize_cohort(included)
    assert [i.patient_id for i in final] == ["P1", "P2"]


def test_funnel_csv(make_repo, dictionary, tmp_path):
    funnel = FunnelReport()
    apply_inclusion(_eight_patient_repo(make_repo), dictionary, WINDOW, funnel)
    funnel.write_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "criterion,excluded_count,remaining_count"
    assert lines[1] == "all patients,0,8"
    assert len(lines) == 2 + len(FUNNEL_CRITERIA)


def test_empty_repository(make_repo, dictionary):
    assert apply_inclusion(make_repo(), dictionary, WINDOW) == []


def test_finalize_group_sizes():
    d = date(2013, 1, 1)
    inst = (
        [CohortInstance(f"b{i}", d, "ascvd_before", 0, 0, True) for i in range(2)]
        + [CohortInstance(f"a{i}", d, "ascvd_after", 1, 10, False) for i in range(3)]
        + [CohortInstance(f"n{i}", d, "ascvd_never", 0, 20, True) for i in range(5)]
    )
    cohort = finalize_cohort(inst)
    assert len(cohort) == 8 and sum(i.label for i in cohort) == 3
    assert all(i.group != "ascvd_before" for i in cohort)


def test_single_class_warns(caplog):
    finalize_cohort([CohortInstance("a", date(2013, 1, 1), "ascvd_never", 0, 3, True)])
    assert "single class" in caplog.text


def test_cohort_csv_round_trip(tmp_path):
    cohort = [CohortInstance("a", date(2013, 1, 1), "ascvd_after", 1, 100, False), CohortInstance("b", date(2014, 2, 3), "ascvd_never", 0, 7, True)]
    write_cohort_csv(cohort, tmp_path / "c.csv")
    assert read_cohort_csv(tmp_path / "c.csv") == cohort


@pytest.fixture(scope="module")
def synth_repo(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(n_patients=250, seed=7, ineligible_rate=0.3), out)
    return load_repository(table_paths_in(out))


def test_groups_partition_and_determinism(synth_repo, dictionary):
    funnel = FunnelReport()
    a = apply_inclusion(synth_repo, dictionary, WINDOW, funnel)
    b = apply_inclusion(synth_repo, dictionary, WINDOW)
    assert a == b
    assert [i.patient_id for i in a] == sorted(i.patient_id for i in a)
    assert sum(funnel.group_counts.values()) == len(a)
    assert funnel.n_patients - sum(funnel.excluded.values()) == len(a)
    assert all(v > 0 for v in funnel.excluded.values())


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 1300))
def test_shrinking_period_end_never_adds(synth_repo, dictionary, cut):
    full = {i.patient_id for i in apply_inclusion(synth_repo, dictionary, WINDOW)}
    end = max(WINDOW.index_period_end - timedelta(days=cut), WINDOW.index_period_start + timedelta(days=1))
    smaller = StudyWindow(WINDOW.index_period_start, end)
    assert {i.patient_id for i in apply_inclusion(synth_repo, dictionary, smaller)} <= full
