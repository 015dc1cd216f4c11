import csv
import json
import math

import numpy as np
import pytest

from riskforge.evaluation import CoxFitResult, KmPoint
from riskforge.reports import (
    TABLE3_HEADER,
    AucRow,
    EvalReport,
    Table3Row,
    fmt3,
    fmt6,
    render_reports,
    table2_rows,
)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_empty_grid_headers_only(tmp_path):
    paths = render_reports(EvalReport(), tmp_path)
    t2 = read_csv(paths["table2.csv"])
    assert t2 == [["model", "EX-1_train", "EX-1_test", "EX-2_train", "EX-2_test", "EX-3_train", "EX-3_test", "EX-4_train", "EX-4_test"]]
    assert read_csv(paths["table3.csv"]) == [TABLE3_HEADER]
    assert read_csv(paths["km_curve.csv"]) == [["time", "survival", "at_risk"]]
    assert paths["summary.txt"].read_text().startswith("Knowledge-enhanced")


def test_single_lr_row(tmp_path):
    report = EvalReport(auc_grid=[AucRow("EX-1", "LR", 0.719, 0.690)])
    rows = read_csv(render_reports(report, tmp_path)["table2.csv"])
    assert rows == [["model", "EX-1_train", "EX-1_test"], ["LR", "0.719", "0.69"]]
    assert [float(c) for c in rows[1][1:]] == [0.719, 0.690]


def test_age_row_formatting(tmp_path):
    # the published triple is rounded; beta = ln(1.035) exactly admits no symmetric
    # Wald interval rounding to (1.030, 1.039), so use a hazard ratio rounding to 1.035
    beta = math.log(1.0346)
    se = 0.0022
    fit = CoxFitResult(["age"], np.array([beta]), np.array([se]), 0.0, 5, True)
    cox = fit.row("age")
    row = Table3Row("EX-2", "age", 1e-30, 0.313, cox["p_value"], cox["exp_beta"], cox["ci_lower"], cox["ci_upper"])
    lines = read_csv(render_reports(EvalReport(table3=[row]), tmp_path)["table3.csv"])
    rendered = ",".join(lines[1])
    assert rendered.startswith("age,EX-2,")
    assert rendered.endswith("1.035,1.030,1.039")
    by_name = dict(zip(lines[0], lines[1]))
    assert by_name["sig_display"] == "0.000" and by_name["pearson"] == "0.313"
    assert by_name["cox_sig_display"] == "0.000"


def test_grid_ordering_and_gaps():
    report = EvalReport(
        auc_grid=[
            AucRow("EX-2", "NN", 0.7, 0.6),
            AucRow("EX-1", "LR", 0.8, 0.75),
            AucRow("EX-2", "LR", 0.81, 0.76),
        ]
    )
    header, rows = table2_rows(report)
    assert header == ["model", "EX-1_train", "EX-1_test", "EX-2_train", "EX-2_test"]
    assert rows == [["LR", "0.8", "0.75", "0.81", "0.76"], ["NN", "", "", "0.7", "0.6"]]


def test_aucrow_range_checked():
    with pytest.raises(ValueError):
        AucRow("EX-1", "LR", 1.2, 0.5)
    AucRow("EX-1", "LR", math.nan, 0.5)


def test_formatters():
    assert fmt6(0.123456789) == "0.123457"
    assert fmt6(math.nan) == "" and fmt3(math.nan) == ""
    assert fmt3(1.0354) == "1.035"


def test_json_sidecar_keeps_precision(tmp_path):
    km = [KmPoint(0.0, 1.0, 3, 0, 0), KmPoint(1.0, 2 / 3, 3, 1, 0)]
    report = EvalReport(
        auc_grid=[AucRow("EX-1", "LR", 0.71912345678, 0.69)],
        km_curve=km,
        baseline_auc={"pce_all": 0.653},
        notes=["cox failed for EX-9"],
    )
    paths = render_reports(report, tmp_path)
    doc = json.loads(paths["report.json"].read_text())
    assert doc["auc_grid"][0]["train_auc"] == 0.71912345678
    assert doc["km_curve"][1]["survival"] == 2 / 3
    assert read_csv(paths["km_curve.csv"])[2] == ["1", "0.666667", "3"]
    summary = paths["summary.txt"].read_text()
    assert "baseline AUC (pce_all): 0.653" in summary
    assert "note: cox failed for EX-9" in summary


def test_nan_serialized_as_null(tmp_path):
    row = Table3Row("EX-2", "flat", math.nan, math.nan, math.nan, math.nan, math.nan, math.nan)
    paths = render_reports(EvalReport(table3=[row]), tmp_path)
    assert json.loads(paths["report.json"].read_text())["table3"][0]["sig"] is None
    assert read_csv(paths["table3.csv"])[1][2:] == [""] * 8


def test_lookup():
    report = EvalReport(auc_grid=[AucRow("EX-1", "LR", 0.7, 0.6)])
    assert report.auc("EX-1", "LR").test_auc == 0.6
    with pytest.raises(KeyError):
        report.auc("EX-1", "NN")
