"""Report tables: AUC grid, univariate + Cox table, Kaplan-Meier curve."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .evaluation import KmPoint

EXPERIMENTS = ("EX-1", "EX-2", "EX-3", "EX-4")
MODEL_ORDER = ("LR", "LR-K", "NN", "NN-K", "TSNN-T", "TSNN-S", "KENN", "DF-WA", "DF-META")


@dataclass(frozen=True)
class AucRow:
    experiment: str
    model: str
    train_auc: float
    test_auc: float

    def __post_init__(self):
        for v in (self.train_auc, self.test_auc):
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"AUC out of range: {v}")


@dataclass(frozen=True)
class Table3Row:
    experiment: str
    variable: str
    sig: float
    pearson: float
    cox_sig: float
    exp_beta: float
    ci_lower: float
    ci_upper: float


@dataclass
class EvalReport:
    auc_grid: list[AucRow] = field(default_factory=list)
    table3: list[Table3Row] = field(default_factory=list)
    km_curve: list[KmPoint] = field(default_factory=list)
    baseline_auc: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def auc(self, experiment: str, model: str) -> AucRow:
        for row in self.auc_grid:
            if row.experiment == experiment and row.model == model:
                return row
        raise KeyError((experiment, model))


def fmt6(x: float) -> str:
    """Six significant digits; blank for NaN / undefined."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6g}"


def fmt3(x: float) -> str:
    """Three decimals as printed in the published tables; blank for NaN."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.3f}"


def _ordered(values, preferred):
    seen = [v for v in preferred if v in values]
    return seen + sorted(v for v in values if v not in preferred)


def table2_rows(report: EvalReport) -> tuple[list[str], list[list[str]]]:
    experiments = _ordered({r.experiment for r in report.auc_grid}, EXPERIMENTS) or list(EXPERIMENTS)
    models = _ordered({r.model for r in report.auc_grid}, MODEL_ORDER)
    header = ["model"] + [f"{e}_{part}" for e in experiments for part in ("train", "test")]
    cells = {(r.experiment, r.model): r for r in report.auc_grid}
    rows = []
    for m in models:
        row = [m]
        for e in experiments:
            r = cells.get((e, m))
            row += [fmt6(r.train_auc), fmt6(r.test_auc)] if r else ["", ""]
        rows.append(row)
    return header, rows


TABLE3_HEADER = [
    "variable",
    "experiment",
    "sig",
    "sig_display",
    "pearson",
    "cox_sig",
    "cox_sig_display",
    "exp_beta",
    "ci_lower",
    "ci_upper",
]


def table3_row(row: Table3Row) -> list[str]:
    return [
        row.variable,
        row.experiment,
        fmt6(row.sig),
        fmt3(row.sig),
        fmt3(row.pearson),
        fmt6(row.cox_sig),
        fmt3(row.cox_sig),
        fmt3(row.exp_beta),
        fmt3(row.ci_lower),
        fmt3(row.ci_upper),
    ]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def summary_text(report: EvalReport) -> str:
    lines = ["Knowledge-enhanced risk model evaluation", ""]
    for name, value in sorted(report.baseline_auc.items()):
        lines.append(f"baseline AUC ({name}): {fmt3(value)}")
    if report.auc_grid:
        lines.append("")
        header, rows = table2_rows(report)
        widths = [max(len(x) for x in col) for col in zip(header, *rows)]
        for r in [header, *rows]:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        best = max(report.auc_grid, key=lambda r: (r.test_auc if not math.isnan(r.test_auc) else -1.0))
        lines += ["", f"best test AUC: {best.model} on {best.experiment} = {fmt3(best.test_auc)}"]
    if report.km_curve:
        last = report.km_curve[-1]
        events = sum(p.events for p in report.km_curve)
        n = report.km_curve[0].at_risk
        lines += ["", f"Kaplan-Meier: {n} subjects, {events} events, S(t_max={fmt6(last.time)}) = {fmt3(last.survival)}"]
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def render_reports(report: EvalReport, output_dir: str | Path) -> dict[str, Path]:
    """Write table2.csv, table3.csv, km_curve.csv, summary.txt and a full-precision report.json."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("table2.csv", "table3.csv", "km_curve.csv", "summary.txt", "report.json")}

    header, rows = table2_rows(report)
    _write_csv(paths["table2.csv"], header, rows)
    _write_csv(paths["table3.csv"], TABLE3_HEADER, [table3_row(r) for r in report.table3])
    _write_csv(
        paths["km_curve.csv"],
        ["time", "survival", "at_risk"],
        [[fmt6(p.time), fmt6(p.survival), p.at_risk] for p in report.km_curve],
    )
    paths["summary.txt"].write_text(summary_text(report))
    doc = {
        "auc_grid": [asdict(r) for r in report.auc_grid],
        "table3": [asdict(r) for r in report.table3],
        "km_curve": [p._asdict() for p in report.km_curve],
        "baseline_auc": report.baseline_auc,
        "notes": report.notes,
    }
    paths["report.json"].write_text(json.dumps(_json_safe(doc), indent=1, sort_keys=True) + "\n")
    return paths
