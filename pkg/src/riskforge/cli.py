"""Command-line entry point: ``riskforge <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import models as M
from .cohort import FunnelReport, StudyWindow, apply_inclusion, finalize_cohort, load_dictionary, read_cohort_csv, write_cohort_csv
from .ehr_store import SchemaError, audit_icd_validity, export_repository, load_repository, table_paths_in
from .evaluation import CoxFitError, UndefinedMetricError, auc
from .features import (
    KNOWN_FACTORS,
    EmptyCohortError,
    FeatureMatrix,
    KnownFactorProfile,
    build_icd_features,
    complete_case_filter,
    extract_known_factors,
    known_factor_matrix,
    load_chapter_map,
)
from .pce import PceDomainError, ScoringError, load_coefficients, score_cohort
from .pipeline import ConfigError, PipelineError, config_from_dict, apply_overrides, load_config, run_pipeline
from .synth import SynthSpec, generate_synthetic

log = logging.getLogger("riskforge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_ERRORS = (
    SchemaError,
    FileNotFoundError,
    EmptyCohortError,
    ScoringError,
    PceDomainError,
    M.SchemaMismatchError,
    UndefinedMetricError,
    KeyError,
    ValueError,
)
NUMERIC_ERRORS = (M.NumericalError, CoxFitError, FloatingPointError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    raise exc


# --- helpers ------------------------------------------------------------------------------------


def _window(args) -> StudyWindow:
    doc = {}
    for key in ("index_period_start", "index_period_end", "lookback_days", "observation_days"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    return config_from_dict({"window": doc}).window


def _read_scores(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "instance_id" not in reader.fieldnames:
            raise SchemaError(f"{path}: expected an instance_id column")
        cols = [c for c in reader.fieldnames if c != "instance_id"]
        if len(cols) != 1:
            raise SchemaError(f"{path}: expected exactly one score column, got {cols}")
        return {r["instance_id"]: float(r[cols[0]]) for r in reader}


def _aligned_knowledge(path, ids):
    if path is None:
        return None
    scores = _read_scores(path)
    missing = [i for i in ids if i not in scores]
    if missing:
        raise SchemaError(f"knowledge file lacks {len(missing)} instances, e.g. {missing[:3]}")
    return np.array([scores[i] for i in ids])


def _aligned_labels(cohort_path, ids):
    labels = {i.patient_id: i.label for i in read_cohort_csv(cohort_path)}
    missing = [i for i in ids if i not in labels]
    if missing:
        raise SchemaError(f"cohort file lacks {len(missing)} instances, e.g. {missing[:3]}")
    return np.array([labels[i] for i in ids])


def _profiles_from_matrix(fm: FeatureMatrix) -> list[KnownFactorProfile]:
    missing = [c for c in KNOWN_FACTORS if c not in fm.feature_names]
    if missing:
        raise M.SchemaMismatchError(list(KNOWN_FACTORS), fm.feature_names)
    cols = fm.columns(list(KNOWN_FACTORS)).values
    return [
        KnownFactorProfile(pid, int(r[0]), r[1], r[2], r[3], r[4], bool(r[5]), bool(r[6]))
        for pid, r in zip(fm.instance_ids, cols)
    ]


def _write_predictions(path, ids, probs) -> None:
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["instance_id", "probability"])
        for i, p in zip(ids, probs):
            w.writerow([i, repr(float(p))])
    finally:
        if path:
            out.close()


# --- subcommands --------------------------------------------------------------------------------


def cmd_etl(args) -> int:
    repo = load_repository(table_paths_in(args.data))
    out = Path(args.out)
    export_repository(repo, out)
    chapter_map = load_chapter_map(args.chapter_map) if args.chapter_map else load_chapter_map()
    catalog = {e.icd_code for e in repo.encounters if e.icd_code and chapter_map.chapter_of(e.icd_code) is not None}
    audit = audit_icd_validity(repo, catalog)
    doc = {
        "load_report": repo.load_report.summary(),
        "rows_loaded": repo.load_report.rows_loaded,
        "rows_skipped": repo.load_report.rows_skipped,
        "dangling": repo.load_report.dangling,
        "icd": {"n_encounters": audit.n_encounters, "null_rate": audit.null_rate, "valid_rate": audit.valid_rate},
    }
    (out / "etl_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(repo.load_report.summary())
    return EXIT_OK


def cmd_cohort(args) -> int:
    repo = load_repository(table_paths_in(args.data))
    dictionary = load_dictionary(args.dictionary) if args.dictionary else load_dictionary()
    funnel = FunnelReport()
    cohort = finalize_cohort(apply_inclusion(repo, dictionary, _window(args), funnel))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    funnel.write_csv(out / "funnel.csv")
    write_cohort_csv(cohort, out / "cohort.csv")
    for row in funnel.rows():
        print(f"{row[0]:<40} -{row[1]:<6} {row[2]}")
    print(f"cohort: {len(cohort)} instances, {sum(i.label for i in cohort)} positive")
    return EXIT_OK


def cmd_features(args) -> int:
    repo = load_repository(table_paths_in(args.data))
    dictionary = load_dictionary(args.dictionary) if args.dictionary else load_dictionary()
    window = _window(args)
    cohort = read_cohort_csv(args.cohort)
    profiles = [extract_known_factors(repo, inst, dictionary, window.observation_days) for inst in cohort]
    survivors, report = complete_case_filter(profiles)
    keep = {p.patient_id for p in survivors}
    kept = [i for i in cohort if i.patient_id in keep]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    known_factor_matrix(survivors).write_csv(out / "known_factors.csv")
    chapter_map = load_chapter_map(args.chapter_map) if args.chapter_map else load_chapter_map()
    for mode in ("chapter22", "threedigit"):
        build_icd_features(repo, kept, mode, window.observation_days, chapter_map).write_csv(out / f"icd_{mode}.csv")
    (out / "missingness.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    print(f"{report.n_complete} complete cases of {report.n_profiles}")
    return EXIT_OK


def cmd_score_pce(args) -> int:
    fm = FeatureMatrix.read_csv(args.features)
    table = load_coefficients(args.coefficients) if args.coefficients else load_coefficients()
    scores = score_cohort(_profiles_from_matrix(fm), table)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "pce_score"])
        for pid, s in zip(fm.instance_ids, scores):
            w.writerow([pid, repr(float(s))])
    return EXIT_OK


def _stack_features(paths) -> FeatureMatrix:
    fm = FeatureMatrix.read_csv(paths[0])
    for p in paths[1:]:
        other = FeatureMatrix.read_csv(p)
        pos = {pid: j for j, pid in enumerate(other.instance_ids)}
        fm = fm.hstack(other.rows([pos[pid] for pid in fm.instance_ids]))
    return fm


def cmd_train(args) -> int:
    fm = _stack_features(args.features)
    y = _aligned_labels(args.cohort, fm.instance_ids)
    s = _aligned_knowledge(args.knowledge, fm.instance_ids)
    if args.kind in ("lr_k", "nn_k", "kenn", "tsnn_teacher", "tsnn_student", "df_wa", "meta_fusion") and s is None:
        raise ConfigError(f"model kind {args.kind} needs --knowledge")
    doc = apply_overrides({}, args.set or [])
    cfg = config_from_dict(doc)
    mlp = M.MlpConfig(**{**vars(cfg.mlp), "seed": args.seed})
    logistic = M.LogisticConfig(**{**vars(cfg.logistic), "seed": args.seed})
    kind = args.kind
    if kind in ("lr", "lr_k"):
        model = M.train_logistic(fm, y, logistic, knowledge=s, kind=kind)
    elif kind in ("nn", "nn_k", "kenn"):
        model = M.train_mlp(fm, y, mlp, knowledge=s, injection=cfg.injection, kind=kind)
    elif kind in ("tsnn_teacher", "tsnn_student"):
        teacher, student = M.train_tsnn(fm, y, s, mlp, cfg.injection)
        model = teacher if kind == "tsnn_teacher" else student
    else:
        lr = M.train_logistic(fm, y, logistic)
        if kind == "df_wa":
            model = M.train_df_wa(lr, fm, y, s, cfg.injection.fusion_weights)
        else:
            model = M.train_meta_fusion(lr, fm, y, s, logistic)
    M.save_model(model, args.out)
    print(f"{model.display_name}: training AUC {auc(M.predict(model, fm, s), y):.6g}")
    return EXIT_OK


def cmd_score(args) -> int:
    model = M.load_model(args.model)
    fm = FeatureMatrix.read_csv(args.input)
    if fm.n == 0:
        _write_predictions(args.out, [], [])
        return EXIT_OK
    if list(fm.feature_names) != model.input_schema[: len(model.input_schema) - len(model.knowledge_names)]:
        raise M.SchemaMismatchError(model.input_schema[: len(model.input_schema) - len(model.knowledge_names)], fm.feature_names)
    s = _aligned_knowledge(args.knowledge, fm.instance_ids)
    if model.uses_knowledge_input and s is None:
        raise ConfigError(f"model kind {model.kind} needs --knowledge")
    _write_predictions(args.out, fm.instance_ids, M.predict(model, fm, s))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = M.load_model(args.model)
    fm = _stack_features(args.features)
    y = _aligned_labels(args.cohort, fm.instance_ids)
    s = _aligned_knowledge(args.knowledge, fm.instance_ids)
    value = auc(M.predict(model, fm, s), y)
    doc = {"model": model.display_name, "n": fm.n, "positives": int(y.sum()), "auc": value}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"{model.display_name} AUC {value:.6g} on {fm.n} instances")
    return EXIT_OK


def cmd_run_all(args) -> int:
    overrides = list(args.set or [])
    overrides.append(f"seed={args.seed}")
    for flag, key in (("data", "data_dir"), ("output", "output_root"), ("run_name", "run_name"), ("top_k", "top_k")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    for flag in ("experiments", "models"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{flag}={json.dumps(value.split(','))}")
    config = load_config(args.config, overrides)
    report, run_dir = run_pipeline(config)
    print((run_dir / "summary.txt").read_text(), end="")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    doc = {}
    if args.spec:
        doc = json.loads(Path(args.spec).read_text())
    for key in ("n_patients", "event_rate", "knowledge_signal_strength", "data_signal_strength", "noise_sd", "seed"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    if "window" in doc:
        doc["window"] = config_from_dict({"window": doc["window"]}).window
    try:
        spec = SynthSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    paths = generate_synthetic(spec, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------------


def _add_window(p) -> None:
    p.add_argument("--index-period-start", dest="index_period_start")
    p.add_argument("--index-period-end", dest="index_period_end")
    p.add_argument("--lookback-days", dest="lookback_days", type=int)
    p.add_argument("--observation-days", dest="observation_days", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskforge", description="Knowledge-enhanced ASCVD risk models from EHR tables.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("etl", help="load, validate and re-export the six EHR tables")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chapter-map")
    p.set_defaults(func=cmd_etl)

    p = sub.add_parser("cohort", help="apply inclusion criteria; write cohort.csv and funnel.csv")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dictionary")
    _add_window(p)
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("features", help="known factors (complete cases) and ICD history features")
    p.add_argument("--data", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dictionary")
    p.add_argument("--chapter-map")
    _add_window(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("score-pce", help="PCE risk for every row of a known-factor CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coefficients")
    p.set_defaults(func=cmd_score_pce)

    p = sub.add_parser("train", help="train one model kind")
    p.add_argument("--features", required=True, nargs="+", help="feature CSVs, joined column-wise")
    p.add_argument("--cohort", required=True)
    p.add_argument("--kind", required=True, choices=M.KINDS)
    p.add_argument("--knowledge", help="CSV with instance_id and one score column")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. mlp.epochs=20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AUC of a saved model on labelled features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--cohort", required=True)
    p.add_argument("--knowledge")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--knowledge")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run-all", help="full pipeline and EX-1..EX-4 grid")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--output")
    p.add_argument("--run-name", dest="run_name")
    p.add_argument("--experiments", help="comma-separated, e.g. EX-1,EX-4")
    p.add_argument("--models", help="comma-separated model kinds")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. injection.pi=0.5")
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("synth", help="generate a synthetic EHR repository")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--n-patients", dest="n_patients", type=int)
    p.add_argument("--event-rate", dest="event_rate", type=float)
    p.add_argument("--knowledge-signal", dest="knowledge_signal_strength", type=float)
    p.add_argument("--data-signal", dest="data_signal_strength", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        print(f"riskforge {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
