"""End-to-end run: load -> cohort -> factors -> PCE -> EX-1..EX-4 model grid -> reports.

Every random choice draws from a seed derived from the master seed and a job
label (``derive_seed``), so the grid can fan out to a thread pool without
changing any result. Outputs land in ``<output_root>/<timestamp>-<config hash>``
together with a manifest of seeds and sha256 checksums.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from . import models as M
from .cohort import (
    DEFAULT_DICTIONARY,
    CohortInstance,
    FunnelReport,
    StudyWindow,
    apply_inclusion,
    finalize_cohort,
    load_dictionary,
    write_cohort_csv,
)
from .ehr_store import load_repository, table_paths_in
from .evaluation import (
    CoxFitError,
    SplitSpec,
    SurvivalData,
    UndefinedMetricError,
    auc,
    fit_cox,
    kaplan_meier,
    pearson_univariate,
    split_train_test,
)
from .features import (
    DEFAULT_CHAPTER_MAP,
    FeatureMatrix,
    build_icd_features,
    chi2_select,
    complete_case_filter,
    extract_known_factors,
    known_factor_matrix,
    load_chapter_map,
    standardize,
)
from .pce import DEFAULT_COEFFICIENTS, load_coefficients, score_cohort
from .reports import EXPERIMENTS, AucRow, EvalReport, Table3Row, render_reports

log = logging.getLogger(__name__)

# the eight Table 2 models; meta_fusion is available but off by default
DEFAULT_MODELS = ("lr", "lr_k", "nn", "nn_k", "tsnn_teacher", "tsnn_student", "kenn", "df_wa")
TABLE3_EXPERIMENTS = ("EX-2", "EX-4")


class ConfigError(ValueError):
    """The pipeline configuration is invalid or references missing files."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, manifest_path: Path | None = None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest_path = manifest_path


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    dictionary: str = str(DEFAULT_DICTIONARY)
    coefficients: str = str(DEFAULT_COEFFICIENTS)
    chapter_map: str = str(DEFAULT_CHAPTER_MAP)
    window: StudyWindow = field(default_factory=StudyWindow)
    split: SplitSpec = field(default_factory=SplitSpec)
    mlp: M.MlpConfig = field(default_factory=M.MlpConfig)
    logistic: M.LogisticConfig = field(default_factory=M.LogisticConfig)
    injection: M.InjectionWeights = field(default_factory=M.InjectionWeights)
    experiments: tuple[str, ...] = EXPERIMENTS
    models: tuple[str, ...] = DEFAULT_MODELS
    top_k: int = 20
    repeats: int = 1
    seed: int = 0
    output_root: str = "runs"
    run_name: str | None = None  # None: timestamp + config hash
    save_models: bool = True

    def validate(self, check_files: bool = True) -> None:
        if not self.experiments:
            raise ConfigError("experiment set must be non-empty")
        unknown = [e for e in self.experiments if e not in EXPERIMENTS]
        if unknown:
            raise ConfigError(f"unknown experiments {unknown}; choose from {list(EXPERIMENTS)}")
        bad = [m for m in self.models if m not in M.KINDS]
        if bad or not self.models:
            raise ConfigError(f"unknown or empty model kinds {bad}; choose from {list(M.KINDS)}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if check_files:
            for name in ("dictionary", "coefficients", "chapter_map"):
                if not Path(getattr(self, name)).is_file():
                    raise ConfigError(f"{name} file not found: {getattr(self, name)}")
            if not Path(self.data_dir).is_dir():
                raise ConfigError(f"data directory not found: {self.data_dir}")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["window"] = {k: (v.isoformat() if isinstance(v, date) else v) for k, v in doc["window"].items()}
        doc["experiments"] = list(self.experiments)
        doc["models"] = list(self.models)
        if doc["injection"]["fusion_weights"] is not None:
            doc["injection"]["fusion_weights"] = list(doc["injection"]["fusion_weights"])
        return doc

    def config_hash(self) -> str:
        doc = self.to_json()
        doc.pop("output_root")
        doc.pop("run_name")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


_NESTED = {
    "window": StudyWindow,
    "split": SplitSpec,
    "mlp": M.MlpConfig,
    "logistic": M.LogisticConfig,
    "injection": M.InjectionWeights,
}


def _build(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if cls is StudyWindow:
        for k in ("index_period_start", "index_period_end"):
            if isinstance(kwargs.get(k), str):
                kwargs[k] = date.fromisoformat(kwargs[k])
    if cls is M.InjectionWeights and kwargs.get("fusion_weights") is not None:
        kwargs["fusion_weights"] = tuple(kwargs["fusion_weights"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    for key, cls in _NESTED.items():
        if key in doc:
            doc[key] = _build(cls, doc[key] or {})
    for key in ("experiments", "models"):
        if key in doc:
            value = doc[key]
            doc[key] = tuple(value.split(",")) if isinstance(value, str) else tuple(value)
    return _build(PipelineConfig, doc)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when they can."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = doc
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[leaf] = _coerce(value)
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(doc, overrides or []))


def derive_seed(master: int, *labels) -> int:
    """Stable 32-bit seed for a job, independent of scheduling order."""
    key = json.dumps([int(master), *[str(x) for x in labels]])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("RISKFORGE_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"RISKFORGE_THREADS must be an integer, got {env!r}") from exc
    return max(1, min(cap, n_jobs))


# --- experiment data ----------------------------------------------------------------------------


@dataclass
class CohortData:
    instances: list[CohortInstance]
    labels: np.ndarray
    knowledge: np.ndarray  # PCE score per instance
    known: FeatureMatrix
    chapters: FeatureMatrix
    threedigit: FeatureMatrix


def experiment_features(data: CohortData, experiment: str, train_idx: np.ndarray, top_k: int):
    """Raw feature matrix for one experiment; EX-4 selects codes on the training rows only."""
    if experiment == "EX-1":
        return data.known, None
    if experiment == "EX-2":
        return data.known.hstack(data.chapters), None
    if experiment == "EX-3":
        return data.known.hstack(data.threedigit), None
    if experiment == "EX-4":
        k = min(top_k, data.threedigit.m)
        _, selection = chi2_select(data.threedigit.rows(train_idx), data.labels[train_idx], k)
        return data.known.hstack(data.threedigit.columns(list(selection.selected))), selection
    raise ValueError(f"unknown experiment {experiment!r}")


def _job_units(kinds) -> list[str]:
    """Training units: TSNN yields two models, fusion reuses the LR data model."""
    units = []
    for k in kinds:
        unit = {"tsnn_teacher": "tsnn", "tsnn_student": "tsnn", "df_wa": "lr", "meta_fusion": "lr"}.get(k, k)
        if unit not in units:
            units.append(unit)
    return units


def train_unit(unit: str, train: FeatureMatrix, y: np.ndarray, s: np.ndarray, config: PipelineConfig, seed: int, kinds) -> dict[str, M.TrainedModel]:
    mlp = dataclasses.replace(config.mlp, seed=seed)
    logistic = dataclasses.replace(config.logistic, seed=seed)
    if unit == "lr":
        lr = M.train_logistic(train, y, logistic)
        out = {"lr": lr}
        if "df_wa" in kinds:
            out["df_wa"] = M.train_df_wa(lr, train, y, s, config.injection.fusion_weights)
        if "meta_fusion" in kinds:
            out["meta_fusion"] = M.train_meta_fusion(lr, train, y, s, logistic)
        return out
    if unit == "lr_k":
        return {"lr_k": M.train_logistic(train, y, logistic, knowledge=s, kind="lr_k")}
    if unit in ("nn", "nn_k", "kenn"):
        return {unit: M.train_mlp(train, y, mlp, knowledge=s, injection=config.injection, kind=unit)}
    if unit == "tsnn":
        teacher, student = M.train_tsnn(train, y, s, mlp, config.injection)
        return {"tsnn_teacher": teacher, "tsnn_student": student}
    raise ValueError(f"unknown training unit {unit!r}")


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return math.nan


# --- the run ------------------------------------------------------------------------------------


class _Run:
    def __init__(self, config: PipelineConfig, run_dir: Path):
        self.config = config
        self.run_dir = run_dir
        self.manifest = {
            "config": config.to_json(),
            "config_hash": config.config_hash(),
            "seeds": {"master": config.seed},
            "stages": [],
            "status": "running",
            "files": {},
        }
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.run_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def write_manifest(self) -> Path:
        self.manifest["files"] = {
            str(p.relative_to(self.run_dir)): sha256_file(p) for p in sorted(set(self.files)) if p.exists()
        }
        path = self.run_dir / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        return path


def default_run_dir(config: PipelineConfig) -> Path:
    name = config.run_name or f"{time.strftime('%Y%m%dT%H%M%S')}-{config.config_hash()}"
    return Path(config.output_root) / name


def run_pipeline(config: PipelineConfig, run_dir: str | Path | None = None) -> tuple[EvalReport, Path]:
    """Run every stage and return the report and the run directory.

    A failing stage raises ``PipelineError`` after writing a partial manifest.
    """
    config.validate()
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(config, run_dir)
    state: dict = {}
    stages = [
        ("load", _stage_load),
        ("cohort", _stage_cohort),
        ("factors", _stage_factors),
        ("pce", _stage_pce),
        ("features", _stage_features),
        ("train", _stage_train),
        ("analysis", _stage_analysis),
        ("report", _stage_report),
    ]
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            fn(run, state)
        except Exception as exc:
            run.manifest["status"] = "failed"
            run.manifest["failed_stage"] = name
            run.manifest["error"] = f"{type(exc).__name__}: {exc}"
            raise PipelineError(name, exc, run.write_manifest()) from exc
        run.manifest["stages"].append(name)
        log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
    run.manifest["status"] = "complete"
    run.write_manifest()
    return state["report"], run_dir


def _stage_load(run: _Run, state: dict) -> None:
    cfg = run.config
    state["repo"] = load_repository(table_paths_in(cfg.data_dir))
    state["dictionary"] = load_dictionary(cfg.dictionary)
    state["chapter_map"] = load_chapter_map(cfg.chapter_map)
    state["coefficients"] = load_coefficients(cfg.coefficients)
    run.manifest["load_report"] = state["repo"].load_report.summary()
    run.manifest["inputs"] = {name: sha256_file(p) for name, p in sorted(table_paths_in(cfg.data_dir).items())}


def _stage_cohort(run: _Run, state: dict) -> None:
    funnel = FunnelReport()
    included = apply_inclusion(state["repo"], state["dictionary"], run.config.window, funnel)
    state["cohort"] = finalize_cohort(included)
    funnel.write_csv(run.path("funnel.csv"))
    write_cohort_csv(state["cohort"], run.path("cohort.csv"))
    run.manifest["group_counts"] = dict(funnel.group_counts)


def _stage_factors(run: _Run, state: dict) -> None:
    cfg = run.config
    profiles = [
        extract_known_factors(state["repo"], inst, state["dictionary"], cfg.window.observation_days) for inst in state["cohort"]
    ]
    survivors, report = complete_case_filter(profiles)
    keep = {p.patient_id for p in survivors}
    state["instances"] = [i for i in state["cohort"] if i.patient_id in keep]
    state["profiles"] = survivors
    run.path("missingness.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    known_factor_matrix(survivors).write_csv(run.path("features/known_factors.csv"))


def _stage_pce(run: _Run, state: dict) -> None:
    scores = score_cohort(state["profiles"], state["coefficients"])
    state["pce"] = scores
    with open(run.path("pce_scores.csv"), "w") as fh:
        fh.write("instance_id,pce_score\n")
        for p, s in zip(state["profiles"], scores):
            fh.write(f"{p.patient_id},{s!r}\n")


def _stage_features(run: _Run, state: dict) -> None:
    cfg = run.config
    instances = state["instances"]
    labels = np.array([i.label for i in instances], dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("the complete-case cohort has a single outcome class")
    data = CohortData(
        instances=instances,
        labels=labels,
        knowledge=state["pce"],
        known=known_factor_matrix(state["profiles"]),
        chapters=build_icd_features(state["repo"], instances, "chapter22", cfg.window.observation_days, state["chapter_map"]),
        threedigit=build_icd_features(state["repo"], instances, "threedigit", cfg.window.observation_days, state["chapter_map"]),
    )
    data.chapters.write_csv(run.path("features/icd_chapter22.csv"))
    data.threedigit.write_csv(run.path("features/icd_threedigit.csv"))
    state["data"] = data
    splits = []
    for r in range(cfg.repeats):
        seed = derive_seed(cfg.seed, "split", r)
        run.manifest["seeds"][f"split/{r}"] = seed
        splits.append(split_train_test(labels, dataclasses.replace(cfg.split, seed=seed)))
    state["splits"] = splits
    with open(run.path("split.csv"), "w") as fh:
        fh.write("instance_id,repeat,partition\n")
        for r, (train, test) in enumerate(splits):
            part = np.empty(len(labels), dtype=object)
            part[train], part[test] = "train", "test"
            for inst, p in zip(instances, part):
                fh.write(f"{inst.patient_id},{r},{p}\n")


def _stage_train(run: _Run, state: dict) -> None:
    cfg = run.config
    data: CohortData = state["data"]
    y, s = data.labels, data.knowledge
    # EX features and standardization are cheap; build them before fanning out
    prepared = {}
    selections = {}
    for r, (train, test) in enumerate(state["splits"]):
        for exp in cfg.experiments:
            raw, selection = experiment_features(data, exp, train, cfg.top_k)
            if selection is not None:
                selections[(exp, r)] = selection
            tr, te, stats = standardize(raw.rows(train), raw.rows(test))
            if r == 0:
                stats.write_json(run.path(f"features/standardization_{exp}.json"))
            prepared[(exp, r)] = (tr, te, train, test)
    state["selections"] = selections

    jobs = []
    for (exp, r), _ in prepared.items():
        for unit in _job_units(cfg.models):
            seed = derive_seed(cfg.seed, exp, unit, r)
            run.manifest["seeds"][f"{exp}/{unit}/{r}"] = seed
            jobs.append((exp, r, unit, seed))

    def work(job):
        exp, r, unit, seed = job
        tr, te, train, test = prepared[(exp, r)]
        trained = train_unit(unit, tr, y[train], s[train], cfg, seed, cfg.models)
        out = {}
        for kind, model in trained.items():
            if kind not in cfg.models:
                continue
            p_tr = M.predict(model, tr, s[train])
            p_te = M.predict(model, te, s[test])
            if not (np.isfinite(p_tr).all() and np.isfinite(p_te).all()):
                raise M.NumericalError(f"{exp} {kind}: non-finite predictions")
            out[kind] = (model, _safe_auc(p_tr, y[train]), _safe_auc(p_te, y[test]))
        return job, out

    with ThreadPoolExecutor(max_workers=worker_count(len(jobs))) as pool:
        results = list(pool.map(work, jobs))

    # single writer, fixed order
    sums: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for (exp, r, unit, seed), out in results:
        for kind, (model, a_tr, a_te) in out.items():
            sums.setdefault((exp, kind), []).append((a_tr, a_te))
            if cfg.save_models and r == 0:
                M.save_model(model, run.path(f"models/{exp}_{kind}.json"))
    grid = []
    for exp in cfg.experiments:
        for kind in cfg.models:
            vals = sums[(exp, kind)]
            grid.append(AucRow(exp, M.DISPLAY_NAMES[kind], float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))))
    state["grid"] = grid
    if selections:
        doc = {f"{exp}/{r}": {"selected": list(sel.selected)} for (exp, r), sel in sorted(selections.items())}
        run.path("chi2_selection.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def table3_rows(data: CohortData, experiment: str, train_idx: np.ndarray, top_k: int, notes: list[str]) -> list[Table3Row]:
    """Pearson screening and a multivariable Cox fit on the raw experiment features."""
    raw, _ = experiment_features(data, experiment, train_idx, top_k)
    keep = [j for j in range(raw.m) if np.ptp(raw.values[:, j]) > 0]
    dropped = [raw.feature_names[j] for j in range(raw.m) if j not in keep]
    if dropped:
        notes.append(f"{experiment}: constant columns left out of table 3: {', '.join(dropped)}")
    names = [raw.feature_names[j] for j in keep]
    X = raw.values[:, keep]
    pearson = pearson_univariate(X, data.labels, names)
    times = np.array([i.event_or_censor_days for i in data.instances], dtype=float)
    surv = SurvivalData(times, data.labels.astype(bool), X, names)
    cox = None
    try:
        cox = fit_cox(surv)
        if cox.monotone:
            notes.append(f"{experiment}: monotone likelihood for {', '.join(cox.monotone)}")
    except (CoxFitError, ValueError) as exc:
        notes.append(f"{experiment}: Cox fit failed: {exc}")
    rows = []
    for j, (name, pr) in enumerate(zip(names, pearson)):
        if cox is not None:
            rows.append(
                Table3Row(experiment, name, pr.p_value, pr.r, float(cox.p_value[j]), float(cox.exp_beta[j]), float(cox.ci_lower[j]), float(cox.ci_upper[j]))
            )
        else:
            rows.append(Table3Row(experiment, name, pr.p_value, pr.r, math.nan, math.nan, math.nan, math.nan))
    return rows


def _stage_analysis(run: _Run, state: dict) -> None:
    cfg = run.config
    data: CohortData = state["data"]
    notes: list[str] = []
    train, test = state["splits"][0]
    table3 = []
    for exp in TABLE3_EXPERIMENTS:
        table3 += table3_rows(data, exp, train, cfg.top_k, notes)
    times = np.array([i.event_or_censor_days for i in data.instances], dtype=float)
    km = kaplan_meier(SurvivalData(times, data.labels.astype(bool)))
    baseline = {
        "pce_all": _safe_auc(data.knowledge, data.labels),
        "pce_test": float(np.mean([_safe_auc(data.knowledge[te], data.labels[te]) for _, te in state["splits"]])),
    }
    n_pos = int(data.labels.sum())
    notes.insert(0, f"complete-case cohort: {len(data.labels)} instances, {n_pos} events, {len(data.labels) - n_pos} censored")
    state["report"] = EvalReport(state["grid"], table3, km, baseline, notes)


def _stage_report(run: _Run, state: dict) -> None:
    paths = render_reports(state["report"], run.run_dir)
    run.files.extend(paths.values())
