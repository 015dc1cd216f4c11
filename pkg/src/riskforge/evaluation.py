"""Train/test splitting, AUC, Kaplan-Meier, Cox regression and Pearson screening."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. AUC with a single class)."""


class CoxFitError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


# --- splitting ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_test(labels, spec: SplitSpec = SplitSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive index arrays (each sorted). Stratified by label unless disabled."""
    y = np.asarray(labels).reshape(-1)
    n = len(y)
    if n < 5:
        raise ValueError(f"need at least 5 instances to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        train = []
        for cls in np.unique(y):
            members = np.flatnonzero(y == cls)
            perm = rng.permutation(members)
            train.extend(perm[: _round_half_up(spec.train_fraction * len(members))])
        train = np.array(sorted(train), dtype=int)
    else:
        perm = rng.permutation(n)
        train = np.sort(perm[: _round_half_up(spec.train_fraction * n)])
    mask = np.zeros(n, dtype=bool)
    mask[train] = True
    return train, np.flatnonzero(~mask)


# --- AUC ----------------------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties counted 1/2."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC is undefined with a single class")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    # twice the average ranks are integers, so 2U is computed exactly
    twice_ranks = (2 * stats.rankdata(s, method="average")).astype(np.int64)
    twice_u = int(twice_ranks[pos].sum()) - n1 * (n1 + 1)
    return twice_u / (2 * n1 * n0)


# --- survival -----------------------------------------------------------------------------------


@dataclass
class SurvivalData:
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).reshape(-1)
        self.event = np.asarray(self.event).astype(bool).reshape(-1)
        if len(self.time) != len(self.event):
            raise ValueError("time and event differ in length")
        if (self.time < 0).any():
            raise ValueError("survival times must be non-negative")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float).reshape(len(self.time), -1)
            if not self.names:
                self.names = [f"x{j}" for j in range(self.covariates.shape[1])]
            if len(self.names) != self.covariates.shape[1]:
                raise ValueError("covariate names do not match columns")


class KmPoint(NamedTuple):
    time: float
    survival: float
    at_risk: int
    events: int
    censored: int


def kaplan_meier(data: SurvivalData) -> list[KmPoint]:
    """Product-limit estimate at every distinct observed time.

    The first point is ``(0, 1.0, n)``. At a tied time, events are counted
    before censorings, so subjects censored at ``t`` are still at risk at ``t``.
    """
    n = len(data.time)
    if n == 0:
        raise ValueError("kaplan_meier needs at least one subject")
    points = [KmPoint(0.0, 1.0, n, 0, 0)]
    times, inverse = np.unique(data.time, return_inverse=True)
    deaths = np.bincount(inverse, weights=data.event.astype(float), minlength=len(times)).astype(int)
    totals = np.bincount(inverse, minlength=len(times))
    at_risk = n
    surv = 1.0
    for t, d, c in zip(times, deaths, totals):
        if d:
            surv *= (at_risk - d) / at_risk
        points.append(KmPoint(float(t), surv, int(at_risk), int(d), int(c - d)))
        at_risk -= c
    return points


@dataclass
class CoxFitResult:
    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    monotone: tuple[str, ...] = ()
    trace: list[dict] = field(default_factory=list)

    @property
    def exp_beta(self) -> np.ndarray:
        return np.exp(self.beta)

    @property
    def z(self) -> np.ndarray:
        return self.beta / self.se

    @property
    def p_value(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z))

    @property
    def ci_lower(self) -> np.ndarray:
        return np.exp(self.beta - 1.96 * self.se)

    @property
    def ci_upper(self) -> np.ndarray:
        return np.exp(self.beta + 1.96 * self.se)

    def row(self, name: str) -> dict:
        j = self.names.index(name)
        return {
            "beta": float(self.beta[j]),
            "se": float(self.se[j]),
            "exp_beta": float(self.exp_beta[j]),
            "p_value": float(self.p_value[j]),
            "ci_lower": float(self.ci_lower[j]),
            "ci_upper": float(self.ci_upper[j]),
        }


class _CoxProblem:
    """Breslow partial likelihood on time-sorted, centred covariates."""

    def __init__(self, time: np.ndarray, event: np.ndarray, X: np.ndarray):
        order = np.argsort(time, kind="stable")
        self.time = time[order]
        self.event = event[order]
        self.X = X[order] - X.mean(axis=0)
        # risk set of an event at t is every subject with time >= t
        self.first = np.searchsorted(self.time, self.time, side="left")
        self.ev = np.flatnonzero(self.event)

    def evaluate(self, beta: np.ndarray, hessian: bool = True):
        eta = self.X @ beta
        shift = eta.max()
        r = np.exp(eta - shift)
        rc0 = np.cumsum(r[::-1])[::-1]
        rc1 = np.cumsum((r[:, None] * self.X)[::-1], axis=0)[::-1]
        f = self.first[self.ev]
        s0 = rc0[f]
        s1 = rc1[f]
        loglik = float(np.sum(eta[self.ev] - shift - np.log(s0)))
        xbar = s1 / s0[:, None]
        score = np.sum(self.X[self.ev] - xbar, axis=0)
        if not hessian:
            return loglik, score, None
        outer = r[:, None, None] * self.X[:, :, None] * self.X[:, None, :]
        rc2 = np.cumsum(outer[::-1], axis=0)[::-1]
        info = np.sum(rc2[f] / s0[:, None, None], axis=0) - xbar.T @ xbar
        return loglik, score, info


def cox_log_partial_likelihood(data: SurvivalData, beta) -> tuple[float, np.ndarray]:
    """Breslow log partial likelihood and its gradient at ``beta``."""
    prob = _CoxProblem(data.time, data.event, data.covariates)
    loglik, score, _ = prob.evaluate(np.asarray(beta, dtype=float), hessian=False)
    return loglik, score


def fit_cox(data: SurvivalData, max_iter: int = 50, tol: float = 1e-8, monotone_bound: float = 20.0) -> CoxFitResult:
    """Cox proportional hazards fit by Newton-Raphson with Breslow ties.

    Stops when ``max|score| < tol``. A coefficient escaping ``monotone_bound``
    signals a monotone likelihood; the fit stops there and the covariate is
    reported in ``result.monotone``.
    """
    if data.covariates is None or data.covariates.shape[1] == 0:
        raise ValueError("fit_cox needs at least one covariate")
    if not data.event.any():
        raise ValueError("fit_cox needs at least one event")
    X = data.covariates
    constant = [data.names[j] for j in range(X.shape[1]) if np.ptp(X[:, j]) == 0]
    if constant:
        raise ValueError(f"constant covariates cannot be fitted: {constant}")

    prob = _CoxProblem(data.time, data.event, X)
    beta = np.zeros(X.shape[1])
    loglik, score, info = prob.evaluate(beta)
    trace = [{"iteration": 0, "loglik": loglik, "max_score": float(np.max(np.abs(score)))}]
    converged = False
    monotone: tuple[str, ...] = ()
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise CoxFitError(f"singular information matrix at iteration {it}", trace) from exc
        if not np.all(np.isfinite(step)):
            raise CoxFitError(f"non-finite Newton step at iteration {it}", trace)
        # step halving keeps the partial likelihood non-decreasing
        for _ in range(30):
            new_beta = beta + step
            new_loglik, new_score, new_info = prob.evaluate(new_beta)
            if np.isfinite(new_loglik) and new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            step = step / 2
        beta, loglik, score, info = new_beta, new_loglik, new_score, new_info
        trace.append({"iteration": it, "loglik": loglik, "max_score": float(np.max(np.abs(score)))})
        escaped = np.abs(beta) > monotone_bound
        if escaped.any():
            monotone = tuple(n for n, e in zip(data.names, escaped) if e)
            log.warning("monotone likelihood suspected for %s", ", ".join(monotone))
            break
    else:
        converged = bool(np.max(np.abs(score)) < tol)
    if not converged and not monotone:
        raise CoxFitError(f"Newton-Raphson did not converge in {max_iter} iterations", trace)

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise CoxFitError("singular information matrix at the solution", trace) from exc
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return CoxFitResult(list(data.names), beta, se, loglik, it, converged, monotone, trace)


# --- univariate screening -----------------------------------------------------------------------


@dataclass(frozen=True)
class PearsonResult:
    name: str
    r: float
    p_value: float
    defined: bool


def pearson_univariate(features: np.ndarray, labels, names: Sequence[str] | None = None) -> list[PearsonResult]:
    """Pearson r of each column against the outcome, with a two-sided t-test p-value (n - 2 d.o.f.)."""
    X = np.asarray(features, dtype=float)
    X = X.reshape(X.shape[0], -1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    n = len(y)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    yc = y - y.mean()
    syy = float(yc @ yc)
    out = []
    for j, name in enumerate(names):
        xc = X[:, j] - X[:, j].mean()
        sxx = float(xc @ xc)
        if sxx == 0.0 or syy == 0.0 or n < 3:
            out.append(PearsonResult(name, math.nan, math.nan, False))
            continue
        r = float(xc @ yc) / math.sqrt(sxx * syy)
        r = max(-1.0, min(1.0, r))
        if abs(r) == 1.0:
            p = 0.0
        else:
            t = r * math.sqrt((n - 2) / (1.0 - r * r))
            p = float(2.0 * stats.t.sf(abs(t), n - 2))
        out.append(PearsonResult(name, r, p, True))
    return out
