"""Risk models with three ways of injecting a knowledge score ``s``.

* input features:  LR-K / NN-K append ``s`` as extra input columns;
* objective:       KENN minimises ``(1 - pi) l(y, f(x)) + pi l(s, f(x))``;
                   TSNN alternates a teacher (student mimicry + pi_T l(s, .))
                   and a student (teacher mimicry + pi_S l(y, .));
* output:          DF-WA averages the data model score with ``s``, or a
                   logistic meta-learner is fitted over the scores.

Every objective is a weighted sum of soft-target cross-entropies, so one
loss/gradient routine serves all of them. Everything is numpy, float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FeatureMatrix

EPS = 1e-7

KINDS = ("lr", "lr_k", "nn", "nn_k", "tsnn_teacher", "tsnn_student", "kenn", "df_wa", "meta_fusion")
KNOWLEDGE_INPUT_KINDS = ("lr_k", "nn_k", "df_wa", "meta_fusion")
DISPLAY_NAMES = {
    "lr": "LR",
    "lr_k": "LR-K",
    "nn": "NN",
    "nn_k": "NN-K",
    "tsnn_teacher": "TSNN-T",
    "tsnn_student": "TSNN-S",
    "kenn": "KENN",
    "df_wa": "DF-WA",
    "meta_fusion": "DF-META",
}

# a list of (weight, target vector) pairs; the loss is sum(w * CE(target, p))
Targets = Sequence[tuple[float, np.ndarray]]


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class SchemaMismatchError(ValueError):
    def __init__(self, expected: Sequence[str], got: Sequence[str]):
        missing = [c for c in expected if c not in got]
        extra = [c for c in got if c not in expected]
        msg = f"input schema mismatch: missing {missing}, unexpected {extra}"
        if not missing and not extra:
            msg = "input schema mismatch: same columns in a different order"
        super().__init__(msg)
        self.missing = missing
        self.extra = extra


@dataclass
class MlpConfig:
    hidden_layers: int = 3
    hidden_units: int = 8
    dropout_rate: float = 0.5
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LogisticConfig:
    max_iter: int = 3000
    tol: float = 1e-6
    learning_rate: float | None = None  # None: 1 / Lipschitz bound of the gradient
    l2: float = 0.0
    seed: int = 0


@dataclass
class InjectionWeights:
    pi: float = 0.653
    pi_teacher: float = 0.653
    pi_student: float = 1.0
    tsnn_outer_iterations: int = 5
    tsnn_inner_epochs: int = 10
    tsnn_warmup_epochs: int | None = None  # None: MlpConfig.epochs
    fusion_weights: tuple[float, ...] | None = None  # None: proportional to training AUC

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")
        if self.pi_teacher < 0 or self.pi_student < 0:
            raise ValueError("pi_teacher and pi_student must be non-negative")


@dataclass
class ModelParameters:
    theta: np.ndarray
    architecture: dict
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class TrainedModel:
    kind: str
    parameters: ModelParameters
    input_schema: list[str]
    uses_knowledge_input: bool = False
    knowledge_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    components: list["TrainedModel"] = field(default_factory=list)

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.kind]

    @property
    def loss_trace(self) -> list[float]:
        return self.parameters.loss_trace


# --- losses -------------------------------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(target, prediction):
    """Soft-target binary cross-entropy with the prediction clamped to [EPS, 1 - EPS]."""
    t = np.asarray(target, dtype=float)
    p = np.clip(np.asarray(prediction, dtype=float), EPS, 1.0 - EPS)
    out = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def composite_loss_and_dlogit(logits: np.ndarray, targets: Targets) -> tuple[float, np.ndarray]:
    """Mean of ``sum(w * CE(t, sigmoid(z)))`` and its derivative w.r.t. each logit."""
    p = sigmoid(logits)
    inside = (p > EPS) & (p < 1.0 - EPS)
    n = len(logits)
    loss = 0.0
    dz = np.zeros_like(p)
    for w, t in targets:
        loss = loss + w * np.sum(cross_entropy(t, p)) / n
        # d/dz CE(t, clip(sigmoid(z))) = p - t inside the clamp, 0 outside
        dz = dz + w * np.where(inside, p - t, 0.0)
    return float(loss), dz / n


def _check_targets(targets: Targets, n: int) -> list[tuple[float, np.ndarray]]:
    out = []
    for w, t in targets:
        t = np.asarray(t, dtype=float).reshape(-1)
        if len(t) != n:
            raise ValueError(f"target length {len(t)} != {n}")
        out.append((float(w), t))
    return out


# --- logistic regression ------------------------------------------------------------------------


def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def logistic_loss_and_grad(theta: np.ndarray, X: np.ndarray, targets: Targets, l2: float = 0.0):
    """Loss and gradient for ``theta = [intercept, weights...]``; the intercept is not penalised."""
    return _logistic_loss_and_grad(theta, _with_intercept(X), targets, l2)


def _logistic_loss_and_grad(theta, A, targets, l2):
    loss, dz = composite_loss_and_dlogit(A @ theta, targets)
    grad = A.T @ dz
    if l2:
        loss += 0.5 * l2 * float(theta[1:] @ theta[1:])
        grad[1:] += l2 * theta[1:]
    return loss, grad


def _fit_logistic(X: np.ndarray, targets: Targets, config: LogisticConfig) -> tuple[np.ndarray, list[float]]:
    A = _with_intercept(X)
    targets = _check_targets(targets, A.shape[0])
    n = A.shape[0]
    lr = config.learning_rate
    if lr is None:
        lipschitz = 0.25 * float(np.linalg.eigvalsh(A.T @ A / n)[-1]) + config.l2
        lr = 1.0 / lipschitz
    theta = np.zeros(A.shape[1])
    trace = []
    for _ in range(config.max_iter):
        loss, grad = _logistic_loss_and_grad(theta, A, targets, config.l2)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite logistic loss after {len(trace)} iterations (lr={lr:g})")
        trace.append(loss)
        if np.linalg.norm(grad) < config.tol:
            break
        theta = theta - lr * grad
    return theta, trace


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=float).reshape(-1)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    return y


def _knowledge_block(knowledge, n: int) -> np.ndarray:
    if knowledge is None:
        raise ValueError("this model kind needs a knowledge score vector")
    k = np.asarray(knowledge, dtype=float)
    k = k.reshape(n, -1)
    if not np.isfinite(k).all():
        raise ValueError("knowledge scores must be finite")
    return k


def knowledge_names_for(k: int) -> list[str]:
    return ["pce_score"] if k == 1 else [f"knowledge_{j}" for j in range(1, k + 1)]


def train_logistic(
    features: FeatureMatrix,
    labels,
    config: LogisticConfig | None = None,
    knowledge=None,
    kind: str = "lr",
) -> TrainedModel:
    """Full-batch gradient descent from zero on mean cross-entropy (``lr`` or ``lr_k``)."""
    config = config or LogisticConfig()
    y = _binary_labels(labels)
    X = features.values
    schema = list(features.feature_names)
    knames: list[str] = []
    if kind == "lr_k":
        K = _knowledge_block(knowledge, features.n)
        knames = knowledge_names_for(K.shape[1])
        X = np.hstack([X, K])
    elif kind != "lr":
        raise ValueError(f"train_logistic cannot fit kind {kind!r}")
    theta, trace = _fit_logistic(X, [(1.0, y)], config)
    return TrainedModel(
        kind=kind,
        parameters=ModelParameters(theta, {"type": "logistic", "n_inputs": X.shape[1]}, trace),
        input_schema=schema + knames,
        uses_knowledge_input=kind == "lr_k",
        knowledge_names=knames,
        config=asdict(config),
        seed=config.seed,
    )


# --- multilayer perceptron ----------------------------------------------------------------------


def layer_sizes(n_inputs: int, config: MlpConfig) -> list[int]:
    return [n_inputs] + [config.hidden_units] * config.hidden_layers + [1]


def _n_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _unpack(theta: np.ndarray, sizes: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Weight/bias views into the flat parameter vector."""
    layers, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = theta[pos : pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((W, theta[pos : pos + b]))
        pos += b
    return layers


def init_network(sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    theta = np.zeros(_n_params(sizes))
    for (W, _), a, b in zip(_unpack(theta, sizes), sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (a + b))
        W[...] = rng.uniform(-limit, limit, size=(a, b))
    return theta


def network_logits(theta: np.ndarray, sizes: Sequence[int], X: np.ndarray, masks=None) -> np.ndarray:
    layers = _unpack(theta, sizes)
    h = X
    for i, (W, b) in enumerate(layers[:-1]):
        h = np.maximum(h @ W + b, 0.0)
        if masks is not None:
            h = h * masks[i]
    W, b = layers[-1]
    return (h @ W + b)[:, 0]


def network_loss_and_grad(theta: np.ndarray, sizes: Sequence[int], X: np.ndarray, targets: Targets, masks=None):
    """Composite loss and backpropagated gradient; ``masks`` are inverted-dropout multipliers."""
    layers = _unpack(theta, sizes)
    acts = [X]
    pre = []
    h = X
    for i, (W, b) in enumerate(layers[:-1]):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    W, b = layers[-1]
    logits = (h @ W + b)[:, 0]
    loss, dz = composite_loss_and_dlogit(logits, targets)

    grad = np.zeros_like(theta)
    glayers = _unpack(grad, sizes)
    delta = dz[:, None]
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if masks is not None:
            delta = delta * masks[i - 1]
        delta = delta * (pre[i - 1] > 0)
    return loss, grad


class _Optimizer:
    def __init__(self, size: int, config: MlpConfig):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            theta -= lr * grad
            return
        b1, b2 = 0.9, 0.999
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + EPS)


class _Network:
    """Parameters, optimizer state and RNG stream of one network under training."""

    def __init__(self, n_inputs: int, config: MlpConfig, rng: np.random.Generator):
        self.config = config
        self.sizes = layer_sizes(n_inputs, config)
        self.rng = rng
        self.theta = init_network(self.sizes, rng)
        self.opt = _Optimizer(self.theta.size, config)
        self.trace: list[float] = []

    def fit(self, X: np.ndarray, targets: Targets, epochs: int) -> None:
        n = X.shape[0]
        targets = _check_targets(targets, n)
        bs = self.config.batch_size
        rate = self.config.dropout_rate
        hidden = self.sizes[1:-1]
        for _ in range(epochs):
            order = self.rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                masks = None
                if rate > 0:
                    keep = 1.0 - rate
                    masks = [(self.rng.random((len(idx), u)) < keep) / keep for u in hidden]
                loss, grad = network_loss_and_grad(self.theta, self.sizes, X[idx], [(w, t[idx]) for w, t in targets], masks)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss in epoch {len(self.trace) + 1}")
                self.opt.step(self.theta, grad)
                total += loss * len(idx)
            self.trace.append(total / n)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(network_logits(self.theta, self.sizes, X))

    def to_model(self, kind: str, schema, knames, extra_config=None) -> TrainedModel:
        cfg = asdict(self.config)
        if extra_config:
            cfg.update(extra_config)
        return TrainedModel(
            kind=kind,
            parameters=ModelParameters(self.theta.copy(), {"type": "mlp", "sizes": list(self.sizes)}, list(self.trace)),
            input_schema=list(schema) + list(knames),
            uses_knowledge_input=bool(knames),
            knowledge_names=list(knames),
            config=cfg,
            seed=self.config.seed,
        )


def train_mlp(
    features: FeatureMatrix,
    labels,
    config: MlpConfig | None = None,
    knowledge=None,
    injection: InjectionWeights | None = None,
    kind: str = "nn",
) -> TrainedModel:
    """Train ``nn``, ``nn_k`` (knowledge as inputs) or ``kenn`` (knowledge in the objective)."""
    config = config or MlpConfig()
    injection = injection or InjectionWeights()
    y = _binary_labels(labels)
    X = features.values
    knames: list[str] = []
    if kind == "nn":
        targets = [(1.0, y)]
    elif kind == "nn_k":
        K = _knowledge_block(knowledge, features.n)
        knames = knowledge_names_for(K.shape[1])
        X = np.hstack([X, K])
        targets = [(1.0, y)]
    elif kind == "kenn":
        K = _knowledge_block(knowledge, features.n)
        if K.shape[1] != 1:
            raise ValueError("kenn takes a single knowledge score column")
        targets = [(1.0 - injection.pi, y), (injection.pi, K[:, 0])]
    else:
        raise ValueError(f"train_mlp cannot fit kind {kind!r}")
    net = _Network(X.shape[1], config, np.random.default_rng(config.seed))
    net.fit(X, targets, config.epochs)
    extra = {"pi": injection.pi} if kind == "kenn" else None
    return net.to_model(kind, features.feature_names, knames, extra)


def train_tsnn(
    features: FeatureMatrix,
    labels,
    knowledge,
    config: MlpConfig | None = None,
    injection: InjectionWeights | None = None,
) -> tuple[TrainedModel, TrainedModel]:
    """Teacher-student pair trained by alternating minimisation.

    The student first fits the labels alone (same RNG stream as a plain NN), then
    each outer round trains the teacher on student mimicry + ``pi_T`` knowledge
    loss with the student frozen, and the student on teacher mimicry + ``pi_S``
    label loss with the teacher frozen.
    """
    config = config or MlpConfig()
    injection = injection or InjectionWeights()
    y = _binary_labels(labels)
    X = features.values
    s = _knowledge_block(knowledge, features.n)
    if s.shape[1] != 1:
        raise ValueError("tsnn takes a single knowledge score column")
    s = s[:, 0]
    warmup = config.epochs if injection.tsnn_warmup_epochs is None else injection.tsnn_warmup_epochs

    student = _Network(X.shape[1], config, np.random.default_rng(config.seed))
    student.fit(X, [(1.0, y)], warmup)
    teacher = _Network(X.shape[1], config, np.random.default_rng([config.seed, 1]))
    for _ in range(injection.tsnn_outer_iterations):
        teacher.fit(X, [(1.0, student.predict(X)), (injection.pi_teacher, s)], injection.tsnn_inner_epochs)
        student.fit(X, [(1.0, teacher.predict(X)), (injection.pi_student, y)], injection.tsnn_inner_epochs)

    extra = {k: v for k, v in asdict(injection).items() if k.startswith(("pi_", "tsnn_"))}
    return (
        teacher.to_model("tsnn_teacher", features.feature_names, [], extra),
        student.to_model("tsnn_student", features.feature_names, [], extra),
    )


# --- decision fusion ----------------------------------------------------------------------------


def fuse_weighted_average(scores: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Convex combination of aligned score vectors ``s0..sk``."""
    arrays = [np.asarray(s, dtype=float).reshape(-1) for s in scores]
    if len(arrays) != len(weights):
        raise ValueError(f"{len(arrays)} score vectors but {len(weights)} weights")
    if len({len(a) for a in arrays}) > 1:
        raise ValueError("score vectors differ in length")
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or not math.isclose(float(w.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("fusion weights must be non-negative and sum to 1")
    out = np.zeros_like(arrays[0])
    for wj, a in zip(w, arrays):
        out = out + wj * a
    return out


def auc_weights(scores: Sequence[np.ndarray], labels) -> list[float]:
    """Fusion weights proportional to each score's training AUC."""
    from .evaluation import auc

    aucs = [auc(s, labels) for s in scores]
    total = sum(aucs)
    return [a / total for a in aucs]


def train_df_wa(
    data_model: TrainedModel,
    features: FeatureMatrix,
    labels,
    knowledge,
    weights: Sequence[float] | None = None,
) -> TrainedModel:
    """Weighted-average fusion of ``data_model``'s score with the knowledge scores."""
    K = _knowledge_block(knowledge, features.n)
    s0 = predict(data_model, features, knowledge)
    scores = [s0] + [K[:, j] for j in range(K.shape[1])]
    w = list(weights) if weights is not None else auc_weights(scores, labels)
    fuse_weighted_average(scores, w)  # validates
    knames = knowledge_names_for(K.shape[1])
    return TrainedModel(
        kind="df_wa",
        parameters=ModelParameters(np.asarray(w, dtype=float), {"type": "weighted_average", "n_scores": len(w)}, []),
        input_schema=list(features.feature_names) + knames,
        uses_knowledge_input=True,
        knowledge_names=knames,
        config={"weights": [float(x) for x in w]},
        seed=data_model.seed,
        components=[data_model],
    )


def train_meta_fusion(
    data_model: TrainedModel,
    features: FeatureMatrix,
    labels,
    knowledge,
    config: LogisticConfig | None = None,
) -> TrainedModel:
    """Logistic meta-learner over ``(s0, s1..sk)``, fitted like ``train_logistic``."""
    config = config or LogisticConfig()
    y = _binary_labels(labels)
    K = _knowledge_block(knowledge, features.n)
    Z = np.column_stack([predict(data_model, features, knowledge), K])
    theta, trace = _fit_logistic(Z, [(1.0, y)], config)
    knames = knowledge_names_for(K.shape[1])
    return TrainedModel(
        kind="meta_fusion",
        parameters=ModelParameters(theta, {"type": "logistic", "n_inputs": Z.shape[1]}, trace),
        input_schema=list(features.feature_names) + knames,
        uses_knowledge_input=True,
        knowledge_names=knames,
        config=asdict(config),
        seed=config.seed,
        components=[data_model],
    )


# --- inference ----------------------------------------------------------------------------------


def _design(model: TrainedModel, features: FeatureMatrix, knowledge) -> np.ndarray:
    base_schema = model.input_schema[: len(model.input_schema) - len(model.knowledge_names)]
    if list(features.feature_names) != base_schema:
        raise SchemaMismatchError(base_schema, features.feature_names)
    if model.kind in ("lr_k", "nn_k"):
        K = _knowledge_block(knowledge, features.n)
        if K.shape[1] != len(model.knowledge_names):
            raise SchemaMismatchError(model.knowledge_names, knowledge_names_for(K.shape[1]))
        return np.hstack([features.values, K])
    return features.values


def predict(model: TrainedModel, features: FeatureMatrix, knowledge=None) -> np.ndarray:
    """Deterministic probabilities; dropout is never applied here."""
    arch = model.parameters.architecture
    theta = model.parameters.theta
    if model.kind == "df_wa":
        _design(model, features, knowledge)
        K = _knowledge_block(knowledge, features.n)
        s0 = predict(model.components[0], features, knowledge)
        return np.clip(fuse_weighted_average([s0] + [K[:, j] for j in range(K.shape[1])], theta), 0.0, 1.0)
    if model.kind == "meta_fusion":
        _design(model, features, knowledge)
        K = _knowledge_block(knowledge, features.n)
        Z = np.column_stack([predict(model.components[0], features, knowledge), K])
        return sigmoid(_with_intercept(Z) @ theta)
    X = _design(model, features, knowledge)
    if arch["type"] == "logistic":
        return sigmoid(_with_intercept(X) @ theta)
    return sigmoid(network_logits(theta, arch["sizes"], X))


# --- serialization ------------------------------------------------------------------------------


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "kind": model.kind,
        "input_schema": list(model.input_schema),
        "uses_knowledge_input": model.uses_knowledge_input,
        "knowledge_names": list(model.knowledge_names),
        "architecture": model.parameters.architecture,
        "theta": [float(v) for v in model.parameters.theta],
        "loss_trace": [float(v) for v in model.parameters.loss_trace],
        "seed": model.seed,
        "config": model.config,
        "components": [model_to_dict(c) for c in model.components],
    }


def model_from_dict(doc: dict) -> TrainedModel:
    if doc["kind"] not in KINDS:
        raise ValueError(f"unknown model kind {doc['kind']!r}")
    return TrainedModel(
        kind=doc["kind"],
        parameters=ModelParameters(np.array(doc["theta"], dtype=float), dict(doc["architecture"]), list(doc["loss_trace"])),
        input_schema=list(doc["input_schema"]),
        uses_knowledge_input=bool(doc["uses_knowledge_input"]),
        knowledge_names=list(doc.get("knowledge_names", [])),
        config=dict(doc.get("config", {})),
        seed=int(doc.get("seed", 0)),
        components=[model_from_dict(c) for c in doc.get("components", [])],
    )


def save_model(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path: str | Path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
