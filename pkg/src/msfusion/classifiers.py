"""Back-end classifiers and score fusion.

Sign convention: a positive decision value means "patient" (+1); a value of
exactly zero is resolved to "control" (-1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import kernels, nn
from .dsp import STREAM_ORDER

SVM_C_GRID = tuple(10.0 ** e for e in range(-2, 5))
SVM_GAMMA_GRID = tuple(10.0 ** e for e in range(-4, 2))


def predict_labels(decision) -> np.ndarray:
    return np.where(np.asarray(decision) > 0, 1, -1)


def _check_binary(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"features {X.shape} do not match {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    for cls in (-1, 1):
        if np.sum(y == cls) < 2:
            raise ValueError(f"need at least two samples of class {cls:+d}")
    return X, y.astype(np.float64)


@dataclass
class Standardizer:
    mean: np.ndarray = None
    scale: np.ndarray = None

    def fit(self, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} features, got {X.shape[-1]}")
        return (X - self.mean) / self.scale


def gaussian_kernel(A, B, gamma: float) -> np.ndarray:
    """exp(-gamma * |a - b|^2) for every row pair."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    return np.exp(-gamma * cdist(A, B, "sqeuclidean"))


# ---------------------------------------------------------------------------
# SVM
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    scaler: Standardizer
    platt_A: float | None = None
    platt_B: float | None = None
    n_iter: int = 0

    def decision(self, X) -> np.ndarray:
        return svm_score(self, X)

    def score(self, X) -> np.ndarray:
        """Severity-facing score: Platt probability when calibrated, else the decision."""
        d = self.decision(X)
        if self.platt_A is None:
            return d
        return platt_probability(d, self.platt_A, self.platt_B)


def svm_train(X, y, C: float = 1.0, gamma: float = 0.1, tol: float = 1e-3,
              standardize: bool = True) -> SvmModel:
    """Soft-margin SVM with a Gaussian kernel, trained by SMO.

    ``X`` is z-scored with its own statistics unless ``standardize`` is false.
    """
    X, yf = _check_binary(X, y)
    scaler = Standardizer().fit(X) if standardize else Standardizer(np.zeros(X.shape[1]), np.ones(X.shape[1]))
    Z = scaler.transform(X)
    K = gaussian_kernel(Z, Z, gamma)
    alpha, b, n_iter = kernels.smo_solve(K, yf, C, tol=tol)
    sv = alpha > 0
    return SvmModel(Z[sv].copy(), (alpha * yf)[sv], float(b), float(gamma), float(C), scaler, n_iter=n_iter)


def svm_score(model: SvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Z = model.scaler.transform(np.atleast_2d(X))
    d = gaussian_kernel(Z, model.support_vectors, model.gamma) @ model.dual_coef + model.bias
    return float(d[0]) if single else d


def svm_alphas(model: SvmModel) -> np.ndarray:
    return np.abs(model.dual_coef)


# ---------------------------------------------------------------------------
# Platt scaling
# ---------------------------------------------------------------------------

def platt_probability(scores, A: float, B: float):
    """P(y = +1 | s) = 1 / (1 + exp(A s + B)), evaluated without overflow."""
    f = np.asarray(scores, dtype=np.float64) * A + B
    out = np.where(f >= 0, np.exp(-np.abs(f)) / (1.0 + np.exp(-np.abs(f))), 1.0 / (1.0 + np.exp(-np.abs(f))))
    return float(out) if out.ndim == 0 else out


def platt_calibrate(scores, labels, max_iter: int = 100, min_step: float = 1e-10,
                    sigma: float = 1e-12):
    """Fit Platt's sigmoid by Newton's method with backtracking.

    Targets are the prior-regularised values (N+ + 1)/(N+ + 2) and
    1/(N- + 2), as in Lin, Lin and Weng's note on Platt's method.
    Returns ``(A, B)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos, n_neg = int(np.sum(y > 0)), int(np.sum(y <= 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("Platt scaling needs both classes")
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    A, B = 0.0, np.log((n_neg + 1.0) / (n_pos + 1.0))

    def objective(A, B):
        f = s * A + B
        return float(np.sum(np.where(f >= 0, t * f + np.log1p(np.exp(-f)), (t - 1) * f + np.log1p(np.exp(f)))))

    fval = objective(A, B)
    for _ in range(max_iter):
        p = platt_probability(s, A, B)
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.sum(s * s * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(s * d2)
        d1 = t - p
        g1, g2 = np.sum(s * d1), np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            break
    return float(A), float(B)


def log_loss(probabilities, labels) -> float:
    p = np.clip(np.asarray(probabilities, dtype=np.float64), 1e-15, 1 - 1e-15)
    y = np.asarray(labels) > 0
    return float(-np.mean(np.where(y, np.log(p), np.log1p(-p))))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpConfig:
    hidden: tuple = (128, 64)
    dropout: float = 0.3
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 20
    seed: int = 0


@dataclass
class MlpModel:
    graph: nn.ModelGraph
    scaler: Standardizer
    config: MlpConfig = field(default_factory=MlpConfig)
    epochs_trained: int = 0

    def probabilities(self, X) -> np.ndarray:
        Z = self.scaler.transform(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return nn.softmax(self.graph.forward({"x": Z})[self.graph.outputs[0]])

    def score(self, X):
        return mlp_score(self, X)

    def decision(self, X):
        p = mlp_score(self, X)
        return p - 0.5


def build_mlp(n_features: int, config: MlpConfig) -> nn.ModelGraph:
    rng = np.random.default_rng(config.seed)
    layers, fan_in = [], n_features
    for width in config.hidden:
        layers += [nn.Dense(fan_in, width, rng=rng, dtype=np.float64), nn.ReLU(),
                   nn.Dropout(config.dropout, rng=np.random.default_rng(config.seed + width))]
        fan_in = width
    layers.append(nn.Dense(fan_in, 2, rng=rng, dtype=np.float64, zero_init=True))
    return nn.sequential(layers, "x", (1, n_features))


def mlp_train(X, y, config: MlpConfig | None = None, valid=None) -> MlpModel:
    """Cross-entropy training with Adam.

    With ``valid=(Xv, yv)`` the parameters of the epoch with the best
    validation accuracy are kept (ties go to the earlier epoch) and training
    stops after ``patience`` epochs without improvement.
    """
    config = config or MlpConfig()
    X, yf = _check_binary(X, y)
    scaler = Standardizer().fit(X)
    Z = scaler.transform(X)
    target = (yf > 0).astype(int)
    graph = build_mlp(X.shape[1], config)
    out_name = graph.outputs[0]
    state = nn.AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed + 7)
    model = MlpModel(graph, scaler, config)
    best_acc, best_params, best_epoch, stale = -1.0, graph.copy_parameters(), 0, 0
    params = graph.parameters()
    with graph.lock:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(Z))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                logits = graph.forward({"x": Z[idx]}, train=True)[out_name]
                _, g = nn.softmax_cross_entropy(logits, target[idx])
                graph.backward({out_name: g})
                nn.adam_step(state, params, graph.gradients())
            if valid is None:
                best_epoch = epoch
                continue
            acc = float(np.mean(predict_labels(model.decision(valid[0])) == np.asarray(valid[1])))
            if acc > best_acc:
                best_acc, best_params, best_epoch, stale = acc, graph.copy_parameters(), epoch, 0
            else:
                stale += 1
                if stale > config.patience:
                    break
        if valid is not None:
            graph.set_parameters(best_params)
    model.epochs_trained = best_epoch
    return model


def mlp_score(model: MlpModel, x):
    """Softmax probability of the positive (patient) class."""
    x = np.asarray(x, dtype=np.float64)
    p = model.probabilities(x)[:, 1]
    return float(p[0]) if x.ndim == 1 else p


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _ordered_streams(streams: dict) -> list:
    unknown = [k for k in streams if k not in STREAM_ORDER]
    if unknown:
        raise ValueError(f"unknown streams {unknown}")
    return [k for k in STREAM_ORDER if k in streams]


def early_fuse(streams) -> np.ndarray:
    """Concatenate per-representation features in wideband, narrowband, wavelet order.

    ``streams`` is a dict keyed by representation name (or a list already in
    that order). Works on single vectors and on (N, D) matrices.
    """
    if isinstance(streams, dict):
        names = _ordered_streams(streams)
        parts = [streams[n] for n in names]
    else:
        parts = list(streams)
    if not parts:
        raise ValueError("no streams to fuse")
    if any(p is None for p in parts):
        raise ValueError("missing stream")
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if len({p.ndim for p in parts}) != 1 or (parts[0].ndim == 2 and len({p.shape[0] for p in parts}) != 1):
        raise ValueError("streams disagree on sample count")
    return np.concatenate(parts, axis=-1)


@dataclass
class FusionWeights:
    """Linear weights over per-stream scores that were z-scored with ``scaler``."""

    weights: np.ndarray
    bias: float
    streams: list = field(default_factory=list)
    scaler: Standardizer = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.scaler is None:
            n = self.weights.shape[0]
            self.scaler = Standardizer(np.zeros(n), np.ones(n))
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValueError("fusion weights must be finite")
        if not np.any(self.weights != 0):
            raise ValueError("fusion needs at least one nonzero weight")


def learn_fusion_weights(train_scores, labels, lr: float = 1e-2, epochs: int = 100,
                         l2: float = 1e-3, seed: int = 0) -> FusionWeights:
    """Linear hinge-loss model over per-stream scores, fitted by SGD.

    ``train_scores`` is (N, S) or a dict of per-stream score vectors. Each
    stream is z-scored first, so rescaling every score by a common positive
    factor leaves the fitted decision unchanged.
    """
    streams = []
    if isinstance(train_scores, dict):
        streams = _ordered_streams(train_scores)
        S = np.column_stack([np.asarray(train_scores[n], dtype=np.float64) for n in streams])
    else:
        S = np.asarray(train_scores, dtype=np.float64)
        if S.ndim == 1:
            S = S[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if S.shape[0] != y.shape[0]:
        raise ValueError("one score per training sample is required in every stream")
    if not np.all(np.isfinite(S)):
        raise ValueError("scores contain non-finite values")
    if np.all(S == S[0]):
        raise ValueError("all scores are equal; fusion weights are undetermined")
    scaler = Standardizer().fit(S)
    rng = np.random.default_rng(seed)
    order = np.stack([rng.permutation(len(y)) for _ in range(epochs)])
    w, b = kernels.hinge_sgd(scaler.transform(S), y, order, lr, l2)
    return FusionWeights(w, float(b), streams, scaler)


def late_fuse(weights: FusionWeights, scores):
    """Fused score w.s + bias; ``scores`` is (S,), (N, S) or a dict of streams."""
    if isinstance(scores, dict):
        names = weights.streams or _ordered_streams(scores)
        S = np.column_stack([np.atleast_1d(np.asarray(scores[n], dtype=np.float64)) for n in names])
        out = weights.scaler.transform(S) @ weights.weights + weights.bias
        return float(out[0]) if out.size == 1 else out
    S = np.asarray(scores, dtype=np.float64)
    out = weights.scaler.transform(S) @ weights.weights + weights.bias
    return float(out) if np.ndim(out) == 0 else out
