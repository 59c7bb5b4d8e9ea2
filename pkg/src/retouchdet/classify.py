"""RBF-kernel SVM trained with SMO, Platt-calibrated to scores in [0, 1].

Labels are -1 for bona fide and +1 for retouched, so larger decision values
and scores mean "more likely retouched".
"""

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (KindMismatch, LengthMismatch, SchemaViolation,
                     SingleClass, VersionMismatch)
from .pipeline import KIND_LENGTHS, Normalizer

MODEL_VERSION = 1
BONA_FIDE, RETOUCHED = -1, 1
TAU = 1e-12


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    gamma: Optional[float] = None  # None means 1 / n_features
    kkt_tolerance: float = 1e-3
    max_iter: Optional[int] = None  # None means max(100000, 100 * n)
    seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def resolved_gamma(self, n_features):
        return self.gamma if self.gamma is not None else 1.0 / n_features


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    kind: Optional[str] = None
    platt_a: Optional[float] = None
    platt_b: Optional[float] = None
    normalizer: Optional[Normalizer] = None
    converged: bool = True
    n_iter: int = field(default=0, compare=False)

    @property
    def n_features(self):
        return self.support_vectors.shape[1]


def rbf_kernel(x, y, gamma) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"vectors of length {x.size} and {y.size}")
    d = x - y
    return math.exp(-gamma * float(d @ d))


def rbf_matrix(a, b, gamma):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


class _KernelRows:
    """Kernel rows computed on demand; the full matrix when it fits."""

    def __init__(self, x, gamma, full_limit=6000):
        self.x = x
        self.gamma = gamma
        self.full = rbf_matrix(x, x, gamma) if len(x) <= full_limit else None
        self._rows = {}
        self.diag = np.ones(len(x))

    def row(self, i):
        if self.full is not None:
            return self.full[i]
        r = self._rows.get(i)
        if r is None:
            if len(self._rows) > 2000:
                self._rows.pop(next(iter(self._rows)))
            r = rbf_matrix(self.x[i], self.x, self.gamma)[0]
            self._rows[i] = r
        return r


def _as_labels(y):
    y = np.asarray(y)
    labels = np.where(y > 0, 1.0, -1.0)
    if len(np.unique(labels)) < 2:
        raise SingleClass("training data must contain both classes")
    return labels


def solve_dual(x, y, C, gamma, tol=1e-3, max_iter=None):
    """SMO with second-order working-set selection.

    Solves min 1/2 a'Qa - e'a s.t. 0 <= a <= C, y'a = 0 with Q = yy' * K.
    Returns (alpha, bias, converged, iterations).
    """
    n = len(y)
    kern = _KernelRows(x, gamma)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    if max_iter is None:
        max_iter = max(100000, 100 * n)
    converged = False
    it = 0
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        m_val = score[i]
        min_low = score[low].min()
        if m_val - min_low < tol:
            converged = True
            break
        ki = kern.row(i)
        cand = low & (score < m_val)
        idx = np.flatnonzero(cand)
        b = m_val - score[idx]
        a = kern.diag[i] + kern.diag[idx] - 2.0 * ki[idx]
        a = np.where(a > 0, a, TAU)
        j = int(idx[np.argmin(-(b * b) / a)])
        kj = kern.row(j)

        old_i, old_j = alpha[i], alpha[j]
        quad = max(kern.diag[i] + kern.diag[j] - 2.0 * ki[j], TAU)
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / quad
            diff = old_i - old_j
            ai, aj = old_i + delta, old_j + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = old_i + old_j
            ai, aj = old_i - delta, old_j + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        grad += y * (y[i] * ki * (ai - old_i) + y[j] * kj * (aj - old_j))
        it += 1

    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(score[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = score[up].max() if up.any() else score[low].min()
        lo = score[low].min() if low.any() else hi
        bias = float((hi + lo) / 2)
    return alpha, bias, converged, it


def train_svm(features, labels, config: SvmConfig = SvmConfig(), kind=None) -> SvmModel:
    """Train on already-normalized features (rows) with labels in {-1, +1}."""
    x = np.asarray(features, dtype=float)
    y = _as_labels(labels)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise LengthMismatch(f"{x.shape[0]} feature rows for {y.size} labels")
    gamma = config.resolved_gamma(x.shape[1])
    # fixed-seed shuffle decides tie-breaking in working-set selection
    perm = np.random.default_rng(config.seed).permutation(len(y))
    alpha_p, bias, converged, it = solve_dual(x[perm], y[perm], config.C, gamma,
                                              config.kkt_tolerance, config.max_iter)
    alpha = np.empty_like(alpha_p)
    alpha[perm] = alpha_p
    if not converged:
        warnings.warn(f"SMO stopped after {it} iterations without meeting the KKT tolerance",
                      RuntimeWarning, stacklevel=2)
    sv = np.flatnonzero(alpha > 1e-12)
    return SvmModel(support_vectors=x[sv].copy(), dual_coefs=alpha[sv] * y[sv], bias=bias,
                    gamma=gamma, C=config.C, kind=kind, converged=converged, n_iter=it)


def decision_values(model: SvmModel, features):
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if model.support_vectors.shape[0] == 0:
        return np.full(x.shape[0], model.bias)
    if x.shape[1] != model.n_features:
        raise LengthMismatch(f"model expects {model.n_features} values, got {x.shape[1]}")
    # row by row with exact differences, so a value never depends on the batch it came in
    out = np.empty(x.shape[0])
    for r, row in enumerate(x):
        d = model.support_vectors - row
        k = np.exp(-model.gamma * np.einsum("ij,ij->i", d, d))
        out[r] = float(np.dot(k, model.dual_coefs)) + model.bias
    return out


def decision_value(model: SvmModel, f) -> float:
    kind = getattr(f, "kind", None)
    if kind is not None and model.kind is not None and kind != model.kind:
        raise KindMismatch(f"model trained on {model.kind}, got {kind}")
    values = getattr(f, "values", f)
    return float(decision_values(model, values)[0])


def sigmoid_score(d, a, b):
    """1 / (1 + exp(a*d + b)), evaluated without overflow."""
    z = a * np.asarray(d, dtype=float) + b
    out = np.empty_like(z)
    pos = z >= 0
    ez = np.exp(-z[pos])
    out[pos] = ez / (1.0 + ez)
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out


def platt_targets(labels):
    y = np.asarray(labels)
    n_pos = int((y > 0).sum())
    n_neg = int((y <= 0).sum())
    return np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))


def fit_platt(decisions, labels, max_iter=100, min_step=1e-10, sigma=1e-12, eps=1e-5):
    """Newton's method with backtracking on the regularized Platt likelihood.

    Returns (A, B) for P(retouched | d) = 1 / (1 + exp(A d + B)).
    """
    f = np.asarray(decisions, dtype=float)
    y = np.asarray(labels)
    n_pos = int((y > 0).sum())
    n_neg = int((y <= 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("calibration data must contain both classes")
    t = platt_targets(y)

    def objective(a, b):
        z = f * a + b
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)),
                                     (t - 1) * z + np.log1p(np.exp(z)))))

    a, b = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = objective(a, b)
    for _ in range(max_iter):
        p = sigmoid_score(f, a, b)
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + float(np.sum(f * f * d2))
        h22 = sigma + float(np.sum(d2))
        h21 = float(np.sum(f * d2))
        d1 = t - p
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2.0
        else:
            break
    return a, b


def calibrate_platt(model: SvmModel, features, labels) -> SvmModel:
    """Fit the sigmoid on decision values of (normalized) ``features``."""
    a, b = fit_platt(decision_values(model, features), labels)
    return replace(model, platt_a=a, platt_b=b)


def predict_scores(model: SvmModel, raw_features):
    """Raw features (rows) -> normalizer -> decision value -> Platt sigmoid."""
    x = np.atleast_2d(np.asarray(raw_features, dtype=float))
    if model.kind is not None and x.shape[1] != KIND_LENGTHS[model.kind]:
        raise LengthMismatch(f"{model.kind} needs {KIND_LENGTHS[model.kind]} values, got {x.shape[1]}")
    if model.normalizer is not None:
        x = model.normalizer.transform(x)
    d = decision_values(model, x)
    if model.platt_a is None:
        raise SchemaViolation("model has no Platt calibration")
    return sigmoid_score(d, model.platt_a, model.platt_b)


def predict_score(model: SvmModel, raw_feature) -> float:
    kind = getattr(raw_feature, "kind", None)
    if kind is not None and model.kind is not None and kind != model.kind:
        raise KindMismatch(f"model trained on {model.kind}, got {kind}")
    return float(predict_scores(model, getattr(raw_feature, "values", raw_feature))[0])


def fit_detector(raw_features, labels, kind, config: SvmConfig = SvmConfig()) -> SvmModel:
    """Normalizer fit, SVM training and Platt calibration on the same training set."""
    from .pipeline import fit_normalizer

    raw = np.asarray(raw_features, dtype=float)
    norm = fit_normalizer(raw)
    x = norm.transform(raw)
    model = train_svm(x, labels, config, kind=kind)
    model = calibrate_platt(model, x, labels)
    return replace(model, normalizer=norm)


# serialization

def _num(v):
    v = float(v)
    if not math.isfinite(v):
        raise SchemaViolation("cannot serialize non-finite number")
    return format(v, ".17g")


def _dump(obj):
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_dump(v)}" for k, v in obj.items()) + "}"
    raise TypeError(f"cannot serialize {type(obj)}")


def model_to_dict(model: SvmModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "kind": model.kind,
        "gamma": model.gamma,
        "C": model.C,
        "bias": model.bias,
        "platt_a": model.platt_a,
        "platt_b": model.platt_b,
        "normalizer": None if model.normalizer is None else {
            "mean": model.normalizer.mean, "std": model.normalizer.std},
        "support_vectors": model.support_vectors,
        "dual_coefs": model.dual_coefs,
        "converged": model.converged,
    }


def save_model(model: SvmModel, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_dump(model_to_dict(model)) + "\n")


def load_model(path) -> SvmModel:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"cannot read model file {path}: {exc}") from None
    if not isinstance(data, dict) or "version" not in data:
        raise SchemaViolation("model file lacks a version tag")
    if data["version"] != MODEL_VERSION:
        raise VersionMismatch(f"model version {data['version']!r}, expected {MODEL_VERSION}")
    try:
        sv = np.array(data["support_vectors"], dtype=float)
        coefs = np.array(data["dual_coefs"], dtype=float)
        n_features = len(data["normalizer"]["mean"]) if data.get("normalizer") else None
        if sv.size == 0:
            sv = sv.reshape(0, n_features or 0)
        if sv.ndim != 2 or coefs.shape != (sv.shape[0],):
            raise SchemaViolation("support vectors and dual coefficients disagree")
        norm = None
        if data.get("normalizer"):
            norm = Normalizer(np.array(data["normalizer"]["mean"], dtype=float),
                              np.array(data["normalizer"]["std"], dtype=float))
        kind = data["kind"]
        if kind is not None and kind not in KIND_LENGTHS:
            raise SchemaViolation(f"unknown kind {kind!r}")
        return SvmModel(support_vectors=sv, dual_coefs=coefs, bias=float(data["bias"]),
                        gamma=float(data["gamma"]), C=float(data["C"]), kind=kind,
                        platt_a=None if data["platt_a"] is None else float(data["platt_a"]),
                        platt_b=None if data["platt_b"] is None else float(data["platt_b"]),
                        normalizer=norm, converged=bool(data.get("converged", True)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaViolation):
            raise
        raise SchemaViolation(f"malformed model file: {exc!r}") from None
