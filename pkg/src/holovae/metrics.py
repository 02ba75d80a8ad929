"""Latent-space evaluation: classifiers, clustering scores, audits, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .exceptions import NumericError, ShapeError, ValidationError
from .model import HolographicVAE, LatentCode
from .so3 import Rotation
from .steerable import SteerableTensor, cosine_loss, mse, per_degree_mse

KNN_K = 5


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------


def knn_classify(train_x, train_y, test_x, k: int = KNN_K) -> np.ndarray:
    """Uniform-vote Euclidean k-NN; ties go to the smallest class."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if len(train_x) == 0:
        raise ValidationError("k-NN needs a nonempty training set")
    if not 1 <= k <= len(train_x):
        raise ValidationError(f"k = {k} must lie in 1..{len(train_x)}")
    classes, codes = np.unique(np.asarray(train_y), return_inverse=True)
    d2 = np.sum(test_x**2, axis=1)[:, None] - 2.0 * test_x @ train_x.T + np.sum(train_x**2, axis=1)[None, :]
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(test_x), len(classes)), dtype=int)
    np.add.at(votes, (np.repeat(np.arange(len(test_x)), k), codes[nn].ravel()), 1)
    return classes[np.argmax(votes, axis=1)]


class KNNClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, k=KNN_K):
        self.k = k

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.X_, self.y_ = X, y
        self.classes_ = np.unique(y)
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        return knn_classify(self.X_, self.y_, check_array(X, dtype=np.float64), self.k)


class LinearSoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """One-layer softmax model trained with Adam and plateau learning-rate decay."""

    def __init__(self, epochs=250, batch_size=100, lr=0.01, patience=10, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.seed = seed

    @staticmethod
    def _loss(W, b, X, onehot):
        logits = ad.einsum("nd,dk->nk", X, W) + b
        return ad.mean(ad.logsumexp(logits, axis=1) - ad.sum_(logits * onehot, axis=1))

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        K = len(self.classes_)
        if K == 1:
            warnings.warn("single-class training set; the classifier predicts a constant", RuntimeWarning)
            self.coef_ = np.zeros((X.shape[1], 1))
            self.intercept_ = np.zeros(1)
            return self
        if X_val is None:
            X_val, val_codes = X, codes
        else:
            X_val = check_array(X_val, dtype=np.float64)
            val_codes = np.searchsorted(self.classes_, np.asarray(y_val))
        rng = np.random.default_rng(self.seed)
        # convex objective: a zero start keeps training symmetric in the features
        params = {"W": np.zeros((X.shape[1], K)), "b": np.zeros(K)}
        state = ad.AdamState.zeros_like(params)
        eye = np.eye(K)
        lr, best, wait = self.lr, math.inf, 0
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for s in range(0, len(X), self.batch_size):
                idx = order[s : s + self.batch_size]
                tape = ad.Tape()
                W, b = tape.leaf(params["W"]), tape.leaf(params["b"])
                loss = self._loss(W, b, X[idx], eye[codes[idx]])
                g = tape.backward(loss)
                params, state = ad.adam_step(params, {"W": g[W], "b": g[b]}, state, lr)
            val = float(self._loss(params["W"], params["b"], X_val, eye[val_codes]))
            if not math.isfinite(val):
                raise NumericError("classifier loss diverged")
            if val < best - 1e-12:
                best, wait = val, 0
            else:
                wait += 1
                if wait >= self.patience:
                    lr, wait = lr / 10.0, 0
        self.coef_, self.intercept_ = params["W"], params["b"]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def linear_classify(train_x, train_y, test_x, **kwargs) -> np.ndarray:
    return LinearSoftmaxClassifier(**kwargs).fit(train_x, train_y).predict(test_x)


# ---------------------------------------------------------------------------
# clustering scores
# ---------------------------------------------------------------------------


def _contingency(clusters, labels):
    clusters = np.asarray(clusters)
    labels = np.asarray(labels)
    if clusters.shape != labels.shape or clusters.ndim != 1:
        raise ShapeError("cluster assignments and labels must be 1-D of equal length")
    if len(labels) == 0:
        raise ValidationError("empty input")
    _, ci = np.unique(clusters, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1)
    return table


def purity(clusters, labels) -> float:
    table = _contingency(clusters, labels)
    return float(table.max(axis=1).sum() / table.sum())


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def homogeneity_completeness_v(clusters, labels) -> tuple[float, float, float]:
    table = _contingency(clusters, labels)
    n = table.sum()
    h_class = _entropy(table.sum(axis=0))
    h_clust = _entropy(table.sum(axis=1))
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    h = 1.0 if h_class == 0 else mi / h_class
    c = 1.0 if h_clust == 0 else mi / h_clust
    v = 0.0 if h + c == 0 else 2 * h * c / (h + c)
    return h, c, v


def v_measure(clusters, labels) -> float:
    return homogeneity_completeness_v(clusters, labels)[2]


def kmeans_clusters(x, n_clusters: int, seed: int = 0) -> np.ndarray:
    return KMeans(n_clusters=n_clusters, n_init=10, random_state=seed).fit_predict(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# equivariance audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    invariant_drift: float
    frame_residual: float
    decode_residual: float
    tolerance: float
    n_trials: int

    @property
    def max_residual(self) -> float:
        return max(self.invariant_drift, self.frame_residual, self.decode_residual)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def equivariance_audit(model: HolographicVAE, x: SteerableTensor | None = None, n_trials: int = 10, tolerance: float = 1e-5,
                       seed: int = 0, cache=None) -> AuditReport:
    """Max residuals of encoder invariance, frame equivariance and decoder equivariance.

    Residuals are relative to the magnitude of the unrotated output. ``cache``
    overrides the model's CG table.
    """
    if cache is not None:
        model = model.copy()
        model.cache = cache
    rng = np.random.default_rng(seed)
    if x is None:
        x = SteerableTensor.random(model.config.signature, rng, (n_trials,)) * model.scale
    x = model._as_batch(x)
    inv = frm = dec = 0.0
    for t in range(n_trials):
        xi = x[t % len(x)]
        R = Rotation.random(rng)
        c0 = model.encode(xi)
        c1 = model.encode(xi.rotate(R))
        inv = max(inv, float(np.abs(c1.invariants - c0.invariants).max() / max(1.0, np.abs(c0.invariants).max())))
        frm = max(frm, float(np.abs(c1.frames - R.matrix @ c0.frames).max()))
        y0 = model.decode(c0)
        y1 = model.decode(LatentCode(c0.invariants, R.matrix @ c0.frames))
        dec = max(dec, float(np.abs(y1.data - y0.rotate(R).data).max() / max(1.0, np.abs(y0.data).max())))
    return AuditReport(inv, frm, dec, tolerance, n_trials)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def fold_of(sample_id: str, n_folds: int) -> int:
    """Stable fold assignment from the sample id."""
    return int.from_bytes(hashlib.sha256(str(sample_id).encode()).digest()[:8], "little") % n_folds


@dataclass
class EvalReport:
    n_samples: int
    cosine_mean: float
    cosine_sd: float
    mse: float
    per_degree_mse: dict
    knn_accuracy: float | None = None
    linear_accuracy: float | None = None
    purity: float | None = None
    v_measure: float | None = None
    equivariance: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.cosine_mean, self.cosine_sd, self.mse, *self.per_degree_mse.values()]
        vals += [v for v in (self.knn_accuracy, self.linear_accuracy, self.purity, self.v_measure) if v is not None]
        if not all(math.isfinite(v) for v in vals):
            raise NumericError("evaluation produced non-finite metrics")
        for name in ("purity", "v_measure"):
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1 + 1e-12:
                raise NumericError(f"{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_degree_mse"] = {str(k): v for k, v in self.per_degree_mse.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cross_validated_accuracy(emb, labels, ids, n_folds: int = 5, classifier: str = "knn") -> float:
    labels = np.asarray(labels)
    folds = np.array([fold_of(i, n_folds) for i in ids])
    pred = np.empty(len(labels), dtype=labels.dtype)
    for f in range(n_folds):
        test = folds == f
        if not test.any():
            continue
        train = ~test
        if classifier == "knn":
            pred[test] = knn_classify(emb[train], labels[train], emb[test], min(KNN_K, int(train.sum())))
        else:
            pred[test] = linear_classify(emb[train], labels[train], emb[test])
    return float(np.mean(pred == labels))


def evaluate(model: HolographicVAE, x: SteerableTensor, labels=None, ids=None, audit: bool = False, n_folds: int = 5,
             audit_trials: int = 10, seed: int = 0, linear: bool = True) -> tuple[EvalReport, LatentCode]:
    """Reconstruction metrics, plus classification and clustering when ``labels`` are given."""
    x = model._as_batch(x)
    if len(x) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    code = model.encode(x)
    rec = model.decode(code)
    cos = cosine_loss(x, rec)
    pd = {l: float(v.mean()) for l, v in per_degree_mse(x, rec).items()}
    report = EvalReport(len(x), float(cos.mean()), float(cos.std()), float(mse(x, rec).mean()), pd)
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(x):
            raise ShapeError(f"{len(labels)} labels for {len(x)} samples")
        ids = list(ids) if ids is not None else [str(i) for i in range(len(x))]
        emb = code.invariants
        report.knn_accuracy = cross_validated_accuracy(emb, labels, ids, n_folds, "knn")
        if linear:
            report.linear_accuracy = cross_validated_accuracy(emb, labels, ids, n_folds, "linear")
        k = len(np.unique(labels))
        clusters = kmeans_clusters(emb, min(k, len(x)), seed)
        report.purity = purity(clusters, labels)
        report.v_measure = v_measure(clusters, labels)
    if audit:
        report.equivariance = equivariance_audit(model, x, audit_trials, seed=seed).to_dict()
    report.__post_init__()
    return report, code


def write_embeddings_csv(path, code: LatentCode, ids=None, labels=None):
    n = len(code)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    z = code.invariants.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = ["id", "label"] + [f"z{i}" for i in range(z)]
        head += [f"e{j}_{a}" for j in (1, 2, 3) for a in "xyz"]
        w.writerow(head)
        for i in range(n):
            lab = "" if labels is None else str(labels[i])
            frame = code.frames[i].T.ravel()
            w.writerow([ids[i], lab] + [repr(float(v)) for v in code.invariants[i]] + [repr(float(v)) for v in frame])
