"""Linear probing of frozen embeddings with nested k-fold cross-validation.

Both solvers work in the row space of the (centred) design matrix: an l2
penalty keeps the optimum there, so wide embedding matrices cost no more than
an N-column problem.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .encoder import encoder_forward
from .trainer import encoder_from_checkpoint

GRID = tuple(10.0**k for k in range(-6, 7))
N_FOLDS = 5
MAX_NEWTON_ITER = 1000
GRAD_TOL = 1e-6


class ProbeError(ValueError):
    pass


class SingularDesignError(ProbeError):
    pass


class SingleClassError(ProbeError):
    pass


class UndefinedVarianceError(ProbeError):
    pass


class FoldConstructionError(ProbeError):
    pass


class TaskKind(enum.Enum):
    REGRESSION = "reg"
    CLASSIFICATION = "clf"


@dataclass
class ProbeTask:
    kind: TaskKind
    embeddings: np.ndarray
    targets: np.ndarray
    class_count: int | None = None

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ProbeError(f"embeddings must be N x D, got shape {self.embeddings.shape}")
        n = len(self.embeddings)
        if n < 2 * N_FOLDS:
            raise ProbeError(f"need at least {2 * N_FOLDS} rows for nested {N_FOLDS}-fold CV, got {n}")
        t = np.asarray(self.targets)
        if t.shape != (n,):
            raise ProbeError(f"targets must have shape ({n},), got {t.shape}")
        if self.kind is TaskKind.CLASSIFICATION:
            if not np.all(t == np.round(t)):
                raise ProbeError("class labels must be integers")
            t = t.astype(np.int64)
            k = int(t.max()) + 1 if self.class_count is None else self.class_count
            if t.min() < 0 or set(np.unique(t)) != set(range(k)):
                raise ProbeError(f"class labels must be exactly 0..{k - 1}")
            self.class_count = k
        else:
            t = t.astype(np.float64)
        self.targets = t


# -- solvers -----------------------------------------------------------------

def _row_space(Xc: np.ndarray, tol: float = 1e-10):
    """Orthonormal basis V of the row space, so that Xc = (Xc V) V^T."""
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    keep = s > tol * max(s[0], 1e-300) if s.size else s.astype(bool)
    return vt[keep].T


def ridge_fit(X, y, alpha: float) -> tuple[np.ndarray, float]:
    """Minimise ||Xw + b - y||^2 + alpha ||w||^2 with the intercept unpenalised."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ProbeError(f"X must be N x D with D >= 1, got shape {X.shape}")
    if alpha < 0:
        raise ProbeError(f"alpha must be >= 0, got {alpha}")
    mx, my = X.mean(axis=0), y.mean()
    Xc, yc = X - mx, y - my
    if alpha == 0:
        if np.linalg.matrix_rank(Xc) < X.shape[1]:
            raise SingularDesignError("design matrix is rank deficient and alpha = 0")
        w = np.linalg.solve(Xc.T @ Xc, Xc.T @ yc)
    elif X.shape[1] > X.shape[0]:
        # dual form: w = Xc^T (Xc Xc^T + alpha I)^-1 yc
        K = Xc @ Xc.T
        w = Xc.T @ np.linalg.solve(K + alpha * np.eye(len(K)), yc)
    else:
        w = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(X.shape[1]), Xc.T @ yc)
    return w, float(my - mx @ w)


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_objective(X, y, w, b, C) -> float:
    """Mean log-loss + ||w||^2 / (2 C N)."""
    z = X @ w + b
    n = len(y)
    return float(np.mean(_log1pexp(z) - y * z) + w @ w / (2.0 * C * n))


def _binary_logistic(Z, y, C) -> tuple[np.ndarray, float, int, float]:
    n, d = Z.shape
    theta = np.zeros(d + 1)
    # Intercept starts at the log-odds of the prior.
    prior = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    theta[-1] = np.log(prior / (1 - prior))
    A = np.hstack([Z, np.ones((n, 1))])
    reg = np.full(d + 1, 1.0 / (C * n))
    reg[-1] = 0.0

    def f(t):
        z = A @ t
        return np.mean(_log1pexp(z) - y * z) + 0.5 * np.sum(reg * t * t)

    fval = f(theta)
    updates, gnorm = 0, np.inf
    while updates < MAX_NEWTON_ITER:
        p = _sigmoid(A @ theta)
        g = A.T @ (p - y) / n + reg * theta
        gnorm = float(np.linalg.norm(g))
        if gnorm < GRAD_TOL:
            break
        s = p * (1 - p)
        H = (A.T * s) @ A / n + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # backtracking on the objective keeps the iteration monotone
        t = 1.0
        while True:
            cand = theta - t * step
            fc = f(cand)
            if fc <= fval - 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        if fc > fval:
            break  # no descent left at machine precision
        theta, fval = cand, fc
        updates += 1
    return theta[:-1], float(theta[-1]), updates, gnorm


@dataclass
class LogisticModel:
    """One-vs-rest weights; a two-class problem is a single binary model."""

    W: np.ndarray  # D x K' (K' = 1 for binary)
    b: np.ndarray
    class_count: int
    iterations: list[int] = field(default_factory=list)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict_scores(self, X) -> np.ndarray:
        """N x K class scores (per-class positive probabilities)."""
        p = _sigmoid(self.decision(X))
        if self.class_count == 2:
            return np.hstack([1 - p, p])
        return p

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_scores(X), axis=1)


def logistic_fit(X, y, C: float, class_count: int | None = None) -> LogisticModel:
    """l2-penalised logistic regression, damped Newton, one-vs-rest for K > 2."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if C <= 0:
        raise ProbeError(f"C must be > 0, got {C}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassError(f"need at least two classes, got {classes.tolist()}")
    k = class_count or int(y.max()) + 1
    mx = X.mean(axis=0)
    Xc = X - mx
    V = _row_space(Xc)
    Z = Xc @ V
    targets = [1] if k == 2 else range(k)
    W, B, its = [], [], []
    for c in targets:
        beta, b, it, _ = _binary_logistic(Z, (y == c).astype(np.float64), C)
        w = V @ beta
        W.append(w)
        B.append(b - mx @ w)
        its.append(it)
    return LogisticModel(np.stack(W, axis=1), np.array(B), k, its)


# -- metrics -----------------------------------------------------------------

def binary_auc(y_true, scores) -> float:
    """Mann-Whitney AUC with average ranks, so tied scores count one half."""
    y = np.asarray(y_true).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both positive and negative examples")
    r = rankdata(scores)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(y_true, scores) -> float:
    y = np.asarray(y_true)
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim == 1:
        return binary_auc(y == 1, S)
    return float(np.mean([binary_auc(y == c, S[:, c]) for c in range(S.shape[1])]))


def macro_f1(y_true, y_pred, class_count: int) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    f1 = []
    for c in range(class_count):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1))


def metrics(kind, y_true, y_pred_or_scores) -> dict[str, float]:
    kind = TaskKind(kind)
    y_true = np.asarray(y_true)
    pred = np.asarray(y_pred_or_scores, dtype=np.float64)
    if len(y_true) != len(pred):
        raise ProbeError(f"length mismatch: {len(y_true)} targets vs {len(pred)} predictions")
    if kind is TaskKind.REGRESSION:
        resid = y_true - pred
        sst = float(np.sum((y_true - y_true.mean()) ** 2))
        if sst == 0:
            raise UndefinedVarianceError("targets have zero variance; R^2 is undefined")
        return {"mae": float(np.mean(np.abs(resid))), "r2": 1.0 - float(resid @ resid) / sst}
    if pred.ndim == 1:
        pred = np.stack([1 - pred, pred], axis=1)
    labels = np.argmax(pred, axis=1)
    return {
        "auc": macro_auc(y_true, pred),
        "f1": macro_f1(y_true, labels, pred.shape[1]),
        "accuracy": float(np.mean(labels == y_true)),
    }


# -- cross-validation --------------------------------------------------------

def kfold_indices(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [np.sort(f) for f in np.array_split(rng.permutation(n), k)]


def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within each class, then deal round-robin so class shares match."""
    y = np.asarray(y)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        if len(idx) < k:
            raise FoldConstructionError(f"class {c} has {len(idx)} examples, fewer than {k} folds")
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(i)
        offset += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def _make_folds(task_kind, y, k, rng):
    if task_kind is TaskKind.CLASSIFICATION:
        return stratified_folds(y, k, rng)
    return kfold_indices(len(y), k, rng)


class Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.scale


@dataclass
class FitRecord:
    outer_fold: int
    stage: str  # "inner" or "refit"
    train_rows: np.ndarray


FitCallback = Callable[[FitRecord], None]


@dataclass
class ProbeResult:
    kind: TaskKind
    fold_metrics: list[dict[str, float]]
    selected: list[float]
    outer_test_rows: list[np.ndarray]
    fit_log: list[FitRecord] = field(default_factory=list)

    @property
    def metric_names(self) -> list[str]:
        return list(self.fold_metrics[0])

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([f[m] for f in self.fold_metrics])) for m in self.metric_names}

    @property
    def std(self) -> dict[str, float]:
        return {m: float(np.std([f[m] for f in self.fold_metrics])) for m in self.metric_names}

    def leaked_fits(self) -> int:
        """Fits for outer fold i whose training rows intersect outer-test fold i."""
        return sum(
            bool(np.intersect1d(r.train_rows, self.outer_test_rows[r.outer_fold]).size)
            for r in self.fit_log
        )

    def records(self) -> list[dict]:
        out = [
            {"fold": i, "selected": s, **m}
            for i, (m, s) in enumerate(zip(self.fold_metrics, self.selected))
        ]
        out.append({"fold": "mean", **self.mean})
        out.append({"fold": "std", **self.std})
        return out


def _fit_predict(kind, Xtr, ytr, Xte, reg, class_count):
    if kind is TaskKind.REGRESSION:
        w, b = ridge_fit(Xtr, ytr, reg)
        return Xte @ w + b
    return logistic_fit(Xtr, ytr, reg, class_count).predict_scores(Xte)


def _score(kind, y, pred) -> float:
    """Selection score, higher is better."""
    if kind is TaskKind.REGRESSION:
        return -float(np.mean(np.abs(y - pred)))
    return macro_auc(y, pred)


def _strongest_first(kind, grid):
    # ridge: large alpha is strong; logistic: small C is strong
    return sorted(grid, reverse=kind is TaskKind.REGRESSION)


def nested_cv_evaluate(task: ProbeTask, seed: int = 0, grid: Sequence[float] = GRID,
                       folds: int = N_FOLDS, fit_callback: FitCallback | None = None) -> ProbeResult:
    """Outer folds estimate performance; inner folds on each outer-train split pick alpha or C.

    Features are standardised with statistics from the rows being fit only.
    Grid ties go to the strongest regularisation.
    """
    kind, X, y = task.kind, task.embeddings, task.targets
    rng = np.random.default_rng(seed)
    outer = _make_folds(kind, y, folds, rng)
    order = _strongest_first(kind, grid)
    result = ProbeResult(kind, [], [], outer)

    def record(rec: FitRecord):
        result.fit_log.append(rec)
        if fit_callback is not None:
            fit_callback(rec)

    for i, test in enumerate(outer):
        train = np.setdiff1d(np.arange(len(y)), test)
        inner = _make_folds(kind, y[train], folds, rng)
        scores = np.zeros(len(order))
        for j, itest in enumerate(inner):
            itrain = np.setdiff1d(np.arange(len(train)), itest)
            rows_tr, rows_te = train[itrain], train[itest]
            record(FitRecord(i, "inner", rows_tr))
            std = Standardizer(X[rows_tr])
            Xtr, Xte = std(X[rows_tr]), std(X[rows_te])
            for g, reg in enumerate(order):
                pred = _fit_predict(kind, Xtr, y[rows_tr], Xte, reg, task.class_count)
                scores[g] += _score(kind, y[rows_te], pred) / len(inner)
        best = order[int(np.flatnonzero(scores >= scores.max() - 1e-12)[0])]
        record(FitRecord(i, "refit", train))
        std = Standardizer(X[train])
        pred = _fit_predict(kind, std(X[train]), y[train], std(X[test]), best, task.class_count)
        result.fold_metrics.append(metrics(kind, y[test], pred))
        result.selected.append(best)
    return result


def extract_embeddings(encoder_ckpt, segments, branch: str = "ppg", batch_size: int = 256) -> np.ndarray:
    """Frozen encoder outputs (pre-projection) in eval mode, one row per segment."""
    enc = encoder_from_checkpoint(encoder_ckpt, branch)
    enc.eval()
    X = np.asarray(segments, dtype=np.float32)
    if len(X) == 0:
        return np.zeros((0, enc.out_dim), dtype=np.float32)
    with torch.no_grad():
        rows = [encoder_forward(enc, X[s:s + batch_size]).numpy() for s in range(0, len(X), batch_size)]
    return np.concatenate(rows)
