"""Downstream probes over fixed feature vectors.

Features are z-scored with train statistics.  Binary outcomes get an
(unregularized by default) logistic regression fitted by full-batch gradient
descent; regression outcomes get closed-form ridge with the penalty picked on
the validation split.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class FeatureMatrix:
    ids: list[str]
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.ids):
            raise ValueError("features must be an N x d matrix with one id per row")
        if not np.isfinite(self.X).all():
            raise ValueError("features contain non-finite entries")

    def subset(self, ids) -> "FeatureMatrix":
        pos = {a: i for i, a in enumerate(self.ids)}
        ids = list(ids)
        return FeatureMatrix(ids, self.X[[pos[a] for a in ids]] if ids else np.zeros((0, self.X.shape[1])))


@dataclass
class ProbeModel:
    kind: str
    weights: np.ndarray
    intercept: float
    lam: float | None = None
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    n_iter: int = 0
    grad_norm: float = 0.0
    val_mse: dict = field(default_factory=dict)


def zscore_stats(X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty train matrix")
    return X.mean(axis=0), X.std(axis=0)


def zscore_apply(X, mu, sd) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (X - mu) / safe, 0.0)


def zscore_fit_apply(train, *others):
    """Standardize ``train`` and every other matrix with train mean/SD.

    Returns ``(standardized_matrices, (mu, sd))``; zero-SD columns become 0.
    """
    mu, sd = zscore_stats(train)
    mats = [zscore_apply(train, mu, sd)] + [zscore_apply(o, mu, sd) for o in others]
    return mats, (mu, sd)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def logistic_loss_grad(w, b, X, y, l2=0.0):
    t = X @ w + b
    # log(1 + e^t) - y t, computed stably
    loss = np.mean(np.logaddexp(0.0, t) - y * t) + 0.5 * l2 * (w @ w)
    r = _sigmoid(t) - y
    gw = X.T @ r / len(y) + l2 * w
    gb = r.mean()
    return loss, gw, gb


def gd_logistic(X, y, *, step=1.0, max_iter=10_000, tol=1e-6, backtracking=True, l2=0.0,
                return_info=False):
    """Full-batch gradient descent on mean log-loss.

    With ``backtracking`` each iteration tries a Barzilai-Borwein step
    (``s.s / s.g_diff`` from the last move; twice the last accepted step
    when that is not positive) and halves it until the Armijo condition
    holds, so the loss decreases monotonically.  Stops when the gradient
    infinity-norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.zeros(X.shape[1])
    b = 0.0
    lr = step
    loss, gw, gb = logistic_loss_grad(w, b, X, y, l2)
    gnorm = max(np.abs(gw).max(initial=0.0), abs(gb))
    it = 0
    while it < max_iter and gnorm >= tol:
        it += 1
        if backtracking:
            g2 = gw @ gw + gb * gb
            while True:
                w_new, b_new = w - lr * gw, b - lr * gb
                loss_new, gw_new, gb_new = logistic_loss_grad(w_new, b_new, X, y, l2)
                if loss_new <= loss - 0.5 * lr * g2 or lr < 1e-12:
                    break
                lr *= 0.5
        else:
            w_new, b_new = w - lr * gw, b - lr * gb
            loss_new, gw_new, gb_new = logistic_loss_grad(w_new, b_new, X, y, l2)
        if backtracking:
            sw, sb = w_new - w, b_new - b
            yw, yb = gw_new - gw, gb_new - gb
            sy = sw @ yw + sb * yb
            lr = min((sw @ sw + sb * sb) / sy, 1e6) if sy > 0 else min(lr * 2.0, 1e6)
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
        gnorm = max(np.abs(gw).max(initial=0.0), abs(gb))
    if return_info:
        return w, b, it, gnorm
    return w, b


def fit_logistic(X, y, l2: float = 0.0, max_iter: int = 10_000, tol: float = 1e-6) -> ProbeModel:
    y = np.asarray(y, dtype=float)
    if len(np.unique(y)) < 2:
        raise ValueError("logistic probe needs both classes")
    w, b, it, gnorm = gd_logistic(X, y, max_iter=max_iter, tol=tol, l2=l2, return_info=True)
    if gnorm >= tol:
        log.info("logistic probe stopped at %d iterations, |grad|_inf=%.3g", it, gnorm)
    return ProbeModel("logistic", w, float(b), n_iter=it, grad_norm=float(gnorm))


def _ridge_solve(Xc, yc, lam):
    d = Xc.shape[1]
    A = Xc.T @ Xc + lam * np.eye(d)
    if lam == 0 and np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("singular normal equations")
    return np.linalg.solve(A, Xc.T @ yc)


def ridge_closed_form(X, y, lam):
    """Ridge with an unpenalized intercept via centered normal equations."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = X.mean(axis=0), y.mean()
    w = _ridge_solve(X - xm, y - ym, lam)
    return w, float(ym - xm @ w)


def fit_ridge(X, y, lambdas=DEFAULT_LAMBDAS, X_val=None, y_val=None) -> ProbeModel:
    """Fit ridge for each penalty and keep the one with lowest validation MSE.

    Without validation data the smallest penalty is used.  Ties go to the
    smaller penalty.  A singular unpenalized fit falls back to the smallest
    positive penalty in the grid.
    """
    lambdas = sorted(float(l) for l in lambdas)
    if not lambdas or lambdas[0] < 0:
        raise ValueError("lambda grid must be non-empty and non-negative")
    best = None
    scores = {}
    for lam in lambdas:
        try:
            w, b = ridge_closed_form(X, y, lam)
        except np.linalg.LinAlgError:
            pos = [l for l in lambdas if l > 0]
            if not pos:
                raise
            warnings.warn(f"ridge with lambda={lam} is singular; using lambda={pos[0]}")
            lam = pos[0]
            w, b = ridge_closed_form(X, y, lam)
        if X_val is None or len(y_val) == 0:
            return ProbeModel("ridge", w, b, lam=lam)
        mse = float(np.mean((np.asarray(X_val) @ w + b - np.asarray(y_val)) ** 2))
        scores[lam] = mse
        if best is None or mse < best[0]:
            best = (mse, lam, w, b)
    _, lam, w, b = best
    return ProbeModel("ridge", w, b, lam=lam, val_mse=scores)


def predict(model: ProbeModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.weights):
        raise ValueError(f"expected {len(model.weights)} features, got shape {X.shape}")
    t = X @ model.weights + model.intercept
    if model.kind == "logistic":
        return _sigmoid(t)
    return t


def read_features_csv(path) -> FeatureMatrix:
    """``admission_id,f0,...,f{d-1}`` with a header row."""
    ids, rows = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "admission_id":
            raise ValueError(f"{path}: first column must be admission_id")
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return FeatureMatrix(ids, np.array(rows).reshape(len(ids), len(header) - 1))


def write_features_csv(fm: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id"] + [f"f{j}" for j in range(fm.X.shape[1])])
        for a, row in zip(fm.ids, fm.X):
            w.writerow([a] + [repr(float(x)) for x in row])


def read_features_binary(path, ids_path) -> FeatureMatrix:
    """Column-major float64 matrix (``.npy``) plus a newline-separated id file."""
    X = np.load(path)
    with open(ids_path, encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if X.shape[0] != len(ids):
        X = X.T
    return FeatureMatrix(ids, np.asfortranarray(X))
