"""Ablation readouts: per-context linear regression on either the
selection-layer features or the full concatenated encoder representations.

Regression fits the first k-1 (feature, label) pairs of a context and
predicts the final example; the minimum-norm least-squares solution is used
since contexts are usually underdetermined (9 rows, hundreds of columns).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

SVD_RCOND = 1e-10


class RegressionMode(Enum):
    SELECTION = "selection+regression"
    FULL = "regression"


def fit_minnorm(X, y, ridge=0.0):
    """Minimum-norm least squares on the centered system.

    Returns (weights, intercept); intercept matches the means. Singular
    values below SVD_RCOND * sigma_max are truncated. f64 throughout.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"bad shapes X{X.shape}, y{y.shape}")
    if X.shape[0] < 1:
        raise ValueError("need at least one row")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    if ridge > 0.0:
        d = X.shape[1]
        w = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(d), Xc.T @ yc)
    else:
        w = np.linalg.pinv(Xc, rcond=SVD_RCOND) @ yc
    intercept = y_mean - float(x_mean @ w)
    return w, intercept


def predict_linear(X, weights, intercept):
    return np.asarray(X, dtype=np.float64) @ weights + intercept


def _features(c, mode, cache, selection=None):
    encs = np.asarray([cache[mid][0] for mid in c.molecule_ids], dtype=np.float64)
    if mode is RegressionMode.FULL:
        return encs
    if selection is None:
        raise ValueError("selection mode requires selection layer weights (w, b)")
    w, b = selection
    return encs @ np.asarray(w, dtype=np.float64) + np.asarray(b, dtype=np.float64)


def ablation_predict(context, mode, cache, selection=None, ridge=0.0):
    """Prediction (eV) for the final example of a context; the final label
    is never read."""
    if len(context.molecule_ids) < 2:
        raise ValueError("context must have at least 2 examples")
    for mid in context.molecule_ids:
        if mid not in cache:
            raise KeyError(f"encodings cache is missing molecule {mid!r}")
    feats = _features(context, mode, cache, selection)
    y = np.asarray([cache[mid][1] for mid in context.molecule_ids[:-1]], dtype=np.float64)
    w, b = fit_minnorm(feats[:-1], y, ridge=ridge)
    return float(feats[-1] @ w + b)


def ablation_mae(contexts, mode, cache, selection=None, ridge=0.0):
    """Last-example MAE (eV) over a list of contexts."""
    errs = [
        abs(ablation_predict(c, mode, cache, selection, ridge) - cache[c.molecule_ids[-1]][1])
        for c in contexts
    ]
    return float(np.mean(errs))


class ContextRegressor:
    """Estimator-style wrapper: per-context minimum-norm regression.

    Stateless across contexts; `fit` records the mode and optional
    selection layer, `predict` fits each context on its first k-1 pairs.
    """

    def __init__(self, mode=RegressionMode.FULL, ridge=0.0):
        self.mode = mode
        self.ridge = ridge
        self.selection_ = None

    def get_params(self, deep=True):
        return {"mode": self.mode, "ridge": self.ridge}

    def set_params(self, **kw):
        for k, v in kw.items():
            if not hasattr(self, k):
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, selection=None):
        if self.mode is RegressionMode.SELECTION and selection is None:
            raise ValueError("selection mode requires a trained selection layer")
        self.selection_ = selection
        return self

    def predict(self, contexts, cache):
        return np.asarray([
            ablation_predict(c, self.mode, cache, self.selection_, self.ridge)
            for c in contexts
        ])
