"""scikit-learn style wrappers around the context featurizer and the Gamma fit.

A context ``Z`` is packed as one row: the ``l + 1`` tokens (query last)
flattened row by row, followed by the ``l`` labels. ``ContextFeaturizer``
maps such rows to ``vec(H_Z)`` and ``ReducedAttentionRegressor`` is ridge
regression on those features with the ``(n/d) lambda`` penalty scaling.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import InvalidArgumentError
from .simulator import RIDGELESS_PROXY, _sym_solve, _summary, features_from


def pack_contexts(tokens, labels) -> np.ndarray:
    """Pack ``tokens`` (c, l+1, d) and ``labels`` (c, l) into rows."""
    tokens = np.asarray(tokens, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if tokens.ndim != 3 or labels.ndim != 2 or tokens.shape[0] != labels.shape[0] \
            or tokens.shape[1] != labels.shape[1] + 1:
        raise InvalidArgumentError("expected tokens (c, l+1, d) and labels (c, l)")
    return np.concatenate([tokens.reshape(tokens.shape[0], -1), labels], axis=1)


def _dim_from_features(p: int) -> int:
    d = int(round((math.sqrt(1 + 4 * p) - 1) / 2))
    if d * (d + 1) != p:
        raise InvalidArgumentError(f"{p} features is not d(d+1) for any integer d")
    return d


class ContextFeaturizer(TransformerMixin, BaseEstimator):
    """Map packed contexts to ``vec(H_Z)`` (length ``d(d+1)``)."""

    def __init__(self, d: int = 1):
        self.d = d

    def _ell(self, width):
        d = self.d
        # width = (l+1) d + l
        ell, rem = divmod(width - d, d + 1)
        if rem or ell < 1:
            raise InvalidArgumentError(f"row width {width} does not match a context with d={d}")
        return ell

    def fit(self, X, y=None):
        X = check_array(X)
        self.ell_ = self._ell(X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "ell_")
        X = check_array(X)
        d = self.d
        ell = self._ell(X.shape[1])
        c = X.shape[0]
        toks = X[:, : (ell + 1) * d].reshape(c, ell + 1, d)
        labels = X[:, (ell + 1) * d:]
        h = _summary(toks[:, :ell], labels, d, ell)
        return features_from(toks[:, ell], h)


class ReducedAttentionRegressor(RegressorMixin, BaseEstimator):
    """Ridge fit of ``Gamma`` on ``vec(H_Z)`` features.

    ``coef_`` is the ``d x (d+1)`` matrix. ``solver`` picks the feature-space
    or sample-space system; ``"auto"`` takes the smaller one.
    """

    def __init__(self, ridge: float = RIDGELESS_PROXY, solver: str = "auto"):
        self.ridge = ridge
        self.solver = solver

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if not self.ridge > 0:
            raise InvalidArgumentError("ridge must be positive")
        n, p = X.shape
        d = _dim_from_features(p)
        reg = (n / d) * self.ridge
        solver = self.solver
        if solver == "auto":
            solver = "primal" if n >= p else "dual"
        if solver == "primal":
            gram = X.T @ X
            gram[np.diag_indices(p)] += reg
            vec = _sym_solve(gram, X.T @ y)
        elif solver == "dual":
            kern = X @ X.T
            kern[np.diag_indices(n)] += reg
            vec = X.T @ _sym_solve(kern, y)
        else:
            raise InvalidArgumentError(f"unknown solver {self.solver!r}")
        self.coef_ = vec.reshape(d, d + 1)
        self.solver_ = solver
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_.ravel()


def make_icl_pipeline(d: int, ridge: float = RIDGELESS_PROXY, solver: str = "auto") -> Pipeline:
    return Pipeline([("features", ContextFeaturizer(d)),
                     ("gamma", ReducedAttentionRegressor(ridge=ridge, solver=solver))])
