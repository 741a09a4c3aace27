"""Downstream prediction models: L2 logistic regression and score dispatch.

The boosted-tree and sequence classifiers live in their own modules; this one
holds the linear model and the common scoring entry point.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse

from clmbench.errors import ConfigurationError, DataError
from clmbench.numerics import sigmoid

log = logging.getLogger(__name__)

# every power of 10 from 1e-6 to 1e6
LOGISTIC_C_GRID = tuple(10.0**k for k in range(-6, 7))
LOGISTIC_GRAD_TOL = 1e-7
_PROBA_EPS = 1e-15


def clip_proba(p):
    """Keep probabilities strictly inside (0, 1) despite float saturation."""
    return np.clip(p, _PROBA_EPS, 1.0 - _PROBA_EPS)


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    C: float

    def __post_init__(self):
        if self.C <= 0:
            raise ConfigurationError("C must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise DataError("non-finite logistic weights")


def _as_matrix(X):
    if sparse.issparse(X):
        return sparse.csr_matrix(X)
    return np.asarray(X, dtype=np.float64)


def logistic_objective(X, y, C):
    """The penalized log-loss as a (loss, grad) callable over [w, b]."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    reg = 1.0 / (2.0 * C * n)

    def objective(wb):
        w, b = wb[:d], wb[d]
        z = X @ w + b
        # mean log-loss via the stable softplus identity
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + reg * float(w @ w)
        p = sigmoid(z)
        resid = (p - y) / n
        grad_w = X.T @ resid + 2.0 * reg * w
        grad = np.concatenate([np.asarray(grad_w).ravel(), [resid.sum()]])
        return loss, grad

    return objective


def fit_logistic(X, y, C: float, max_iter: int = 1000) -> LogisticModel:
    """Minimize mean log-loss + ||w||^2 / (2 C n), intercept unpenalized.

    Solved with L-BFGS-B from zero to a max-gradient tolerance of 1e-7;
    deterministic. Accepts dense arrays or CSR matrices.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if n != y.size:
        raise ConfigurationError("rows of X must match len(y)")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("both classes must be present to fit")
    result = optimize.minimize(
        logistic_objective(X, y, C),
        np.zeros(d + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": LOGISTIC_GRAD_TOL, "ftol": 1e-14},
    )
    if not result.success and result.status != 1:  # 1 = hit maxiter, usable
        log.warning("fit_logistic: optimizer reports %s", result.message)
    wb = result.x
    return LogisticModel(weights=wb[:d], intercept=float(wb[d]), C=C)


def logistic_objective_value(model: LogisticModel, X, y) -> float:
    """The fitted objective at given parameters, for optimizer sanity checks."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    z = X @ model.weights + model.intercept
    reg = 1.0 / (2.0 * model.C * y.size)
    return float(np.mean(np.logaddexp(0.0, z) - y * z)) + reg * float(
        model.weights @ model.weights
    )


def predict_scores(model, X) -> np.ndarray:
    """Probabilities in (0, 1) for any fitted model type."""
    from clmbench.gbt import BoostedTreesModel
    from clmbench.gru_classifier import EndToEndGruModel

    if isinstance(model, LogisticModel):
        X = _as_matrix(X)
        if X.shape[1] != model.weights.size:
            raise ConfigurationError(
                f"feature width {X.shape[1]} does not match model ({model.weights.size})"
            )
        return clip_proba(sigmoid(np.asarray(X @ model.weights).ravel() + model.intercept))
    if isinstance(model, BoostedTreesModel):
        return clip_proba(model.predict_proba(X))
    if isinstance(model, EndToEndGruModel):
        return clip_proba(model.predict_proba(X))
    raise ConfigurationError(f"unknown model type {type(model).__name__}")
