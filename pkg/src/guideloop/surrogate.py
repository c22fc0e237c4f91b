"""Weighted RBF kernel ridge regression from embeddings to quality scores."""

from __future__ import annotations

import itertools
import json
import uuid
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

RESIDUAL_RTOL = 1e-8

DEFAULT_SIGMA_GRID = (0.5, 1.0, 2.0)
DEFAULT_RIDGE_GRID = (1e-3, 1e-2, 1e-1)


class SurrogateFitError(RuntimeError):
    """Raised when the kernel system cannot be solved to tolerance."""


def rbf_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    """k(a, b) = exp(-||a-b||^2 / (2 sigma^2)) for all row pairs."""
    sq = (
        np.sum(A**2, axis=1)[:, None]
        + np.sum(B**2, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma**2))


class WeightedKernelRidge(BaseEstimator, RegressorMixin):
    """Dual-form weighted kernel ridge: (W K + ridge I) alpha = W q.

    Minimizes sum_i w_i (s(z_i) - q_i)^2 + ridge ||s||^2 in the RBF-induced
    function space. The fitted model is immutable and differentiable in z.
    """

    def __init__(self, sigma: float = 1.0, ridge: float = 1e-2):
        self.sigma = sigma
        self.ridge = ridge

    def fit(self, Z, q, sample_weight=None):
        if self.sigma <= 0 or self.ridge <= 0:
            raise ValueError("sigma and ridge must be positive")
        Z = check_array(Z)
        q = np.asarray(q, dtype=float).ravel()
        n = Z.shape[0]
        if q.shape[0] != n:
            raise ValueError(f"{n} embeddings but {q.shape[0]} targets")
        if sample_weight is None:
            w = np.ones(n)
        else:
            w = np.asarray(sample_weight, dtype=float).ravel()
            if w.shape[0] != n:
                raise ValueError("sample_weight length mismatch")
        if (w < 0).any():
            raise ValueError("negative sample weights")
        if not (w > 0).any():
            raise SurrogateFitError("all sample weights are zero")

        K = rbf_kernel(Z, Z, self.sigma)
        A = w[:, None] * K + self.ridge * np.eye(n)
        rhs = w * q
        try:
            alpha = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as e:
            raise SurrogateFitError(
                f"singular kernel system (cond ~ {np.linalg.cond(A):.3e})"
            ) from e
        residual = np.linalg.norm(A @ alpha - rhs)
        bound = RESIDUAL_RTOL * max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if residual > bound:
            raise SurrogateFitError(
                f"normal-equation residual {residual:.3e} exceeds tolerance "
                f"(cond ~ {np.linalg.cond(A):.3e})"
            )
        self.centers_ = Z.copy()
        self.alpha_ = alpha
        self.fit_id_ = uuid.uuid4().hex  # distinguishes refits of equal data
        return self

    def _check_fitted(self):
        if not hasattr(self, "alpha_"):
            raise NotFittedError("surrogate is not fitted")

    def predict(self, Z):
        self._check_fitted()
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.centers_.shape[1]:
            raise ValueError(
                f"embedding dim {Z.shape[1]} != fitted dim {self.centers_.shape[1]}"
            )
        return rbf_kernel(Z, self.centers_, self.sigma) @ self.alpha_

    def predict_one(self, z) -> float:
        return float(self.predict(np.asarray(z)[None, :])[0])

    def predict_grad(self, z) -> np.ndarray:
        """Gradient of the prediction at a single point z."""
        self._check_fitted()
        z = np.asarray(z, dtype=float)
        k = rbf_kernel(z[None, :], self.centers_, self.sigma)[0]  # (N,)
        diffs = self.centers_ - z  # (N, m)
        return (self.alpha_ * k) @ diffs / self.sigma**2

    def predict_grad_batch(self, Z) -> np.ndarray:
        """Prediction gradients for each row of Z; returns (N, m)."""
        self._check_fitted()
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        K = rbf_kernel(Z, self.centers_, self.sigma)  # (N, C)
        weighted = K * self.alpha_[None, :]
        return (weighted @ self.centers_ - weighted.sum(axis=1)[:, None] * Z) / self.sigma**2

    def to_json(self, path: str | Path) -> None:
        self._check_fitted()
        Path(path).write_text(
            json.dumps(
                {
                    "sigma": self.sigma,
                    "ridge": self.ridge,
                    "centers": self.centers_.tolist(),
                    "alpha": self.alpha_.tolist(),
                }
            )
        )


def rmse(model: WeightedKernelRidge, Z_eval, q_eval) -> float:
    q_eval = np.asarray(q_eval, dtype=float).ravel()
    if q_eval.size == 0:
        raise ValueError("empty evaluation set")
    pred = model.predict(np.asarray(Z_eval))
    return float(np.sqrt(np.mean((pred - q_eval) ** 2)))


def select_hyperparams(
    Z_train,
    q_train,
    w_train,
    Z_val,
    q_val,
    sigma_grid=DEFAULT_SIGMA_GRID,
    ridge_grid=DEFAULT_RIDGE_GRID,
) -> tuple[float, float]:
    """Validation-RMSE grid search; returns the best (sigma, ridge)."""
    best = None
    for sigma, ridge in itertools.product(sigma_grid, ridge_grid):
        model = WeightedKernelRidge(sigma=sigma, ridge=ridge).fit(
            Z_train, q_train, sample_weight=w_train
        )
        err = rmse(model, Z_val, q_val)
        if best is None or err < best[0]:
            best = (err, sigma, ridge)
    return best[1], best[2]
