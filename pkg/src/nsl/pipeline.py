"""End-to-end fitting with latent factors estimated from covariates.

``fit`` turns covariates W into principal component scores, augments the
predictors with them, runs the penalized path on a training split and
picks lambda on the held-out split. Diagnostics for robust spark and the
factor-accuracy conditions live here too.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, RefusalError
from .penalized import (AugmentedDesign, CoefficientEstimate, PenaltySpec, default_support_cap,
                        estimate_sigma, fit_path, lambda_grid, tune)
from .spiked_pca import ScoreSet, eigenvalue_ratio_count, principal_scores, project_scores, top_components


@dataclass(frozen=True)
class NslConfig:
    num_factors: int = 10
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    center_W: bool = True
    clr_W: bool = False
    pseudocount: float = 0.5
    validation_fraction: float = 0.4
    seed: int = 12345
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    n_starts: int = 5
    c_tilde: float = 2.0

    def __post_init__(self):
        if self.num_factors < 0:
            raise InputError("number of factors must be nonnegative")
        if not 0 < self.validation_fraction < 1:
            raise InputError("validation fraction must lie in (0, 1)")


@dataclass(frozen=True)
class NslFit:
    estimate: CoefficientEstimate
    scores: Optional[ScoreSet]
    eigenvalues: np.ndarray
    lambda_selected: float
    sigma_hat: float
    diagnostics: dict
    config: NslConfig
    w_means: Optional[np.ndarray] = None
    train_index: Optional[np.ndarray] = None

    @property
    def gamma_original(self) -> np.ndarray:
        """Factor coefficients on the raw score scale ``W @ u_i``."""
        if self.scores is None:
            return np.zeros(0)
        return self.estimate.gamma * self.scores.back_scalars


def clr_transform(W) -> np.ndarray:
    """Centered log-ratio: log of each entry minus the row mean of logs."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise InputError("CLR input must be a 2-d array")
    if not np.all(np.isfinite(W)) or np.any(W <= 0):
        raise InputError("CLR needs strictly positive finite entries")
    L = np.log(W)
    return L - L.mean(axis=1, keepdims=True)


def prepare_covariates(W, config: NslConfig, means=None):
    """Apply the configured CLR and centering; returns ``(W, column_means)``."""
    W = np.asarray(W, dtype=float)
    if config.clr_W:
        if np.any(W < 0):
            raise InputError("compositional covariates must be nonnegative")
        W = clr_transform(np.where(W == 0, config.pseudocount, W))
    if config.center_W:
        if means is None:
            means = W.mean(axis=0)
        W = W - means
    return W, means


def _check_inputs(y, X, W):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InputError("X must be 2-d")
    n = y.shape[0]
    if X.shape[0] != n:
        raise InputError(f"X has {X.shape[0]} rows but y has {n}")
    if W is not None:
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != n:
            raise InputError(f"W must be 2-d with {n} rows")
        if not np.all(np.isfinite(W)):
            raise InputError("W contains non-finite entries")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise InputError("y or X contains non-finite entries")
    return y, X, W


def split_indices(n: int, validation_fraction: float, seed: int):
    """Seeded permutation split into (train, validation) row indices."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(validation_fraction * n))
    n_val = min(max(n_val, 1), n - 2)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_with_validation(y, X, W, y_val, X_val, W_val, config: NslConfig) -> NslFit:
    """Fit on (y, X, W) and tune lambda on a separate validation set.

    Validation scores use the training directions and training rescaling.
    ``W`` may be None (or ``num_factors == 0``) for a predictors-only model.
    """
    y, X, W = _check_inputs(y, X, W)
    y_val, X_val, W_val = _check_inputs(y_val, X_val, W_val)
    if X_val.shape[1] != X.shape[1]:
        raise InputError("validation predictors differ in column count")
    n = y.shape[0]
    K = config.num_factors if W is not None else 0
    if K >= n:
        raise InputError(f"number of factors K={K} must be below the training size n={n}")
    scores, eigenvalues, means, F, F_val = None, np.zeros(0), None, None, None
    diagnostics = {}
    if K > 0:
        Wt, means = prepare_covariates(W, config)
        eig = top_components(Wt, K)
        scores = principal_scores(Wt, eig, K)
        eigenvalues = eig.eigenvalues
        F = scores.scores
        Wv, _ = prepare_covariates(W_val, config, means)
        F_val = project_scores(Wv, scores)
        if K >= 2:
            diagnostics["eigenvalue_ratio_K"] = eigenvalue_ratio_count(eigenvalues, K - 1)
    design = AugmentedDesign.build(X, F)
    spec = config.penalty
    if spec.support_cap_M is None:
        spec = PenaltySpec(spec.family, spec.lam, spec.scad_a, spec.enet_mix, spec.gamma_box_T,
                           default_support_cap(n, design.p + design.K, config.c_tilde))
    grid = lambda_grid(y, design, config.n_lambda, config.lambda_ratio)
    path = fit_path(y, design, spec, grid, n_starts=config.n_starts, seed=config.seed)
    est = tune(path, y_val, X_val, F_val)
    sigma = estimate_sigma(y, design, est)
    diagnostics.update(support_cap_M=spec.support_cap_M, path_length=len(path),
                       unconverged=sum(not e.converged for e in path))
    return NslFit(est, scores, eigenvalues, est.lam, sigma, diagnostics, config, means)


def fit(y, X, W, config: NslConfig) -> NslFit:
    """Split rows by a seeded permutation, fit on the training part, tune on the rest."""
    y, X, W = _check_inputs(y, X, W)
    train, val = split_indices(y.shape[0], config.validation_fraction, config.seed)
    Wtr = None if W is None else W[train]
    Wva = None if W is None else W[val]
    res = fit_with_validation(y[train], X[train], Wtr, y[val], X[val], Wva, config)
    return NslFit(res.estimate, res.scores, res.eigenvalues, res.lambda_selected, res.sigma_hat,
                  res.diagnostics, res.config, res.w_means, train)


def predict(fit: NslFit, X_new, W_new=None) -> np.ndarray:
    """Predictions with training directions and training back-transform scalars."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != fit.estimate.beta.shape[0]:
        raise InputError("new predictors do not match the fitted column count")
    yhat = X_new @ fit.estimate.beta
    if fit.scores is not None:
        if W_new is None:
            raise InputError("covariates required to predict with latent factors")
        W_new = np.asarray(W_new, dtype=float)
        if W_new.ndim != 2 or W_new.shape[0] != X_new.shape[0]:
            raise InputError("new covariates must have one row per predictor row")
        Wp, _ = prepare_covariates(W_new, fit.config, fit.w_means)
        raw = Wp @ fit.scores.directions
        yhat = yhat + raw @ (fit.scores.back_scalars * fit.estimate.gamma)
    return yhat


SPARK_MAX_CAP = 14
SPARK_MAX_SUBSETS = 5_000_000


def _rescaled(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise InputError("robust spark needs nonzero columns")
    return A / norms  # equals n^{-1/2} times the sqrt(n)-rescaled design


def robust_spark(design, c: float, cap: int) -> Optional[int]:
    """Smallest column count whose rescaled submatrix has a singular value below ``c``.

    Columns are rescaled to norm sqrt(n) and the matrix multiplied by
    n^{-1/2}. Returns None when no subset of size up to ``cap`` qualifies,
    meaning the robust spark exceeds ``cap``.
    """
    if not 0 < c:
        raise InputError("bound c must be positive")
    if cap > SPARK_MAX_CAP:
        raise RefusalError(f"cap {cap} exceeds the exhaustive-search limit {SPARK_MAX_CAP}")
    A = _rescaled(design)
    p = A.shape[1]
    total = sum(math.comb(p, t) for t in range(1, min(cap, p) + 1))
    if total > SPARK_MAX_SUBSETS:
        raise RefusalError(f"{total} subsets exceed the search budget {SPARK_MAX_SUBSETS}")
    G = A.T @ A
    for tau in range(1, min(cap, p) + 1):
        for S in itertools.combinations(range(p), tau):
            idx = np.array(S)
            if tau > A.shape[0]:
                return tau
            # smallest singular value of A_S is sqrt of smallest Gram eigenvalue
            smin = math.sqrt(max(np.linalg.eigvalsh(G[np.ix_(idx, idx)])[0], 0.0))
            if smin < c:
                return tau
    return None


def condition_diagnostics(F_hat, F_true, *, c: float, c2: float, T: float, s: int, b0: float,
                          L: float, p: int, c1: Optional[float] = None) -> dict:
    """Factor-accuracy and signal-strength diagnostics against known truth.

    ``F_hat`` and ``F_true`` are n x K score matrices (any column scale).
    Values are reported, never enforced.
    """
    if F_true is None:
        raise RefusalError("condition diagnostics need the population factors (synthetic data only)")
    F_hat = np.asarray(F_hat, dtype=float)
    F_true = np.asarray(F_true, dtype=float)
    if F_hat.shape != F_true.shape:
        raise InputError("estimated and true factor matrices differ in shape")
    n, K = F_hat.shape
    nh = np.linalg.norm(F_hat, axis=0)
    nt = np.linalg.norm(F_true, axis=0)
    cos_omega = np.clip(np.abs(np.sum(F_hat * F_true, axis=0)) / (nh * nt), 0.0, 1.0)
    log_n = math.log(n)
    cos_bound = 1 - c2 ** 2 * log_n / (8 * K ** 2 * T ** 2 * n)
    # both score sets on the sqrt(n) scale, sign-aligned
    err = np.sqrt(np.maximum(2 * n * (1 - cos_omega), 0.0))
    c1_surrogate = c - c2 / (2 * T) * math.sqrt(log_n / (n * K))
    c1_used = c1_surrogate if c1 is None else c1
    root = math.sqrt((2 * s + 1) * math.log(p) / n)
    signal_threshold = max(math.sqrt(2) / c1_used, 1.0) / c1_used * c2 * L * root
    return {
        "cos_omega": cos_omega.tolist(),
        "cos_omega_bound": cos_bound,
        "factor_accuracy_ok": bool(np.all(cos_omega >= cos_bound)),
        "max_factor_error": float(err.max()),
        "factor_error_bound": c2 * math.sqrt(log_n) / (2 * K * T),
        "c1_surrogate": c1_surrogate,
        "c1": c1_used,
        "signal_threshold": signal_threshold,
        "b0": b0,
        "signal_strength_ok": bool(b0 > signal_threshold),
        "lambda_window": [c2 / c1_used * root, b0 / L * min(1.0, c1_used / math.sqrt(2))],
    }
