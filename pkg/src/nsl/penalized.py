"""Penalized least squares on a factor-augmented design.

The objective is

    (2n)^-1 ||y - X beta - F gamma||^2 + sum_j p(|beta*_j|) + sum_k p(|gamma_k|)

where ``beta*_j = beta_j * ||x_j|| / sqrt(n)`` puts every predictor on the
common column scale of the score matrix ``F`` (columns of norm sqrt(n)).
Minimisation is cyclic coordinate descent along a decreasing lambda path
with warm starts, several starting points for the nonconvex penalties, an
L-infinity box on gamma and a cap on the total support size.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _cd
from .errors import InputError, RefusalError

FAMILIES = tuple(_cd.FAMILY_CODES)
NONCONVEX = ("hard", "l0", "scad")


@dataclass(frozen=True)
class PenaltySpec:
    family: str = "hard"
    lam: float = 0.0
    scad_a: float = 3.7
    enet_mix: float = 0.5
    gamma_box_T: float = 50.0
    support_cap_M: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown penalty family {self.family!r}; choose from {FAMILIES}")
        if not self.lam >= 0:
            raise InputError("lambda must be nonnegative")
        if not self.scad_a > 2:
            raise InputError("SCAD parameter a must exceed 2")
        if not 0 <= self.enet_mix <= 1:
            raise InputError("elastic-net mix must lie in [0, 1]")
        if not self.gamma_box_T > 0:
            raise InputError("gamma box bound T must be positive")
        if self.support_cap_M is not None and not self.support_cap_M > 0:
            raise InputError("support cap M must be positive")

    @property
    def code(self) -> int:
        return _cd.FAMILY_CODES[self.family]

    @property
    def max_support(self) -> Optional[int]:
        """Largest support size strictly below M/2 (None when uncapped)."""
        if self.support_cap_M is None:
            return None
        return max(int(math.ceil(self.support_cap_M / 2)) - 1, 0)

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.family, float(lam), self.scad_a, self.enet_mix,
                           self.gamma_box_T, self.support_cap_M)


def default_support_cap(n: int, p: int, c_tilde: float = 2.0) -> float:
    """M = c_tilde * n / log(p)."""
    return c_tilde * n / math.log(max(p, 2))


@dataclass(frozen=True)
class AugmentedDesign:
    """Predictors joined with rescaled factor scores.

    Zero-norm predictor columns are kept in ``X`` for indexing but excluded
    from the standardized matrix; their coefficients are always zero.
    """

    X: np.ndarray
    F_hat: np.ndarray
    col_norms: np.ndarray
    keep: np.ndarray
    D: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, X, F_hat=None) -> "AugmentedDesign":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise InputError("X must be a 2-d array")
        n = X.shape[0]
        F_hat = np.zeros((n, 0)) if F_hat is None else np.asarray(F_hat, dtype=float)
        if F_hat.ndim != 2 or F_hat.shape[0] != n:
            raise InputError("score matrix rows do not match X")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(F_hat))):
            raise InputError("design contains non-finite entries")
        fn = np.linalg.norm(F_hat, axis=0)
        if np.any(np.abs(fn - np.sqrt(n)) > 1e-8 * np.sqrt(n)):
            raise InputError("score columns must have L2-norm sqrt(n)")
        col_norms = np.linalg.norm(X, axis=0) / np.sqrt(n)
        keep = col_norms > 0
        if not np.all(keep):
            warnings.warn(f"dropping {int((~keep).sum())} zero-norm predictor column(s)")
        Xs = X[:, keep] / col_norms[keep]
        D = np.asfortranarray(np.hstack([Xs, F_hat]))
        return cls(X, F_hat, col_norms, keep, D)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.F_hat.shape[1]

    @property
    def boxed(self) -> np.ndarray:
        return np.r_[np.zeros(int(self.keep.sum()), bool), np.ones(self.K, bool)]

    def to_standardized(self, beta, gamma) -> np.ndarray:
        return np.r_[np.asarray(beta)[self.keep] * self.col_norms[self.keep], gamma]

    def from_standardized(self, b) -> tuple[np.ndarray, np.ndarray]:
        pk = int(self.keep.sum())
        beta = np.zeros(self.p)
        beta[self.keep] = b[:pk] / self.col_norms[self.keep]
        return beta, np.array(b[pk:], dtype=float)

    def predict(self, beta, gamma) -> np.ndarray:
        return self.X @ beta + self.F_hat @ gamma


@dataclass(frozen=True)
class CoefficientEstimate:
    """Fitted coefficients on the original predictor scale.

    ``support`` indexes the concatenation ``(beta, gamma)``.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam: float
    objective_value: float
    converged: bool = True
    n_sweeps: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.r_[self.beta, self.gamma])

    @property
    def beta_support(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def gamma_support(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)


def penalty_value(spec: PenaltySpec, t) -> float:
    t = float(t)
    if t < 0:
        raise InputError("penalty argument must be nonnegative")
    return _cd.penalty(t, spec.lam, spec.code, spec.scad_a, spec.enet_mix)


def threshold_update(spec: PenaltySpec, z) -> float:
    """Minimiser of 0.5 * (z - b)^2 + p(|b|) over b."""
    return _cd.threshold(float(z), spec.lam, spec.code, spec.scad_a, spec.enet_mix)


def _check_y(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != n:
        raise InputError(f"response length {y.shape[0]} does not match n={n}")
    if not np.all(np.isfinite(y)):
        raise InputError("response contains non-finite entries")
    return y


def objective(y, design: AugmentedDesign, est, spec: PenaltySpec) -> float:
    """Penalized residual sum of squares of ``est`` (an estimate or ``(beta, gamma)``)."""
    beta, gamma = (est.beta, est.gamma) if isinstance(est, CoefficientEstimate) else est
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    y = _check_y(y, design.n)
    if beta.shape != (design.p,) or gamma.shape != (design.K,):
        raise InputError("coefficient lengths do not match the design")
    r = y - design.predict(beta, gamma)
    b_std = np.r_[beta * design.col_norms, gamma]
    pen = sum(penalty_value(spec, abs(v)) for v in b_std if v != 0)
    return float(r @ r / (2 * design.n) + pen)


def lambda_grid(y, design: AugmentedDesign, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced decreasing grid from ``max |D^T y| / n`` down to ``ratio`` times that."""
    y = _check_y(y, design.n)
    lam_max = float(np.max(np.abs(design.D.T @ y)) / design.n) if design.D.shape[1] else 0.0
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


class _Solver:
    """Shared state for one design/response pair."""

    def __init__(self, y, design: AugmentedDesign, spec: PenaltySpec, max_iter, tol, free=None):
        self.y = y
        self.free = np.ones(design.D.shape[1], bool) if free is None else free
        self.design = design
        self.spec = spec
        self.D = design.D
        self.boxed = design.boxed
        self.max_iter = max_iter
        self.tol = tol
        self.cap = spec.max_support

    def run(self, b0, lam, spec=None, allowed=None, trace=False):
        spec = spec or self.spec
        b = np.array(b0, dtype=float)
        allowed = self.free if allowed is None else allowed & self.free
        b[~allowed] = 0.0
        # starts must respect the gamma box
        b[self.boxed] = np.clip(b[self.boxed], -spec.gamma_box_T, spec.gamma_box_T)
        r = self.y - self.D @ b
        sweeps, conv, objs = _cd.cd_solve(self.D, b, r, allowed, lam, spec.code, spec.scad_a,
                                          spec.enet_mix, self.boxed, spec.gamma_box_T,
                                          self.max_iter, self.tol, trace)
        return b, r, int(sweeps), bool(conv), objs

    def obj(self, b, r, lam, spec=None):
        spec = spec or self.spec
        return float(_cd.objective_std(r, b, lam, spec.code, spec.scad_a, spec.enet_mix))

    def solve_capped(self, b0, lam):
        b, r, sweeps, conv, _ = self.run(b0, lam)
        truncated = False
        if self.cap is not None and np.count_nonzero(b) > self.cap:
            truncated = True
            allowed = np.zeros(b.shape[0], bool)
            if self.cap > 0:
                allowed[np.argsort(-np.abs(b), kind="stable")[: self.cap]] = True
            b, r, s2, conv, _ = self.run(b, lam, allowed=allowed)
            sweeps += s2
        return b, r, sweeps, conv, truncated


def _random_start(solver: _Solver, lam, rng) -> np.ndarray:
    # least squares on a random subset of the most correlated columns
    D, y = solver.D, solver.y
    P = D.shape[1]
    cols = np.flatnonzero(solver.free)
    size = max(1, min(solver.cap or P, cols.size, D.shape[0] - 1, 10))
    corr = np.abs(D[:, cols].T @ y)
    pool = cols[np.argsort(-corr, kind="stable")[: min(cols.size, 3 * size)]]
    pick = rng.choice(pool, size=min(size, pool.shape[0]), replace=False)
    b = np.zeros(P)
    coef, *_ = np.linalg.lstsq(D[:, pick], y, rcond=None)
    b[pick] = coef
    return b


def fit_path(y, design: AugmentedDesign, spec: PenaltySpec, grid=None, *, n_starts: int = 5,
             seed: int = 0, max_iter: int = 1000, tol: float = 1e-7,
             fixed_zero=None) -> list[CoefficientEstimate]:
    """Solutions along a strictly decreasing lambda grid.

    Each lambda is warm-started from the previous solution. For the
    nonconvex families ``n_starts`` further starting points are tried
    (zero, the lasso solution at the same lambda, then random supports)
    and the lowest objective is kept. ``fixed_zero`` is an optional boolean
    mask over ``(beta, gamma)`` of coefficients pinned at zero.
    """
    y = _check_y(y, design.n)
    grid = lambda_grid(y, design) if grid is None else np.asarray(grid, dtype=float).ravel()
    if grid.size == 0 or np.any(grid < 0):
        raise InputError("lambda grid must be non-empty and nonnegative")
    if grid.size > 1 and np.any(np.diff(grid) >= 0):
        raise InputError("lambda grid must be strictly decreasing")
    free = None
    if fixed_zero is not None:
        mask = np.asarray(fixed_zero, dtype=bool)
        if mask.shape != (design.p + design.K,):
            raise InputError("fixed_zero mask must have one entry per beta and gamma")
        free = ~np.r_[mask[: design.p][design.keep], mask[design.p:]]
    solver = _Solver(y, design, spec, max_iter, tol, free)
    rng = np.random.default_rng(seed)
    P = design.D.shape[1]
    multi = spec.family in NONCONVEX and n_starts > 0
    lasso_spec = PenaltySpec("lasso", 0.0, gamma_box_T=spec.gamma_box_T)
    b_warm = np.zeros(P)
    b_lasso = np.zeros(P)
    path = []
    for lam in grid:
        starts = [b_warm]
        if multi:
            starts.append(np.zeros(P))
            if n_starts > 1:
                b_lasso, *_ = solver.run(b_lasso, lam, spec=lasso_spec)
                starts.append(b_lasso)
            starts.extend(_random_start(solver, lam, rng) for _ in range(max(n_starts - 2, 0)))
        best = None
        total_sweeps = 0
        for b0 in starts:
            b, r, sweeps, conv, trunc = solver.solve_capped(b0, lam)
            total_sweeps += sweeps
            val = solver.obj(b, r, lam)
            if best is None or val < best[0] - 1e-14:
                best = (val, b, conv, trunc)
        val, b, conv, trunc = best
        b_warm = b
        beta, gamma = design.from_standardized(b)
        diag = {"cap_truncated": trunc}
        if not conv:
            diag["warning"] = f"coordinate descent did not converge in {max_iter} sweeps"
        path.append(CoefficientEstimate(beta, gamma, float(lam), val, conv, total_sweeps, diag))
    return path


def fit_single(y, design: AugmentedDesign, spec: PenaltySpec, **kwargs) -> CoefficientEstimate:
    """Fit at ``spec.lam`` only."""
    return fit_path(y, design, spec, np.array([spec.lam]), **kwargs)[0]


def sweep_objectives(y, design: AugmentedDesign, spec: PenaltySpec, b0=None, *,
                     max_iter: int = 1000, tol: float = 1e-7) -> np.ndarray:
    """Objective after every coordinate-descent sweep from ``b0`` (standardized scale)."""
    y = _check_y(y, design.n)
    solver = _Solver(y, design, spec, max_iter, tol)
    b0 = np.zeros(design.D.shape[1]) if b0 is None else b0
    *_, objs = solver.run(b0, spec.lam, trace=True)
    return objs


def validation_error(est: CoefficientEstimate, y_val, X_val, F_val=None) -> float:
    """Mean squared prediction error on held-out rows."""
    y_val = np.asarray(y_val, dtype=float).ravel()
    pred = np.asarray(X_val, dtype=float) @ est.beta
    if est.gamma.size:
        if F_val is None:
            raise InputError("validation scores required for a factor-augmented fit")
        pred = pred + np.asarray(F_val, dtype=float) @ est.gamma
    return float(np.mean((y_val - pred) ** 2))


def tune(path: Sequence[CoefficientEstimate], y_val, X_val, F_val=None) -> CoefficientEstimate:
    """Path element with the smallest validation error; ties go to the larger lambda."""
    if not path:
        raise InputError("cannot tune an empty path")
    best, best_err = None, np.inf
    for est in sorted(path, key=lambda e: -e.lam):
        err = validation_error(est, y_val, X_val, F_val)
        if err < best_err:
            best, best_err = est, err
    if best is None:
        raise InputError("validation error is not finite for any path element")
    return best


BRUTE_MAX_COLUMNS = 20
BRUTE_MAX_SUPPORT = 12


def brute_force_l0(y, design: AugmentedDesign, spec: PenaltySpec, max_support: int) -> CoefficientEstimate:
    """Exhaustive global minimiser over supports for the thresholding penalties.

    Each candidate support is fitted by least squares (gamma clipped to the
    box with a refit of the remaining columns) and scored with the penalty of
    ``spec``. For the hard and L0 penalties the result is the global minimum
    of the penalized objective over supports smaller than M/2.
    """
    y = _check_y(y, design.n)
    D = design.D
    P = D.shape[1]
    if P > BRUTE_MAX_COLUMNS or max_support > BRUTE_MAX_SUPPORT:
        raise RefusalError(f"brute force limited to {BRUTE_MAX_COLUMNS} columns and "
                           f"support {BRUTE_MAX_SUPPORT}; got {P} and {max_support}")
    limit = max_support
    if spec.max_support is not None:
        limit = min(limit, spec.max_support + 1)
    limit = min(limit, P + 1, design.n)
    boxed = design.boxed
    T = spec.gamma_box_T
    best_val, best_b = float(y @ y / (2 * design.n)), np.zeros(P)
    for size in range(1, limit):
        for S in itertools.combinations(range(P), size):
            S = np.array(S)
            b = np.zeros(P)
            b[S] = _clipped_lstsq(D[:, S], y, boxed[S], T)
            r = y - D @ b
            val = float(_cd.objective_std(r, b, spec.lam, spec.code, spec.scad_a, spec.enet_mix))
            if val < best_val:
                best_val, best_b = val, b
    beta, gamma = design.from_standardized(best_b)
    return CoefficientEstimate(beta, gamma, spec.lam, best_val, True, 0, {"oracle": "brute_force"})


def _clipped_lstsq(A, y, boxed, T) -> np.ndarray:
    free = np.ones(A.shape[1], bool)
    coef = np.zeros(A.shape[1])
    resid = y.copy()
    for _ in range(A.shape[1] + 1):
        c, *_ = np.linalg.lstsq(A[:, free], resid, rcond=None)
        coef[free] = c
        over = free & boxed & (np.abs(coef) > T)
        if not over.any():
            break
        coef[over] = np.clip(coef[over], -T, T)
        free &= ~over
        resid = y - A[:, ~free] @ coef[~free]
    return coef


def estimate_sigma(y, design: AugmentedDesign, est: CoefficientEstimate) -> float:
    """Residual standard deviation with ``n - |support| - 1`` degrees of freedom."""
    y = _check_y(y, design.n)
    s = est.support.size
    dof = design.n - s - 1
    if dof <= 0:
        raise InputError(f"need n > |support| + 1, got n={design.n}, |support|={s}")
    r = y - design.predict(est.beta, est.gamma)
    return float(np.sqrt(r @ r / dof))
