"""Sample principal components under a spiked covariance structure.

Covers the sample covariance, a sign-normalised symmetric eigensolver,
principal component score vectors rescaled to a common norm, and the
angle and rate quantities used to judge how well sample components
track their population counterparts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateFactorError, InputError, NumericError

ORTHO_TOL = 1e-10
SYMMETRY_TOL = 1e-8
UNIT_TOL = 1e-8


def as_covariates(W, name="W") -> np.ndarray:
    """Validate an n x q covariate matrix and return it as float64."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise InputError(f"{name} must be a 2-d array, got shape {W.shape}")
    n, q = W.shape
    if n < 2 or q < 1:
        raise InputError(f"{name} needs n >= 2 and q >= 1, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InputError(f"{name} contains non-finite entries")
    return W


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues sorted in decreasing order with paired unit eigenvectors.

    ``eigenvectors[:, i]`` belongs to ``eigenvalues[i]``. A truncated system
    (fewer columns than rows) is allowed; columns stay orthonormal.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=float)
        vecs = np.asarray(self.eigenvectors, dtype=float)
        if vecs.ndim != 2 or vecs.shape[1] != vals.shape[0]:
            raise InputError("eigenvectors must have one column per eigenvalue")
        vals.setflags(write=False)
        vecs.setflags(write=False)
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def dim(self) -> int:
        return self.eigenvectors.shape[0]

    def top(self, k: int) -> "EigenSystem":
        return EigenSystem(self.eigenvalues[:k], self.eigenvectors[:, :k])


@dataclass(frozen=True)
class SpikedStructure:
    """Grouped spiked eigenvalue layout.

    Group ``l`` holds ``group_sizes[l]`` eigenvalues of order
    ``q ** exponents[l]``; the remaining ``q - K`` eigenvalues stay bounded.
    ``tail_exponent`` is only used by :func:`rate_bound`.
    """

    group_sizes: Sequence[int]
    exponents: Sequence[float]
    q: int
    tail_exponent: float = 0.5
    limits: Optional[Sequence[float]] = None

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.group_sizes)
        exps = tuple(float(a) for a in self.exponents)
        if not sizes or len(sizes) != len(exps):
            raise InputError("group_sizes and exponents must be non-empty and aligned")
        if any(k < 1 for k in sizes):
            raise InputError("group sizes must be positive")
        if any(a <= 1 for a in exps):
            raise InputError("spike exponents must exceed 1")
        if any(a <= b for a, b in zip(exps, exps[1:])):
            raise InputError("spike exponents must be strictly decreasing")
        if sum(sizes) > self.q:
            raise InputError("more spiked eigenvalues than dimensions")
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "exponents", exps)
        if self.limits is not None:
            lim = tuple(float(c) for c in self.limits)
            if len(lim) != sum(sizes) or any(c <= 0 for c in lim):
                raise InputError("limits need one positive constant per spiked index")
            object.__setattr__(self, "limits", lim)

    @property
    def m(self) -> int:
        return len(self.group_sizes)

    @property
    def K(self) -> int:
        return sum(self.group_sizes)

    @property
    def delta(self) -> float:
        """Smallest gap between successive group exponents (inf if m == 1)."""
        if self.m < 2:
            return np.inf
        return min(a - b for a, b in zip(self.exponents, self.exponents[1:]))

    def index_groups(self) -> list[range]:
        """Zero-based index ranges of the m spiked groups plus the tail group."""
        groups, start = [], 0
        for k in self.group_sizes:
            groups.append(range(start, start + k))
            start += k
        groups.append(range(start, self.q))
        return groups

    def population_eigenvalues(self) -> np.ndarray:
        """Eigenvalues c_i q^alpha_l for spiked indices and 1 elsewhere."""
        lim = self.limits or (1.0,) * self.K
        vals = np.ones(self.q)
        i = 0
        for k, a in zip(self.group_sizes, self.exponents):
            for _ in range(k):
                vals[i] = lim[i] * float(self.q) ** a
                i += 1
        return vals


@dataclass(frozen=True)
class ScoreSet:
    """Principal component scores rescaled to L2-norm sqrt(n).

    ``back_scalars[i] * raw_norms[i] == sqrt(n)``; multiplying a coefficient
    fitted on the rescaled score by ``back_scalars[i]`` gives the coefficient
    on the raw score ``W @ u_i``.
    """

    scores: np.ndarray
    raw_norms: np.ndarray
    back_scalars: np.ndarray
    directions: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def K(self) -> int:
        return self.scores.shape[1]


def sample_covariance(W) -> np.ndarray:
    """Return ``W.T @ W / n`` without centering the columns."""
    W = as_covariates(W)
    S = W.T @ W / W.shape[0]
    return (S + S.T) / 2


def _normalize_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry nonnegative; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[idx, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
    return vecs * signs


def eigendecompose(S) -> EigenSystem:
    """Full symmetric eigendecomposition sorted by decreasing eigenvalue."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InputError("matrix contains non-finite entries")
    scale = 1.0 + np.max(np.abs(S), initial=0.0)
    if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise InputError("matrix is not symmetric within tolerance")
    try:
        vals, vecs = np.linalg.eigh((S + S.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigensolver failed: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    return EigenSystem(vals[order], _normalize_signs(vecs[:, order]))


def top_components(W, K: int) -> EigenSystem:
    """Leading K sample eigenpairs of ``W.T @ W / n``.

    When q > n the n x n dual matrix ``W @ W.T / n`` is decomposed instead;
    it shares the nonzero eigenvalues and its eigenvectors map back through
    ``W.T``.
    """
    W = as_covariates(W)
    n, q = W.shape
    if not 1 <= K <= min(n, q):
        raise InputError(f"K must lie in [1, {min(n, q)}], got {K}")
    if q <= n:
        return eigendecompose(sample_covariance(W)).top(K)
    dual = eigendecompose(W @ W.T / n).top(K)
    vals = dual.eigenvalues
    if np.any(vals <= 0):
        i = int(np.argmax(vals <= 0))
        raise DegenerateFactorError(i + 1, f"sample eigenvalue {i + 1} is zero")
    vecs = W.T @ dual.eigenvectors / np.sqrt(n * vals)
    # one Gram-Schmidt pass removes roundoff from the back-mapping
    vecs, _ = np.linalg.qr(vecs)
    vecs = _normalize_signs(vecs)
    return EigenSystem(vals.copy(), vecs)


def principal_scores(W, eig: EigenSystem, K: int) -> ScoreSet:
    """Score vectors ``W @ u_i`` for the first K components, rescaled to norm sqrt(n)."""
    W = as_covariates(W)
    n = W.shape[0]
    if not 1 <= K < n:
        raise InputError(f"need 1 <= K < n, got K={K}, n={n}")
    if K > eig.eigenvectors.shape[1] or eig.dim != W.shape[1]:
        raise InputError("eigen system does not match W or holds fewer than K components")
    U = eig.eigenvectors[:, :K]
    raw = W @ U
    norms = np.linalg.norm(raw, axis=0)
    for i, nrm in enumerate(norms):
        if not nrm > 0:
            raise DegenerateFactorError(i + 1)
    back = np.sqrt(n) / norms
    scores = raw * back
    return ScoreSet(scores=scores, raw_norms=norms, back_scalars=back, directions=U.copy())


def project_scores(W, scores: ScoreSet) -> np.ndarray:
    """Scores of new rows along the stored directions, using the stored rescaling."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[1] != scores.directions.shape[0]:
        raise InputError("covariate columns do not match the fitted directions")
    return (W @ scores.directions) * scores.back_scalars


def _clamped_angle(cos_value: float) -> float:
    return float(np.arccos(np.clip(cos_value, 0.0, 1.0)))


def subspace_angle(u_hat, group) -> float:
    """Angle between a unit vector and the span of orthonormal vectors.

    ``group`` is a q x k array with orthonormal columns (or a single vector).
    """
    u_hat = np.asarray(u_hat, dtype=float).ravel()
    if abs(np.linalg.norm(u_hat) - 1.0) > UNIT_TOL:
        raise InputError("u_hat must have unit norm")
    G = np.asarray(group, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] != u_hat.shape[0]:
        raise InputError("group vectors and u_hat differ in dimension")
    return _clamped_angle(np.linalg.norm(G.T @ u_hat))


def score_angle(W, u_hat, u) -> float:
    """Angle between the score vectors ``W @ u_hat`` and ``W @ u``, folded into [0, pi/2]."""
    W = np.asarray(W, dtype=float)
    a = W @ np.asarray(u_hat, dtype=float)
    b = W @ np.asarray(u, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na > 0 and nb > 0):
        raise DegenerateFactorError(0, "zero score vector in angle computation")
    return _clamped_angle(abs(a @ b) / (na * nb))


def rate_bound(s: SpikedStructure, t: int) -> float:
    """Convergence-rate quantity A(t) for spiked group ``t`` (1-based).

    A(t) = (sum_{l>t} k_l q^alpha_l + (q - K)) / K * q^(alpha - alpha_t)
    """
    if not 1 <= t <= s.m:
        raise InputError(f"group index must be in [1, {s.m}], got {t}")
    q = float(s.q)
    lower = sum(k * q ** a for k, a in zip(s.group_sizes[t:], s.exponents[t:]))
    tail = s.q - s.K
    return (lower + tail) / s.K * q ** (s.tail_exponent - s.exponents[t - 1])


def eigenvalue_ratio_count(eigenvalues, kmax: int) -> int:
    """Number of factors maximising the ratio of successive eigenvalues.

    Only a diagnostic; fitting always takes K from the caller.
    """
    vals = np.asarray(eigenvalues, dtype=float)
    kmax = min(kmax, len(vals) - 1)
    if kmax < 1:
        raise InputError("need at least two eigenvalues")
    head = vals[: kmax + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = head[:-1] / np.where(head[1:] > 0, head[1:], np.nan)
    ratios = np.where(np.isnan(ratios), np.inf, ratios)
    return int(np.argmax(ratios)) + 1


def sample_spiked(structure: SpikedStructure, n: int, rng: np.random.Generator,
                  normalize_spikes: bool = False):
    """Draw n Gaussian rows with covariance diag(population eigenvalues).

    Population eigenvectors are the coordinate axes. With
    ``normalize_spikes`` the K spiked latent coordinates are orthonormalised
    within the sample and scaled to norm sqrt(n), so ``Z_s^T Z_s / n = I``
    holds exactly for the spiked block. Returns ``(W, eig)`` with ``eig`` the
    population eigen system.
    """
    lam = structure.population_eigenvalues()
    Z = rng.standard_normal((n, structure.q))
    if normalize_spikes:
        K = structure.K
        if K >= n:
            raise InputError("normalising spikes needs K < n")
        Q, R = np.linalg.qr(Z[:, :K])
        Z[:, :K] = Q * np.sign(np.diag(R)) * np.sqrt(n)
    return Z * np.sqrt(lam), EigenSystem(lam, np.eye(structure.q))
