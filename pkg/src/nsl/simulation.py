"""Monte Carlo study of regression with latent factors.

Two data-generating processes:

* example 1: W = X with covariance (AR(0.5) + equicorrelation(0.5)) / 2,
  one spiked factor with effect 0.5 and Gaussian noise;
* example 2: X ~ AR(0.5) and independent W with a two-block spiked
  covariance, two factors with effects (0.5, -0.5) and scaled t(10) noise.

The response uses the raw population factors ``W @ u_i`` so that the
factor effect has variance ``gamma_i**2 * lambda_i``. Estimated factor
coefficients are mapped back to that scale before computing losses.
"""
from __future__ import annotations

import functools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .errors import InputError, NumericError
from .penalized import (AugmentedDesign, CoefficientEstimate, PenaltySpec, default_support_cap,
                        estimate_sigma, fit_path, lambda_grid, tune)
from .pipeline import NslConfig, fit_with_validation
from .spiked_pca import EigenSystem, eigendecompose

METHODS = ("lasso", "scad", "hard")
MODELS = ("M1", "M2", "oracle")
MEASURES = ("PE", "L2", "L1", "Linf", "FP", "FN", "sigma_hat",
            "gamma_L2", "gamma_L1", "gamma_Linf", "FP_gamma", "FN_gamma")


@dataclass(frozen=True)
class ExampleSpec:
    example_id: int = 1
    n: int = 100
    p: int = 1000
    q: Optional[int] = None
    K: int = 10
    k_repeats: int = 3
    sigma: float = 0.4
    error_family: Optional[str] = None
    df: float = 10.0
    reps: int = 50
    test_size: int = 10_000
    validation_size: Optional[int] = None
    seed: int = 12345
    n_lambda: int = 100
    n_starts: int = 5

    def __post_init__(self):
        if self.example_id not in (1, 2):
            raise InputError("example_id must be 1 or 2")
        q = self.q if self.q is not None else self.p
        if self.example_id == 1 and q != self.p:
            raise InputError("example 1 uses W = X, so q must equal p")
        fam = self.error_family or ("gaussian" if self.example_id == 1 else "student_t")
        if fam not in ("gaussian", "student_t"):
            raise InputError(f"unknown error family {fam!r}")
        if fam == "student_t" and not self.df > 2:
            raise InputError("t errors need df > 2 for a finite variance")
        if min(self.n, self.p, q, self.K, self.test_size) < 1 or self.sigma < 0:
            raise InputError("dimensions must be positive and sigma nonnegative")
        if 6 * self.k_repeats > self.p:
            raise InputError("p too small for the repeated coefficient pattern")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "error_family", fam)
        if self.validation_size is None:
            object.__setattr__(self, "validation_size", self.n)

    @property
    def error_sd(self) -> float:
        """Population standard deviation of the noise."""
        if self.error_family == "student_t":
            return self.sigma * float(np.sqrt(self.df / (self.df - 2)))
        return self.sigma


@dataclass(frozen=True)
class TruthSet:
    beta0: np.ndarray
    gamma0: np.ndarray
    F_true: np.ndarray
    F_raw: np.ndarray
    sigma: float

    @property
    def factor_support(self) -> np.ndarray:
        return np.flatnonzero(self.gamma0)


@dataclass(frozen=True)
class Population:
    """Per-spec constants: Cholesky factors and leading population eigenpairs."""

    chol_X: np.ndarray
    chol_W: Optional[np.ndarray]
    eig_W: EigenSystem
    beta0: np.ndarray
    gamma0: np.ndarray


@dataclass(frozen=True)
class Sample:
    X: np.ndarray
    W: np.ndarray
    y: np.ndarray
    F_raw: np.ndarray


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    W: np.ndarray
    y: np.ndarray
    truth: TruthSet
    test: Sample
    validation: Sample


def ar1_covariance(d: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def mixed_covariance(d: int, scale: float) -> np.ndarray:
    """``scale * (AR(0.5) + 0.5 I + 0.5 11^T)``."""
    return scale * (ar1_covariance(d) + 0.5 * np.eye(d) + 0.5)


def build_covariance(spec: ExampleSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Sigma_X, Sigma_W)``; for example 1 both are the same matrix."""
    if spec.example_id == 1:
        S = mixed_covariance(spec.p, 0.5)
        return S, S
    q1 = spec.q // 5
    Sigma_W = np.zeros((spec.q, spec.q))
    Sigma_W[:q1, :q1] = mixed_covariance(q1, 0.75)
    Sigma_W[q1:, q1:] = mixed_covariance(spec.q - q1, 0.5)
    return ar1_covariance(spec.p), Sigma_W


def _cholesky(S) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance is not positive definite: {exc}") from exc


def sample_mvn(Sigma, n: int, rng: np.random.Generator, chol=None) -> np.ndarray:
    """n i.i.d. rows from N(0, Sigma) via the Cholesky factor."""
    L = _cholesky(np.asarray(Sigma, dtype=float)) if chol is None else chol
    return rng.standard_normal((n, L.shape[0])) @ L.T


def true_coefficients(spec: ExampleSpec) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([0.6, 0, 0, -0.6, 0, 0])
    beta0 = np.zeros(spec.p)
    beta0[: 6 * spec.k_repeats] = np.tile(v, spec.k_repeats)
    gamma0 = np.zeros(spec.K)
    lead = [0.5] if spec.example_id == 1 else [0.5, -0.5]
    gamma0[: len(lead)] = lead
    return beta0, gamma0


@functools.lru_cache(maxsize=4)
def build_population(spec: ExampleSpec) -> Population:
    Sigma_X, Sigma_W = build_covariance(spec)
    chol_X = _cholesky(Sigma_X)
    chol_W = None if spec.example_id == 1 else _cholesky(Sigma_W)
    eig = eigendecompose(Sigma_W).top(spec.K)
    beta0, gamma0 = true_coefficients(spec)
    return Population(chol_X, chol_W, eig, beta0, gamma0)


def _errors(spec: ExampleSpec, n: int, rng) -> np.ndarray:
    z = rng.standard_normal(n)
    if spec.error_family == "student_t":
        chi = rng.chisquare(spec.df, n)
        z = z / np.sqrt(chi / spec.df)
    return spec.sigma * z


def draw_sample(spec: ExampleSpec, pop: Population, n: int, rng) -> Sample:
    X = sample_mvn(None, n, rng, pop.chol_X)
    W = X if pop.chol_W is None else sample_mvn(None, n, rng, pop.chol_W)
    F_raw = W @ pop.eig_W.eigenvectors
    y = X @ pop.beta0 + F_raw @ pop.gamma0 + _errors(spec, n, rng)
    return Sample(X, W, y, F_raw)


def generate_dataset(spec: ExampleSpec, rng: np.random.Generator, pop: Optional[Population] = None) -> Dataset:
    """Training sample, validation sample of size ``validation_size`` and test sample."""
    pop = pop or build_population(spec)
    train = draw_sample(spec, pop, spec.n, rng)
    norms = np.linalg.norm(train.F_raw, axis=0)
    truth = TruthSet(pop.beta0, pop.gamma0, train.F_raw * (np.sqrt(spec.n) / norms), train.F_raw, spec.sigma)
    validation = draw_sample(spec, pop, spec.validation_size, rng)
    test = draw_sample(spec, pop, spec.test_size, rng)
    return Dataset(train.X, train.W, train.y, truth, test, validation)


@dataclass
class FitContext:
    """What ``evaluate`` needs to know about how an estimate was produced.

    ``model`` is M1 (no factors), M2 (estimated scores, ``directions`` and
    ``back_scalars`` from training) or oracle (raw population factors).
    ``signs`` aligns estimated factors with the population ones.
    """

    model: str
    directions: Optional[np.ndarray] = None
    back_scalars: Optional[np.ndarray] = None
    signs: Optional[np.ndarray] = None
    sigma_hat: float = float("nan")


def evaluate(est: CoefficientEstimate, truth: TruthSet, test: Sample, ctx: FitContext) -> dict:
    """Prediction error on the test sample plus estimation and selection measures."""
    if truth is None or test is None:
        raise InputError("evaluation needs the truth and a test sample")
    pred = test.X @ est.beta
    gamma_raw = None
    if ctx.model == "M2":
        gamma_raw = est.gamma * ctx.back_scalars
        pred = pred + (test.W @ ctx.directions) @ gamma_raw
        gamma_raw = gamma_raw * (ctx.signs if ctx.signs is not None else 1.0)
    elif ctx.model == "oracle":
        gamma_raw = est.gamma
        pred = pred + test.F_raw @ gamma_raw
    elif ctx.model != "M1":
        raise InputError(f"unknown model {ctx.model!r}")
    d = est.beta - truth.beta0
    true_supp = truth.beta0 != 0
    sel = est.beta != 0
    rec = {
        "PE": float(np.mean((test.y - pred) ** 2)),
        "L2": float(np.linalg.norm(d, 2)),
        "L1": float(np.linalg.norm(d, 1)),
        "Linf": float(np.max(np.abs(d))),
        "FP": int(np.sum(sel & ~true_supp)),
        "FN": int(np.sum(~sel & true_supp)),
        "sigma_hat": float(ctx.sigma_hat),
    }
    if gamma_raw is not None:
        g = gamma_raw - truth.gamma0
        gs, gt = gamma_raw != 0, truth.gamma0 != 0
        rec.update({
            "gamma_L2": float(np.linalg.norm(g, 2)),
            "gamma_L1": float(np.linalg.norm(g, 1)),
            "gamma_Linf": float(np.max(np.abs(g))),
            "FP_gamma": int(np.sum(gs & ~gt)),
            "FN_gamma": int(np.sum(~gs & gt)),
        })
    return rec


def fit_oracle(data: Dataset) -> tuple[CoefficientEstimate, float]:
    """Least squares on the true predictors and the true (raw) factors."""
    t = data.truth
    bs = np.flatnonzero(t.beta0)
    fs = t.factor_support
    A = np.hstack([data.X[:, bs], t.F_raw[:, fs]])
    coef, *_ = np.linalg.lstsq(A, data.y, rcond=None)
    beta = np.zeros_like(t.beta0)
    beta[bs] = coef[: bs.size]
    gamma = np.zeros_like(t.gamma0)
    gamma[fs] = coef[bs.size:]
    r = data.y - A @ coef
    n = data.y.shape[0]
    sigma = float(np.sqrt(r @ r / (n - A.shape[1] - 1)))
    est = CoefficientEstimate(beta, gamma, 0.0, float(r @ r / (2 * n)))
    return est, sigma


def run_replication(spec: ExampleSpec, rep: int, methods=METHODS, models=MODELS,
                    pop: Optional[Population] = None) -> list[dict]:
    """All requested (method, model) fits on one generated dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, rep]))
    pop = pop or build_population(spec)
    data = generate_dataset(spec, rng, pop)
    val = data.validation
    records = []
    for model in models:
        if model == "oracle":
            est, sigma = fit_oracle(data)
            rec = evaluate(est, data.truth, data.test, FitContext("oracle", sigma_hat=sigma))
            records.append({"rep": rep, "method": "oracle", "model": "oracle", **rec})
            continue
        K = spec.K if model == "M2" else 0
        for method in methods:
            cfg = NslConfig(num_factors=K, penalty=PenaltySpec(method), center_W=False,
                            seed=spec.seed + rep, n_lambda=spec.n_lambda, n_starts=spec.n_starts)
            res = fit_with_validation(data.y, data.X, data.W if K else None,
                                      val.y, val.X, val.W if K else None, cfg)
            ctx = FitContext(model, sigma_hat=res.sigma_hat)
            if K:
                s = res.scores
                ctx.directions, ctx.back_scalars = s.directions, s.back_scalars
                ctx.signs = np.sign(np.sum(s.directions * pop.eig_W.eigenvectors, axis=0))
                ctx.signs[ctx.signs == 0] = 1.0
            rec = evaluate(res.estimate, data.truth, data.test, ctx)
            records.append({"rep": rep, "method": method, "model": model,
                            "lambda": res.lambda_selected, **rec})
    return records


def summarize(records: Iterable[dict]) -> dict:
    """Mean and replication SD (ddof=1) of every measure per (method, model)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for rec in sorted(records, key=lambda r: (r["method"], r["model"], r["rep"])):
        groups.setdefault((rec["method"], rec["model"]), []).append(rec)
    out = {}
    for (method, model), recs in groups.items():
        entry = {"reps": len(recs)}
        for m in MEASURES:
            vals = np.array([r[m] for r in recs if r.get(m) is not None], dtype=float)
            if vals.size == 0:
                continue
            sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            entry[m] = {"mean": float(np.mean(vals)), "sd": sd}
        out[f"{method}/{model}"] = entry
    return out


@dataclass
class StudyResult:
    spec: ExampleSpec
    records: list
    summary: dict
    failures: list = field(default_factory=list)

    def measure(self, method: str, model: str, name: str) -> float:
        return self.summary[f"{method}/{model}"][name]["mean"]


def _worker_count(workers: Optional[int]) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("NSL_THREADS")
    return max(1, int(env)) if env else 1


def _safe_replication(args):
    spec, rep, methods, models = args
    try:
        return rep, run_replication(spec, rep, methods, models), None
    except (InputError, NumericError, np.linalg.LinAlgError) as exc:
        return rep, [], f"{type(exc).__name__}: {exc}"


def run_study(spec: ExampleSpec, methods=METHODS, models=MODELS, *, workers: Optional[int] = None,
              progress=None) -> StudyResult:
    """Replicate the study ``spec.reps`` times and aggregate the measures.

    Replication ``r`` draws from the substream seeded by ``(spec.seed, r)``,
    so results do not depend on scheduling. Failed replications are listed
    in ``failures`` and excluded from the summary.
    """
    if spec.reps < 2:
        raise InputError("a study needs at least two replications")
    methods, models = tuple(methods), tuple(models)
    unknown = set(methods) - set(METHODS) | set(models) - set(MODELS)
    if unknown:
        raise InputError(f"unknown methods/models: {sorted(unknown)}")
    jobs = [(spec, r, methods, models) for r in range(spec.reps)]
    nworkers = _worker_count(workers)
    results = []
    if nworkers == 1:
        pop = build_population(spec)
        for spec_, rep, meth, mod in jobs:
            try:
                results.append((rep, run_replication(spec_, rep, meth, mod, pop), None))
            except (InputError, NumericError, np.linalg.LinAlgError) as exc:
                results.append((rep, [], f"{type(exc).__name__}: {exc}"))
            if progress:
                progress(rep)
    else:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(_safe_replication, jobs))
    results.sort(key=lambda t: t[0])
    records = [rec for _, recs, _ in results for rec in recs]
    failures = [{"rep": rep, "error": err} for rep, _, err in results if err]
    return StudyResult(spec, records, summarize(records), failures)
