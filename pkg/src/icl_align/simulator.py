"""Finite-size Monte Carlo of the reduced linear-attention model.

Contexts are never materialized: each one is reduced on the fly to its query
token ``x`` (length d), the summary ``h = [u; v]`` (length d+1) and the query
label. The regression feature is ``vec(H) = kron(x, h)`` (row-major vec of
``x h^T``), so Gram matrices and predictions are built from these factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.linalg.blas

from .covariance import CovarianceSpec
from .exceptions import IllConditionedError, InvalidArgumentError
from .theory import ModelParams

RIDGELESS_PROXY = 1e-5
CHUNK = 512

# purpose tags for RNG substreams
_TRAIN, _TEST_ICL, _TEST_IDG = 0, 1, 2

SIM_FIELDS = ("d", "alpha", "alpha_test", "tau", "kappa", "rho", "lambda", "train_label",
              "test_label", "mode", "mse_mean", "mse_stderr", "population_mse",
              "replicates", "seed")


@dataclass(frozen=True)
class SimConfig:
    d: int
    params: ModelParams
    train: CovarianceSpec
    test: CovarianceSpec
    n_test_contexts: int = 2000
    replicates: int = 20
    seed: int = 0
    ridge: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.d, bool) or int(self.d) != self.d or self.d < 1:
            raise InvalidArgumentError(f"d must be a positive integer, got {self.d!r}")
        if self.train.dim != self.d or self.test.dim != self.d:
            raise InvalidArgumentError(
                f"covariance dims (train {self.train.dim}, test {self.test.dim}) != d={self.d}")
        if self.n_test_contexts < 1 or self.replicates < 1:
            raise InvalidArgumentError("n_test_contexts and replicates must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")
        if self.ridge is not None and not self.ridge > 0:
            raise InvalidArgumentError("ridge must be positive")
        # raises on sizes that round to zero
        self.params.finite_sizes(self.d)

    @property
    def sizes(self) -> dict:
        return self.params.finite_sizes(self.d)

    @property
    def ell(self) -> int:
        return self.sizes["ell"]

    @property
    def ell_test(self) -> int:
        return self.sizes["ell_test"]

    @property
    def n(self) -> int:
        return self.sizes["n"]

    @property
    def k(self) -> Optional[int]:
        return self.sizes["k"]

    @property
    def lambda_used(self) -> float:
        if self.ridge is not None:
            return float(self.ridge)
        return self.params.lam if self.params.lam > 0 else RIDGELESS_PROXY


def substream(seed: int, replicate: int, purpose: int, chunk: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, replicate, purpose, chunk) cell."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(purpose), int(chunk)))
    return np.random.default_rng(ss)


def sample_tasks(cov: CovarianceSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` rows drawn from ``N(0, cov)`` via its spectral square root."""
    g = rng.standard_normal((count, cov.dim)) * np.sqrt(cov.spectrum)
    return g if cov.basis is None else g @ cov.basis.T


def build_feature(context_tokens, context_targets, d: int, ell: int) -> np.ndarray:
    """``H_Z`` for one context: ``x_q [ (d/l) sum y_i x_i^T , (1/l) sum y_i^2 ]``.

    ``context_tokens`` holds the ``l`` labelled tokens followed by the query.
    """
    x = np.asarray(context_tokens, dtype=float).reshape(ell + 1, d)
    y = np.asarray(context_targets, dtype=float).reshape(ell)
    h = _summary(x[None, :ell], y[None, :], d, ell)[0]
    return np.outer(x[ell], h)


def _summary(xs, ys, d, ell):
    """Row-wise ``[ (d/l) X^T y ; (1/l) |y|^2 ]`` for batched contexts."""
    u = np.einsum("cld,cl->cd", xs, ys) * (d / ell)
    v = np.einsum("cl,cl->c", ys, ys) / ell
    return np.concatenate([u, v[:, None]], axis=1)


def _contexts(w, ell, rho, rng):
    """Draw contexts for per-context task rows ``w``; return queries, summaries, labels."""
    c, d = w.shape
    xs = rng.standard_normal((c, ell + 1, d)) / math.sqrt(d)
    noise = rng.standard_normal((c, ell + 1)) * math.sqrt(rho)
    ys = np.einsum("cld,cd->cl", xs, w) + noise
    return xs[:, ell], _summary(xs[:, :ell], ys[:, :ell], d, ell), ys[:, ell]


def features_from(queries: np.ndarray, summaries: np.ndarray) -> np.ndarray:
    """Rows ``vec(x h^T)`` with row-major vec."""
    c = queries.shape[0]
    return (queries[:, :, None] * summaries[:, None, :]).reshape(c, -1)


@dataclass(frozen=True, eq=False)
class SimBatch:
    """One pretraining batch in factored form."""

    tasks: np.ndarray
    assignments: np.ndarray
    queries: np.ndarray
    summaries: np.ndarray
    targets: np.ndarray
    infinite_diversity: bool = False

    @property
    def n(self) -> int:
        return self.targets.size

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    @cached_property
    def features(self) -> np.ndarray:
        return features_from(self.queries, self.summaries)

    @cached_property
    def b_k(self) -> np.ndarray:
        return self.tasks.mean(axis=0)

    @cached_property
    def R_k(self) -> np.ndarray:
        r = self.tasks.T @ self.tasks / self.tasks.shape[0]
        return (r + r.T) / 2


def sample_batch(config: SimConfig, replicate: int = 0) -> SimBatch:
    """Pretraining batch for one replicate.

    With finite ``kappa`` the ``k`` tasks are drawn first and each context
    picks one uniformly. At ``kappa = inf`` every context gets a fresh task
    and ``tasks`` holds all of them.
    """
    d, n, ell, k = config.d, config.n, config.ell, config.k
    rho = config.params.rho
    head = substream(config.seed, replicate, _TRAIN, 0)
    if k is None:
        tasks = None
        assignments = np.arange(n)
    else:
        tasks = sample_tasks(config.train, k, head)
        assignments = head.integers(0, k, size=n)
    queries = np.empty((n, d))
    summaries = np.empty((n, d + 1))
    targets = np.empty(n)
    all_tasks = [] if tasks is None else None
    for j, lo in enumerate(range(0, n, CHUNK)):
        hi = min(n, lo + CHUNK)
        rng = substream(config.seed, replicate, _TRAIN, j + 1)
        if tasks is None:
            w = sample_tasks(config.train, hi - lo, rng)
            all_tasks.append(w)
        else:
            w = tasks[assignments[lo:hi]]
        queries[lo:hi], summaries[lo:hi], targets[lo:hi] = _contexts(w, ell, rho, rng)
    if tasks is None:
        tasks = np.concatenate(all_tasks, axis=0)
    return SimBatch(tasks, assignments, queries, summaries, targets,
                    infinite_diversity=k is None)


# --------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class GammaEstimator:
    matrix: np.ndarray
    lambda_used: float
    solver: str = "primal"

    def predict(self, queries: np.ndarray, summaries: np.ndarray) -> np.ndarray:
        """``tr(Gamma H^T) = x^T Gamma h`` row by row."""
        return np.einsum("cd,cd->c", queries, summaries @ self.matrix.T)


def _sym_solve(a, b):
    """Solve with the lower triangle of symmetric ``a``; Cholesky first."""
    try:
        c, low = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return scipy.linalg.cho_solve((c, low), b, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    ev = np.linalg.eigvalsh(a, UPLO="L")
    scale = np.max(np.abs(ev))
    tiny = np.min(np.abs(ev))
    cond = math.inf if tiny == 0 else scale / tiny
    if not math.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise IllConditionedError(f"normal equations are numerically singular (cond={cond:.3g})",
                                  condition=cond)
    return scipy.linalg.solve(a, b, assume_a="sym", lower=True, check_finite=False)


def _primal(queries, summaries, targets, reg):
    p = queries.shape[1] * summaries.shape[1]
    gram = np.zeros((p, p), order="F")
    rhs = np.zeros(p)
    step = 4 * CHUNK
    for lo in range(0, targets.size, step):
        f = features_from(queries[lo:lo + step], summaries[lo:lo + step])
        # f.T is Fortran-ordered, so syrk accumulates F^T F without a copy
        gram = scipy.linalg.blas.dsyrk(1.0, f.T, beta=1.0, c=gram, lower=1, overwrite_c=1)
        rhs += f.T @ targets[lo:lo + step]
    gram[np.diag_indices(p)] += reg
    return _sym_solve(gram, rhs)


def _dual(queries, summaries, targets, reg):
    kern = (queries @ queries.T) * (summaries @ summaries.T)
    kern[np.diag_indices(targets.size)] += reg
    coef = _sym_solve(kern, targets)
    return ((queries * coef[:, None]).T @ summaries).ravel()


def fit_gamma(batch: SimBatch, d: int, n: int, lam: float, solver: str = "auto") -> GammaEstimator:
    """Closed-form ridge solution ``vec(Gamma) = ((n/d) lam I + F^T F)^{-1} F^T y``.

    ``solver="auto"`` uses the ``p x p`` normal equations when ``n >= p`` and
    the ``n x n`` kernel system otherwise; both give the same minimizer.
    """
    if not lam > 0:
        raise InvalidArgumentError("ridge must be positive; use 1e-5 as the ridgeless proxy")
    if batch.d != d or batch.n != n:
        raise InvalidArgumentError(f"batch has d={batch.d}, n={batch.n}; expected d={d}, n={n}")
    p = d * (d + 1)
    if solver == "auto":
        solver = "primal" if n >= p else "dual"
    reg = (n / d) * lam
    if solver == "primal":
        vec = _primal(batch.queries, batch.summaries, batch.targets, reg)
    elif solver == "dual":
        vec = _dual(batch.queries, batch.summaries, batch.targets, reg)
    else:
        raise InvalidArgumentError(f"unknown solver {solver!r}")
    gamma = vec.reshape(d, d + 1)
    if not np.all(np.isfinite(gamma)):
        raise IllConditionedError("fitted Gamma has non-finite entries", condition=math.inf)
    return GammaEstimator(gamma, float(lam), solver)


# --------------------------------------------------------------------------
# population risk


@dataclass(frozen=True)
class PopulationMoments:
    """Response matrices of the population risk ``rho + c - 2 tr(G A^T) + tr(G B G^T)``.

    Traces are normalized by d. With ``finite_size=True`` the context-length
    corrections (``1/l`` terms) and the task-norm fluctuations are kept, so
    the risk is exact at any size; otherwise only the leading terms remain.
    """

    a_icl: Optional[np.ndarray] = None
    b_icl: Optional[np.ndarray] = None
    c_icl: float = math.nan
    a_idg: Optional[np.ndarray] = None
    b_idg: Optional[np.ndarray] = None
    c_idg: float = math.nan

    @classmethod
    def for_icl(cls, test: CovarianceSpec, rho: float, ell_test: int,
                finite_size: bool = True) -> "PopulationMoments":
        d = test.dim
        cmat = test.matrix()
        c = test.trace
        a = np.zeros((d, d + 1))
        a[:, :d] = cmat
        b = np.zeros((d + 1, d + 1))
        if finite_size:
            second = (c + rho) ** 2 + 2.0 * float(np.sum(test.spectrum ** 2)) / d ** 2
            b[:d, :d] = (1 + 1 / ell_test) * cmat + (d / ell_test) * (c + rho) * np.eye(d)
            b[d, d] = (1 + 2 / ell_test) * second
        else:
            b[:d, :d] = cmat + (d / ell_test) * (c + rho) * np.eye(d)
            b[d, d] = (c + rho) ** 2
        return cls(a_icl=a, b_icl=(b + b.T) / 2, c_icl=c)

    @classmethod
    def for_idg(cls, tasks: np.ndarray, rho: float, ell: int,
                finite_size: bool = True) -> "PopulationMoments":
        k, d = tasks.shape
        r = tasks.T @ tasks / k
        r = (r + r.T) / 2
        c = float(np.trace(r)) / d
        a = np.zeros((d, d + 1))
        b = np.zeros((d + 1, d + 1))
        a[:, :d] = r
        if finite_size:
            s = np.einsum("kd,kd->k", tasks, tasks) / d + rho
            cross = (s[:, None] * tasks).mean(axis=0)
            a[:, d] = cross
            b[:d, :d] = (1 + 1 / ell) * r + (d / ell) * (c + rho) * np.eye(d)
            b[:d, d] = b[d, :d] = (1 + 2 / ell) * cross
            b[d, d] = (1 + 2 / ell) * float(np.mean(s ** 2))
        else:
            bk = tasks.mean(axis=0)
            a[:, d] = (c + rho) * bk
            b[:d, :d] = r + (d / ell) * (c + rho) * np.eye(d)
            b[:d, d] = b[d, :d] = (c + rho) * bk
            b[d, d] = (c + rho) ** 2
        return cls(a_idg=a, b_idg=b, c_idg=c)


def population_test_error(gamma, moments: PopulationMoments, mode: str,
                          c_trace: Optional[float] = None, rho: float = 0.0) -> float:
    """Exact expected test loss of a fixed ``Gamma`` under the given moments."""
    g = gamma.matrix if isinstance(gamma, GammaEstimator) else np.asarray(gamma, dtype=float)
    mode = mode.upper()
    if mode == "ICL":
        a, b, c = moments.a_icl, moments.b_icl, moments.c_icl
    elif mode == "IDG":
        a, b, c = moments.a_idg, moments.b_idg, moments.c_idg
    else:
        raise InvalidArgumentError(f"mode must be ICL or IDG, got {mode!r}")
    if a is None:
        raise InvalidArgumentError(f"moments were not built for {mode}")
    if g.shape != a.shape:
        raise InvalidArgumentError(f"Gamma shape {g.shape} does not match moments {a.shape}")
    if c_trace is not None:
        c = float(c_trace)
    d = g.shape[0]
    return float(rho + c - 2.0 * np.sum(g * a) / d + np.sum((g @ b) * g) / d)


# --------------------------------------------------------------------------
# empirical risk


@dataclass(frozen=True)
class SimResult:
    mse_mean: float
    mse_stderr: float
    population_mse: float
    per_replicate: Sequence[float] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"mse_mean": self.mse_mean, "mse_stderr": self.mse_stderr,
                "population_mse": self.population_mse,
                "per_replicate": list(self.per_replicate)}


def _test_losses(gamma: GammaEstimator, config: SimConfig, mode: str, tasks, rng_key,
                 n_contexts: int) -> np.ndarray:
    seed, replicate = rng_key
    rho = config.params.rho
    purpose = _TEST_ICL if mode == "ICL" else _TEST_IDG
    ell = config.ell_test if mode == "ICL" else config.ell
    out = np.empty(n_contexts)
    for j, lo in enumerate(range(0, n_contexts, CHUNK)):
        hi = min(n_contexts, lo + CHUNK)
        rng = substream(seed, replicate, purpose, j)
        if mode == "ICL":
            w = sample_tasks(config.test, hi - lo, rng)
        else:
            w = tasks[rng.integers(0, tasks.shape[0], size=hi - lo)]
        q, h, y = _contexts(w, ell, rho, rng)
        out[lo:hi] = (gamma.predict(q, h) - y) ** 2
    return out


def empirical_test_error(gamma: GammaEstimator, config: SimConfig, mode: str = "ICL",
                         batch_tasks: Optional[np.ndarray] = None, replicate: int = 0,
                         n_contexts: Optional[int] = None,
                         finite_size: bool = True) -> SimResult:
    """Monte Carlo test MSE of a fixed ``Gamma``.

    ICL contexts draw fresh tasks from ``C_test`` and have length ``l_test``.
    IDG contexts reuse ``batch_tasks`` (the pretraining tasks) at the
    pretraining length ``l``. The standard error is over test contexts.
    """
    mode = mode.upper()
    if mode not in ("ICL", "IDG"):
        raise InvalidArgumentError(f"mode must be ICL or IDG, got {mode!r}")
    if mode == "IDG" and batch_tasks is None:
        raise InvalidArgumentError("IDG mode needs the pretraining task set")
    n_ctx = config.n_test_contexts if n_contexts is None else int(n_contexts)
    losses = _test_losses(gamma, config, mode, batch_tasks, (config.seed, replicate), n_ctx)
    if mode == "ICL":
        moments = PopulationMoments.for_icl(config.test, config.params.rho, config.ell_test,
                                            finite_size)
    else:
        moments = PopulationMoments.for_idg(np.asarray(batch_tasks), config.params.rho,
                                            config.ell, finite_size)
    pop = population_test_error(gamma, moments, mode, rho=config.params.rho)
    se = float(losses.std(ddof=1) / math.sqrt(n_ctx)) if n_ctx > 1 else 0.0
    mean = float(losses.mean())
    return SimResult(mean, se, pop, (mean,))


@dataclass(frozen=True)
class ReplicateRun:
    """Results of ``simulate_many``: one ``SimResult`` per requested test."""

    results: dict
    mean_gamma: Optional[np.ndarray] = None


def simulate_many(config: SimConfig, tests: Sequence = (("ICL", None),),
                  keep_gamma: bool = False, solver: str = "auto") -> ReplicateRun:
    """Fit one ``Gamma`` per replicate and score it on several test settings.

    ``tests`` holds ``(mode, test_cov)`` pairs; ``test_cov=None`` means the
    config's own test covariance (ignored for IDG). Sharing the fit keeps the
    columns of one sweep cell comparable.
    """
    per = {i: [] for i in range(len(tests))}
    pops = {i: [] for i in range(len(tests))}
    gamma_sum = None
    lam = config.lambda_used
    for rep in range(config.replicates):
        batch = sample_batch(config, rep)
        gamma = fit_gamma(batch, config.d, config.n, lam, solver=solver)
        if keep_gamma:
            gamma_sum = gamma.matrix.copy() if gamma_sum is None else gamma_sum + gamma.matrix
        for i, (mode, cov) in enumerate(tests):
            cfg = config if cov is None else _with_test(config, cov)
            r = empirical_test_error(gamma, cfg, mode, batch.tasks, replicate=rep)
            per[i].append(r.mse_mean)
            pops[i].append(r.population_mse)
    results = {}
    for i, (mode, cov) in enumerate(tests):
        vals = np.asarray(per[i])
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        results[i] = SimResult(float(vals.mean()), se, float(np.mean(pops[i])), tuple(per[i]))
    mean_gamma = None if gamma_sum is None else gamma_sum / config.replicates
    return ReplicateRun(results, mean_gamma)


def _with_test(config: SimConfig, test: CovarianceSpec) -> SimConfig:
    return SimConfig(config.d, config.params, config.train, test, config.n_test_contexts,
                     config.replicates, config.seed, config.ridge)


def run_simulation(config: SimConfig, mode: str = "ICL") -> SimResult:
    """Replicate-averaged test error; the standard error is across replicates."""
    return simulate_many(config, ((mode, None),)).results[0]


def sim_row(config: SimConfig, mode: str, result: SimResult) -> dict:
    p = config.params
    return {"d": config.d, "alpha": p.alpha, "alpha_test": p.alpha_test, "tau": p.tau,
            "kappa": p.kappa, "rho": p.rho, "lambda": config.lambda_used,
            "train_label": config.train.label, "test_label": config.test.label,
            "mode": mode.upper(), "mse_mean": result.mse_mean,
            "mse_stderr": result.mse_stderr, "population_mse": result.population_mse,
            "replicates": config.replicates, "seed": config.seed}
