"""Deterministic-equivalent theory for in-context regression with linear attention.

Everything here works on the eigenvalues of ``C_train``. Test covariances
enter only through their diagonal in the train eigenbasis (for the
misalignment term) and their normalized trace (for the scalar term).

Notation used in variable names:

``m``          normalized trace of the resolvent equivalent ``F(z)``
``a_coeff``    ``1 - 1/kappa + (z/kappa) m``, the renormalization of ``C_train``
``b_coeff``    ``m/kappa + (z/kappa) m'``, the z-derivative of ``a_coeff``
``sigma``      effective noise ``(rho + c_train)/alpha + lambda_tilde``
``q``          pretraining-error ratio, ``e_idg / tau``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .covariance import CovarianceSpec, diagonal_in_basis
from .exceptions import (
    BoundaryError,
    ConvergenceError,
    DegenerateInputError,
    InvalidArgumentError,
    UnsupportedParameterError,
)

STIELTJES_TOL = 1e-13
STIELTJES_MAX_ITER = 10_000
DAMPING = 0.5


def _positive(name, value, allow_inf=False):
    value = float(value)
    if math.isnan(value) or value <= 0 or (math.isinf(value) and not allow_inf):
        raise InvalidArgumentError(f"{name} must be positive and finite, got {value!r}")
    return value


def _nonneg(name, value):
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise InvalidArgumentError(f"{name} must be finite and >= 0, got {value!r}")
    return value


@dataclass(frozen=True)
class ModelParams:
    """Asymptotic ratios of the problem.

    ``alpha = l/d``, ``alpha_test = l_test/d``, ``tau = n/d^2``,
    ``kappa = k/d`` (``math.inf`` allowed), ``rho`` the label-noise variance
    and ``lam`` the explicit ridge (0 selects the ridgeless limit).
    """

    alpha: float
    tau: float
    kappa: float
    rho: float = 0.0
    lam: float = 0.0
    alpha_test: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        object.__setattr__(self, "tau", _positive("tau", self.tau))
        object.__setattr__(self, "kappa", _positive("kappa", self.kappa, allow_inf=True))
        object.__setattr__(self, "rho", _nonneg("rho", self.rho))
        object.__setattr__(self, "lam", _nonneg("lam", self.lam))
        at = self.alpha if self.alpha_test is None else self.alpha_test
        object.__setattr__(self, "alpha_test", _positive("alpha_test", at))

    def replace(self, **changes) -> "ModelParams":
        data = asdict(self)
        data.update(changes)
        return ModelParams(**data)

    def finite_sizes(self, d: int) -> dict:
        """Integer sizes ``l, l_test, n, k`` implied at dimension ``d``."""
        sizes = {
            "ell": int(round(self.alpha * d)),
            "ell_test": int(round(self.alpha_test * d)),
            "n": int(round(self.tau * d * d)),
            "k": None if math.isinf(self.kappa) else max(1, int(round(self.kappa * d))),
        }
        for key in ("ell", "ell_test", "n"):
            if sizes[key] < 1:
                raise InvalidArgumentError(f"{key} rounds to {sizes[key]} at d={d}")
        return sizes

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "alpha_test": self.alpha_test, "tau": self.tau,
                "kappa": self.kappa, "rho": self.rho, "lambda": self.lam}

    @classmethod
    def from_dict(cls, data) -> "ModelParams":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        kappa = data.get("kappa")
        if isinstance(kappa, str) and kappa.lower() in ("inf", "infinity"):
            data["kappa"] = math.inf
        return cls(**data)


@dataclass(frozen=True)
class SolverSolution:
    sigma: float
    lambda_tilde: float
    m: float
    m_prime: float
    a_coeff: float
    b_coeff: float
    f_spectrum: np.ndarray
    f_prime_spectrum: np.ndarray
    q: float
    residuals: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("sigma", "lambda_tilde", "m", "m_prime", "a_coeff", "b_coeff", "q")}
        out["f_spectrum"] = self.f_spectrum.tolist()
        out["f_prime_spectrum"] = self.f_prime_spectrum.tolist()
        out["residuals"] = dict(self.residuals)
        out["iterations"] = dict(self.iterations)
        return out


@dataclass(frozen=True)
class TheoryErrors:
    e_icl: float
    e_idg: float
    e_scalar: float
    e_misalign: float
    k_spectrum: np.ndarray
    solution: Optional[SolverSolution] = None

    def to_dict(self, include_solution=True) -> dict:
        out = {"e_icl": self.e_icl, "e_idg": self.e_idg, "e_scalar": self.e_scalar,
               "e_misalign": self.e_misalign, "k_spectrum": self.k_spectrum.tolist()}
        if include_solution and self.solution is not None:
            out["solution"] = self.solution.to_dict()
        return out


# --------------------------------------------------------------------------
# resolvent equivalent


def _spectrum(spectrum) -> np.ndarray:
    if isinstance(spectrum, CovarianceSpec):
        return spectrum.spectrum
    lam = np.asarray(spectrum, dtype=float)
    if lam.ndim != 1 or lam.size == 0 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise InvalidArgumentError("spectrum must be a non-empty vector of finite values >= 0")
    return lam


def _a_of(m, kappa, z):
    if math.isinf(kappa):
        return 1.0
    return 1.0 - 1.0 / kappa + (z / kappa) * m


def _fixed_point_map(m, lam, kappa, z):
    a = _a_of(m, kappa, z)
    if a < 0:
        return math.nan, a
    return float(np.mean(1.0 / (a * lam + z))), a


def _a_residual(a, lam, kappa, z):
    """Relative Newton step of the fixed point written in ``A``.

    ``h(A) = mean(z/(A lam + z)) - (1 - kappa + kappa A)`` vanishes at the
    solution; ``|h/h'|/A`` estimates the relative error in ``A`` (and hence in
    ``M``) without the cancellation that plagues ``1 - 1/kappa + (z/kappa) M``.
    """
    if a <= 0:
        return math.inf
    den = a * lam + z
    h = float(np.mean(z / den)) - (1.0 - kappa + kappa * a)
    hp = -float(np.mean(z * lam / den ** 2)) - kappa
    return abs(h / hp) / a


def _bracketed_a(lam, kappa, z):
    """Solve for ``A`` directly: ``mean(z/(A lam + z)) = 1 - kappa + kappa A``.

    The left side decreases and the right side increases in ``A``, so the
    root in ``[max(0, 1 - 1/kappa), 1]`` is unique. Working in ``A`` avoids the
    cancellation in ``1 - 1/kappa + (z/kappa) M`` when ``A`` is tiny.
    """
    lo = max(0.0, 1.0 - 1.0 / kappa)

    def h(a):
        return float(np.mean(z / (a * lam + z))) - (1.0 - kappa + kappa * a)

    if h(lo) <= 0:
        return lo
    if h(1.0) >= 0:
        return 1.0
    return brentq(h, lo, 1.0, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def _solve_m(lam, kappa, z, tol=STIELTJES_TOL, max_iter=STIELTJES_MAX_ITER):
    """Return ``(m, a, residual, iterations)``."""
    if math.isinf(kappa):
        m = float(np.mean(1.0 / (lam + z)))
        return m, 1.0, 0.0, 0
    m = 1.0 / (z + float(np.mean(lam)))
    best = math.inf
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        g, a = _fixed_point_map(m, lam, kappa, z)
        if not math.isfinite(g) or a < 0:
            break
        res = _a_residual(a, lam, kappa, z)
        if res <= tol:
            return float(np.mean(1.0 / (a * lam + z))), a, res, it
        # divergence or a very slow contraction: hand over to the bracket
        if res < best * 0.999:
            best, stall = res, 0
        else:
            stall += 1
            if stall > 50:
                break
        m = (1 - DAMPING) * m + DAMPING * g
    a = _bracketed_a(lam, kappa, z)
    m = float(np.mean(1.0 / (a * lam + z)))
    res = _a_residual(a, lam, kappa, z)
    if res > 10 * tol:
        raise ConvergenceError(
            f"resolvent fixed point did not converge (kappa={kappa}, z={z})",
            residual=res, iterations=it)
    return m, a, res, it


def stieltjes_m(spectrum, kappa: float, z: float) -> tuple:
    """Solve ``M = mean(1 / (A lam_i + z))`` with ``A = 1 - 1/kappa + (z/kappa) M``.

    Returns ``(m, a_coeff)`` with ``m = mean(1/(a_coeff lam + z))``. The
    relative residual of ``a_coeff`` is below ``1e-13`` on return
    (``ConvergenceError`` otherwise).
    """
    lam = _spectrum(spectrum)
    kappa = _positive("kappa", kappa, allow_inf=True)
    z = _positive("z", z)
    m, a, _, _ = _solve_m(lam, kappa, z)
    return m, a


def stieltjes_m_prime(spectrum, kappa: float, z: float, m: float, a_coeff: float) -> tuple:
    """Exact z-derivative of ``M`` from the linearized fixed point.

    Returns ``(m_prime, b_coeff)`` with ``b_coeff = m/kappa + (z/kappa) m_prime``.
    """
    lam = _spectrum(spectrum)
    kappa = _positive("kappa", kappa, allow_inf=True)
    den = a_coeff * lam + z
    if np.any(den <= 0) or not np.all(np.isfinite(den)):
        raise DegenerateInputError("resolvent denominator vanished")
    s = float(np.mean(1.0 / den ** 2))
    if math.isinf(kappa):
        return -s, 0.0
    t = float(np.mean(lam / den ** 2))
    lhs = 1.0 + (z / kappa) * t
    if not math.isfinite(lhs) or lhs == 0:
        raise DegenerateInputError("derivative equation is degenerate")
    mp = -((m / kappa) * t + s) / lhs
    return mp, m / kappa + (z / kappa) * mp


def isotropic_stieltjes(c: float, kappa: float, z: float) -> float:
    """Closed form of ``M`` when ``C_train = c I``."""
    if math.isinf(kappa):
        return 1.0 / (c + z)
    # root of (cz/kappa) M^2 + b M - 1 = 0, picking the cancellation-free form
    b = z + c - c / kappa
    disc = math.sqrt(b * b + 4.0 * c * z / kappa)
    if b >= 0:
        return 2.0 / (b + disc)
    return (disc - b) * kappa / (2.0 * c * z)


def resolvent_terms(spectrum, kappa, z):
    """``(m, m', a, b, f, f')`` at ridge ``z`` for a train spectrum."""
    lam = _spectrum(spectrum)
    m, a, res, it = _solve_m(lam, kappa, z)
    mp, b = stieltjes_m_prime(lam, kappa, z, m, a)
    f = 1.0 / (a * lam + z)
    fp = -(b * lam + 1.0) * f * f
    return m, mp, a, b, f, fp, res, it


# --------------------------------------------------------------------------
# outer effective-ridge equation


def _expand_root(phi, lo, hi, max_expand=200):
    f_hi = phi(hi)
    n = 0
    while f_hi <= 0:
        hi *= 2.0
        f_hi = phi(hi)
        n += 1
        if n > max_expand or not math.isfinite(f_hi):
            raise ConvergenceError("could not bracket the effective ridge", residual=f_hi,
                                   iterations=n)
    return brentq(phi, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def solve_lambda_tilde(params: ModelParams, train: CovarianceSpec) -> float:
    lam = train.spectrum
    sigma0 = (params.rho + train.trace) / params.alpha
    if sigma0 <= 0:
        raise InvalidArgumentError("rho + tr[C_train] must be positive")
    tau, ridge, kappa = params.tau, params.lam, params.kappa
    if ridge == 0:
        if tau == 1:
            raise UnsupportedParameterError(
                "ridgeless threshold unsupported: tau == 1 requires lambda > 0")
        if tau > 1:
            return 0.0

        def phi(lt):
            return lt * _solve_m(lam, kappa, sigma0 + lt)[0] - (1.0 - tau)

        root = _expand_root(phi, 0.0, max(1.0, sigma0))
    else:
        def phi(lt):
            return lt * _solve_m(lam, kappa, sigma0 + lt)[0] - ridge * tau / lt - (1.0 - tau)

        # lambda_tilde * M <= 1, so phi < 0 below lambda
        root = _expand_root(phi, 0.5 * ridge, max(1.0, 2.0 * ridge))
    return root


def solve_self_consistent(params: ModelParams, train: CovarianceSpec) -> SolverSolution:
    """Effective ridge, effective noise and resolvent quantities at ``sigma``."""
    lt = solve_lambda_tilde(params, train)
    sigma = (params.rho + train.trace) / params.alpha + lt
    m, mp, a, b, f, fp, res, it = resolvent_terms(train.spectrum, params.kappa, sigma)
    num = params.rho + sigma - sigma ** 2 * m - lt * (1 - 2 * sigma * m - sigma ** 2 * mp)
    den = params.tau - (1 - 2 * lt * m - lt ** 2 * mp)
    if den == 0 or not math.isfinite(den):
        raise DegenerateInputError("pretraining-error denominator vanished")
    if params.lam == 0:
        lt_res = abs(lt * m - (1 - params.tau)) if params.tau < 1 else 0.0
    else:
        lt_res = abs(lt * m - params.lam * params.tau / lt - (1 - params.tau))
    return SolverSolution(
        sigma=sigma, lambda_tilde=lt, m=m, m_prime=mp, a_coeff=a, b_coeff=b,
        f_spectrum=f, f_prime_spectrum=fp, q=num / den,
        residuals={"stieltjes": res, "lambda_tilde": lt_res},
        iterations={"stieltjes": it},
    )


# --------------------------------------------------------------------------
# error formulas


def k_spectrum(solution: SolverSolution) -> np.ndarray:
    s = solution
    return s.q * s.f_spectrum + (s.q * s.lambda_tilde - s.sigma ** 2) * s.f_prime_spectrum


def scalar_error(solution: SolverSolution, params: ModelParams, c_test: float) -> float:
    s = solution
    bracket = (1 + (s.q - 2 * s.sigma) * s.m
               + (s.q * s.lambda_tilde - s.sigma ** 2) * s.m_prime)
    return params.rho + (params.rho + c_test) / params.alpha_test * bracket


def errors_from_solution(solution, params, train, test) -> TheoryErrors:
    if test.dim != train.dim:
        raise InvalidArgumentError(f"dimension mismatch: train {train.dim} vs test {test.dim}")
    kspec = k_spectrum(solution)
    e_mis = float(np.mean(diagonal_in_basis(test, train) * kspec))
    e_sc = scalar_error(solution, params, test.trace)
    return TheoryErrors(e_icl=e_sc + e_mis, e_idg=params.tau * solution.q, e_scalar=e_sc,
                        e_misalign=e_mis, k_spectrum=kspec, solution=solution)


def theory_errors(params: ModelParams, train: CovarianceSpec, test: CovarianceSpec,
                  solution: Optional[SolverSolution] = None) -> TheoryErrors:
    """ICL/IDG error decomposition for one ``(C_train, C_test, params)`` triple."""
    if solution is None:
        solution = solve_self_consistent(params, train)
    return errors_from_solution(solution, params, train, test)


def gamma_equivalent_diag(solution: SolverSolution) -> np.ndarray:
    """Diagonal of the first block of ``Gamma*`` in the train eigenbasis."""
    return 1.0 - solution.sigma * solution.f_spectrum


def context_length_curve(params: ModelParams, train: CovarianceSpec, test: CovarianceSpec,
                         alpha_test_grid: Sequence[float]) -> list:
    """``e_icl`` as a function of test context length only."""
    grid = [float(a) for a in alpha_test_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise InvalidArgumentError("alpha_test grid must be sorted ascending")
    sol = solve_self_consistent(params, train)
    return [(a, errors_from_solution(sol, params.replace(alpha_test=a), train, test).e_icl)
            for a in grid]


# --------------------------------------------------------------------------
# infinite-data / infinite-context limit


def _limit_x(lam, target):
    """``x`` with ``mean(1/(x lam + 1)) == target``."""

    def h(x):
        return float(np.mean(1.0 / (x * lam + 1.0))) - target

    hi = 1.0
    while h(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise ConvergenceError("limit equation could not be bracketed")
    return brentq(h, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def icl_error_limit(gamma_ratio: float, kappa: float, train: CovarianceSpec,
                    test: CovarianceSpec, rho: float) -> float:
    """``e_icl`` as ``alpha, tau -> inf`` with ``alpha / tau = gamma_ratio``.

    Below ``kappa = rank/d`` the task-resolution scale ``x`` is finite; above
    it ``x = inf`` and only the null space of ``C_train`` contributes.
    """
    gamma_ratio = _positive("gamma_ratio", gamma_ratio)
    kappa = _positive("kappa", kappa, allow_inf=True)
    rho = _nonneg("rho", rho)
    lam = train.spectrum
    r = train.rank() / train.dim
    pref = 1.0 + rho * gamma_ratio / (rho + train.trace)
    diag = diagonal_in_basis(test, train)
    null = lam <= 1e-12 * lam[0]

    def above():
        return rho + pref * float(np.mean(diag * null))

    def below():
        x = _limit_x(lam, 1.0 - kappa)
        return rho + pref * float(np.mean(diag / (x * lam + 1.0)))

    if kappa == r:
        value = above()
        raise BoundaryError(f"kappa equals rank fraction {r}", below=value, above=value)
    return below() if kappa < r else above()
