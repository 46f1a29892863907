"""Alignment metrics between train and test task covariances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .covariance import CovarianceSpec, diagonal_in_basis, project_onto_basis
from .exceptions import InvalidArgumentError
from .theory import ModelParams, SolverSolution, errors_from_solution, solve_self_consistent

UNDEFINED = math.nan

ALIGNMENT_FIELDS = ("kappa", "tau", "alpha", "rho", "test_label", "e_icl", "e_misalign",
                    "trace_test_F", "trace_test_inv_train", "inv_cka", "ruhe_lower",
                    "ruhe_upper")


@dataclass(frozen=True)
class AlignmentReport:
    """Misalignment error next to the competing alignment measures.

    ``trace_test_inv_train`` uses a thresholded pseudo-inverse when the train
    covariance is singular; ``train_singular`` flags that case.
    """

    e_misalign: float
    trace_test_F: float
    trace_test_inv_train: float
    cka: float
    ruhe_lower: float
    ruhe_upper: float
    e_icl: float = UNDEFINED
    train_singular: bool = False
    params: Optional[ModelParams] = None
    test_label: str = ""

    @property
    def inv_cka(self) -> float:
        return math.inf if self.cka == 0 else 1.0 / self.cka

    def to_row(self) -> dict:
        p = self.params
        return {
            "kappa": p.kappa if p else UNDEFINED,
            "tau": p.tau if p else UNDEFINED,
            "alpha": p.alpha if p else UNDEFINED,
            "rho": p.rho if p else UNDEFINED,
            "test_label": self.test_label,
            "e_icl": self.e_icl,
            "e_misalign": self.e_misalign,
            "trace_test_F": self.trace_test_F,
            "trace_test_inv_train": self.trace_test_inv_train,
            "inv_cka": self.inv_cka,
            "ruhe_lower": self.ruhe_lower,
            "ruhe_upper": self.ruhe_upper,
        }


def _square(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"{name} must be a square matrix")
    return a


def _center(a):
    n = a.shape[0]
    h = np.eye(n) - 1.0 / n
    return h @ a @ h


def cka(a, b, centered: bool = False) -> float:
    """Linear CKA ``<A, B>_F / (||A||_F ||B||_F)`` on the matrices themselves.

    With ``centered=True`` both matrices are double-centered first, which is
    the usual representation-similarity variant.
    """
    a = _square(a, "a")
    b = _square(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    if centered:
        a, b = _center(a), _center(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgumentError("cka is undefined for a zero matrix")
    return float(np.sum(a * b) / (na * nb))


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns ``nan`` when either sequence is constant.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise InvalidArgumentError("spearman needs two 1-d sequences of equal length")
    if x.size < 2:
        raise InvalidArgumentError("spearman needs at least two points")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return UNDEFINED
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def ruhe_bounds(a_spectrum, b_spectrum) -> tuple:
    """Bounds on ``(1/d) tr(AB)`` from eigenvalues sorted non-increasing.

    The lower bound pairs opposite orders, the upper bound the same order.
    """
    a = np.asarray(a_spectrum, dtype=float)
    b = np.asarray(b_spectrum, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise InvalidArgumentError("spectra must be 1-d and of equal length")
    return float(np.mean(a * b[::-1])), float(np.mean(a * b))


def _trace_inv(train: CovarianceSpec, diag_test: np.ndarray):
    lam = train.spectrum
    cut = 1e-12 * lam[0] if lam[0] > 0 else 0.0
    keep = lam > cut
    singular = not bool(np.all(keep))
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / lam[keep]
    return float(np.mean(diag_test * inv)), singular


def alignment_report(params: ModelParams, train: CovarianceSpec, test: CovarianceSpec,
                     solution: Optional[SolverSolution] = None,
                     centered: bool = False) -> AlignmentReport:
    if test.dim != train.dim:
        raise InvalidArgumentError(f"dimension mismatch: train {train.dim} vs test {test.dim}")
    if solution is None:
        solution = solve_self_consistent(params, train)
    errs = errors_from_solution(solution, params, train, test)
    diag = diagonal_in_basis(test, train)
    tr_f = float(np.mean(diag * solution.f_spectrum))
    tr_inv, singular = _trace_inv(train, diag)
    try:
        sim = cka(train.matrix(), test.matrix(), centered=centered)
    except InvalidArgumentError:
        sim = UNDEFINED
    # Ruhe bounds only need eigenvalues, which ignore the basis
    k_sorted = np.sort(errs.k_spectrum)[::-1]
    lower, upper = ruhe_bounds(test.spectrum, k_sorted)
    return AlignmentReport(
        e_misalign=errs.e_misalign, trace_test_F=tr_f, trace_test_inv_train=tr_inv,
        cka=sim, ruhe_lower=lower, ruhe_upper=upper, e_icl=errs.e_icl,
        train_singular=singular, params=params, test_label=test.label,
    )


def express_in_train_basis(test: CovarianceSpec, train: CovarianceSpec) -> np.ndarray:
    """Dense ``C_test`` expressed in ``train``'s eigenbasis."""
    return project_onto_basis(test, train.basis)
