"""Task covariance construction and basis bookkeeping.

A covariance is stored spectrally: a non-increasing eigenvalue vector plus an
optional orthogonal basis whose columns are the matching eigenvectors. A
missing basis means the standard basis, so ``matrix() == diag(spectrum)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

from .exceptions import InvalidArgumentError

_ORTHO_TOL = 1e-10


def _as_dim(d) -> int:
    if isinstance(d, bool) or int(d) != d or d < 1:
        raise InvalidArgumentError(f"dimension must be a positive integer, got {d!r}")
    return int(d)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Symmetric PSD task covariance in spectral form.

    Parameters
    ----------
    spectrum : array_like, shape (d,)
        Eigenvalues, non-increasing and non-negative.
    basis : array_like, shape (d, d), optional
        Orthogonal matrix with eigenvectors as columns.
    kind : dict, optional
        Constructor tag and its parameters, kept for serialization.
    """

    spectrum: np.ndarray
    basis: Optional[np.ndarray] = None
    kind: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.spectrum, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise InvalidArgumentError("spectrum must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(s)):
            raise InvalidArgumentError("spectrum must be finite")
        if np.any(s < 0):
            raise InvalidArgumentError("spectrum must be non-negative")
        if np.any(np.diff(s) > 0):
            raise InvalidArgumentError("spectrum must be sorted non-increasing")
        object.__setattr__(self, "spectrum", _frozen(s))
        if self.basis is not None:
            u = np.asarray(self.basis, dtype=float)
            if u.shape != (s.size, s.size):
                raise InvalidArgumentError(
                    f"basis shape {u.shape} does not match dimension {s.size}"
                )
            if np.max(np.abs(u.T @ u - np.eye(s.size))) > _ORTHO_TOL:
                raise InvalidArgumentError("basis is not orthogonal")
            object.__setattr__(self, "basis", _frozen(u))
        object.__setattr__(self, "kind", dict(self.kind))
        object.__setattr__(self, "_trace", float(np.mean(s)))

    @property
    def dim(self) -> int:
        return self.spectrum.size

    @property
    def trace(self) -> float:
        """Normalized trace ``(1/d) sum_i lambda_i``."""
        return self._trace

    @property
    def label(self) -> str:
        name = self.kind.get("name", "custom")
        args = ",".join(f"{k}={v}" for k, v in self.kind.items() if k != "name")
        return f"{name}({args})" if args else name

    def matrix(self) -> np.ndarray:
        """Dense ``d x d`` matrix ``U diag(spectrum) U^T``."""
        if self.basis is None:
            return np.diag(self.spectrum)
        u = self.basis
        return (u * self.spectrum) @ u.T

    def sqrt_matrix(self) -> np.ndarray:
        """Symmetric square root ``U diag(sqrt(spectrum)) U^T``."""
        root = np.sqrt(self.spectrum)
        if self.basis is None:
            return np.diag(root)
        return (self.basis * root) @ self.basis.T

    def rank(self, rtol: float = 1e-12) -> int:
        top = self.spectrum[0]
        if top == 0:
            return 0
        return int(np.count_nonzero(self.spectrum > rtol * top))

    def relabel(self, **kind) -> "CovarianceSpec":
        return CovarianceSpec(self.spectrum, self.basis, kind)

    def to_dict(self) -> dict:
        out = {
            "dim": self.dim,
            "spectrum": self.spectrum.tolist(),
            "basis": None if self.basis is None else self.basis.tolist(),
            "kind": dict(self.kind),
        }
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CovarianceSpec":
        spectrum = data["spectrum"]
        if "dim" in data and len(spectrum) != data["dim"]:
            raise InvalidArgumentError(
                f"dim={data['dim']} but spectrum has {len(spectrum)} entries"
            )
        basis = data.get("basis")
        return cls(np.asarray(spectrum, dtype=float),
                   None if basis is None else np.asarray(basis, dtype=float),
                   data.get("kind") or {})

    def __repr__(self):
        return f"CovarianceSpec({self.label}, d={self.dim}, trace={self.trace:.6g})"


def make_powerlaw(d: int, p: float, target_trace: float = 1.0) -> CovarianceSpec:
    """Spectrum proportional to ``i**-p`` rescaled to the given normalized trace."""
    d = _as_dim(d)
    if not np.isfinite(p) or p < 0:
        raise InvalidArgumentError(f"power must be finite and >= 0, got {p!r}")
    if not np.isfinite(target_trace) or target_trace <= 0:
        raise InvalidArgumentError(f"target_trace must be positive, got {target_trace!r}")
    raw = np.arange(1, d + 1, dtype=float) ** (-float(p))
    spec = raw * (target_trace / raw.mean())
    return CovarianceSpec(spec, None, {"name": "powerlaw", "p": float(p),
                                       "trace": float(target_trace)})


def make_uniform_linear(d: int) -> CovarianceSpec:
    """Linearly decaying spectrum ``[d, d-1, ..., 1]`` scaled to total trace d."""
    d = _as_dim(d)
    raw = np.arange(d, 0, -1, dtype=float)
    return CovarianceSpec(raw / raw.mean(), None, {"name": "uniform_linear"})


def make_isotropic(d: int, c: float = 1.0) -> CovarianceSpec:
    d = _as_dim(d)
    if not np.isfinite(c) or c < 0:
        raise InvalidArgumentError(f"scale must be finite and >= 0, got {c!r}")
    return CovarianceSpec(np.full(d, float(c)), None, {"name": "isotropic", "c": float(c)})


def _swap_basis(d: int, index: int) -> Optional[np.ndarray]:
    if index == 1:
        return None
    u = np.eye(d)
    u[:, [0, index - 1]] = u[:, [index - 1, 0]]
    return u


def make_spike(d: int, index: int) -> CovarianceSpec:
    """Rank-one covariance ``d e_index e_index^T`` (1-based index)."""
    d = _as_dim(d)
    if isinstance(index, bool) or int(index) != index or not 1 <= index <= d:
        raise InvalidArgumentError(f"spike index must lie in [1, {d}], got {index!r}")
    index = int(index)
    spec = np.zeros(d)
    spec[0] = d
    return CovarianceSpec(spec, _swap_basis(d, index), {"name": "spike", "index": index})


def make_lowrank(d: int, r: int) -> CovarianceSpec:
    """``diag[(d/r) 1_r, 0_{d-r}]``."""
    d = _as_dim(d)
    if isinstance(r, bool) or int(r) != r or not 1 <= r <= d:
        raise InvalidArgumentError(f"rank must lie in [1, {d}], got {r!r}")
    r = int(r)
    spec = np.zeros(d)
    spec[:r] = d / r
    return CovarianceSpec(spec, None, {"name": "lowrank", "r": r})


def reversed_order(cov: CovarianceSpec) -> CovarianceSpec:
    """Same eigenvalues with the eigenvector order reversed.

    With a standard-basis ``cov`` the largest eigenvalue lands on ``e_d``,
    i.e. the result is anti-aligned with any codiagonal decreasing spectrum.
    """
    d = cov.dim
    u = np.eye(d) if cov.basis is None else cov.basis
    kind = dict(cov.kind)
    kind["order"] = "reversed"
    return CovarianceSpec(cov.spectrum, u[:, ::-1].copy(), kind)


def random_rotation(cov: CovarianceSpec, rng=None) -> CovarianceSpec:
    """Same eigenvalues in a Haar-random orthogonal basis."""
    from scipy.stats import ortho_group

    rng = np.random.default_rng(rng)
    u = ortho_group.rvs(cov.dim, random_state=rng) if cov.dim > 1 else np.ones((1, 1))
    kind = dict(cov.kind)
    kind["order"] = "rotated"
    return CovarianceSpec(cov.spectrum, u, kind)


def from_matrix(mat, kind: Optional[Mapping[str, Any]] = None) -> CovarianceSpec:
    """Eigendecompose a dense symmetric PSD matrix."""
    a = np.asarray(mat, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError("matrix must be square")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(a))):
        raise InvalidArgumentError("matrix must be symmetric")
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    scale = max(1.0, abs(vals[0]))
    if vals[-1] < -1e-10 * scale:
        raise InvalidArgumentError("matrix must be positive semi-definite")
    vals = np.clip(vals, 0.0, None)
    # eigh can emit tiny out-of-order values after clipping
    vals = np.maximum.accumulate(vals[::-1])[::-1]
    return CovarianceSpec(vals, vecs, kind or {"name": "matrix"})


def project_onto_basis(test: CovarianceSpec, train_basis) -> np.ndarray:
    """``U^T C_test U`` with ``U = train_basis`` (``None`` means identity)."""
    if train_basis is None:
        return test.matrix()
    u = np.asarray(train_basis, dtype=float)
    if u.shape != (test.dim, test.dim):
        raise InvalidArgumentError(
            f"basis shape {u.shape} does not match covariance dimension {test.dim}"
        )
    out = u.T @ test.matrix() @ u
    return (out + out.T) / 2


def diagonal_in_basis(test: CovarianceSpec, train: CovarianceSpec) -> np.ndarray:
    """Diagonal of ``C_test`` expressed in ``train``'s eigenbasis.

    This is all that trace functionals against matrices codiagonal with
    ``C_train`` need; exact when both covariances use the standard basis.
    """
    if test.dim != train.dim:
        raise InvalidArgumentError(
            f"dimension mismatch: test {test.dim} vs train {train.dim}"
        )
    if test.basis is None and train.basis is None:
        return np.array(test.spectrum)
    u_tr = np.eye(test.dim) if train.basis is None else train.basis
    u_te = np.eye(test.dim) if test.basis is None else test.basis
    overlap = u_tr.T @ u_te
    return (overlap ** 2) @ test.spectrum


def build(kind: Mapping[str, Any], d: int) -> CovarianceSpec:
    """Construct a covariance from a config tag such as ``{"name": "powerlaw", "p": 0.9}``."""
    kind = dict(kind)
    name = kind.pop("name", None)
    order = kind.pop("order", None)
    seed = kind.pop("seed", None)
    if name == "powerlaw":
        cov = make_powerlaw(d, kind.get("p", 0.0), kind.get("trace", 1.0))
    elif name == "uniform_linear":
        cov = make_uniform_linear(d)
    elif name == "isotropic":
        cov = make_isotropic(d, kind.get("c", 1.0))
    elif name == "spike":
        index = kind.get("index", 1)
        if index in ("last", "d"):
            index = d
        cov = make_spike(d, index)
    elif name == "lowrank":
        r = kind.get("r")
        if r is None:
            r = max(1, int(round(kind.get("fraction", 0.5) * d)))
        cov = make_lowrank(d, r)
    elif name == "explicit":
        cov = CovarianceSpec.from_dict({"spectrum": kind["spectrum"],
                                        "basis": kind.get("basis"),
                                        "kind": {"name": "explicit"}})
        if cov.dim != d:
            raise InvalidArgumentError(f"explicit spectrum has dim {cov.dim}, expected {d}")
    else:
        raise InvalidArgumentError(f"unknown covariance kind {name!r}")
    if order == "reversed":
        cov = reversed_order(cov)
    elif order == "rotated":
        cov = random_rotation(cov, seed)
    elif order not in (None, "aligned"):
        raise InvalidArgumentError(f"unknown order {order!r}")
    return cov
