"""Optimal watermark covariance under an LQG-cost budget.

Detection performance is measured by ``tr(Ucal Wcal^{-1}) = tr(U P)`` and the
excess LQG cost by ``tr(U X)``; the optimum is rank one along the top
generalized eigenvector of ``(P, X)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .lti import LinearSystem, ModalDecomposition, modal_decomposition, realify, steady_output_cov


class DivergentSeriesError(ValueError):
    """Some ``|lambda_i lambda_j| >= 1``."""


class NonUniqueMaximizerWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Blocks of the LQG weight ``X = [[X_yy, X_yphi], [X_phiy, X_phiphi]]``."""

    X_yy: np.ndarray
    X_yphi: np.ndarray
    X_phiy: np.ndarray
    X_phiphi: np.ndarray

    def __post_init__(self):
        for name in ("X_yy", "X_yphi", "X_phiy", "X_phiphi"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        m, p = self.X_yphi.shape
        if self.X_yy.shape != (m, m) or self.X_phiphi.shape != (p, p) or self.X_phiy.shape != (p, m):
            raise ValueError("inconsistent cost weight block shapes")
        if not np.allclose(self.X_phiy, self.X_yphi.T, rtol=0, atol=1e-12):
            raise ValueError("X_phiy must equal X_yphi^T")
        if np.linalg.eigvalsh(0.5 * (self.full + self.full.T)).min() <= 0:
            raise ValueError("cost weight X must be positive definite")

    @property
    def m(self) -> int:
        return self.X_yy.shape[0]

    @property
    def p(self) -> int:
        return self.X_phiphi.shape[0]

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.X_yy, self.X_yphi], [self.X_phiy, self.X_phiphi]])

    @classmethod
    def identity(cls, m: int, p: int) -> "CostWeights":
        return cls.from_full(np.eye(m + p), m)

    @classmethod
    def from_full(cls, X, m: int) -> "CostWeights":
        X = np.asarray(X, dtype=float)
        return cls(X[:m, :m], X[:m, m:], X[m:, :m], X[m:, m:])

    def schur_complement(self) -> np.ndarray:
        """``X_phiphi - X_phiy X_yy^{-1} X_yphi``; lower bound on any design ``X``."""
        S = self.X_phiphi - self.X_phiy @ np.linalg.solve(self.X_yy, self.X_yphi)
        return 0.5 * (S + S.T)

    def watermark_cap(self, delta: float) -> np.ndarray:
        """Upper bound ``delta * schur^{-1}`` on any budget-feasible rank-1 ``U``."""
        C = delta * np.linalg.inv(self.schur_complement())
        return 0.5 * (C + C.T)


@dataclass(frozen=True, eq=False)
class DesignPair:
    P_mat: np.ndarray
    X_mat: np.ndarray


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _pair_weights(lambdas: np.ndarray) -> np.ndarray:
    ll = lambdas[:, None] * lambdas[None, :]
    if np.any(np.abs(ll) >= 1.0):
        raise DivergentSeriesError("divergent series: |lambda_i lambda_j| >= 1")
    return 1.0 / (1.0 - ll)


def steady_watermark_cov(modal: ModalDecomposition, U) -> np.ndarray:
    """``sum_tau H_tau U H_tau^T`` in closed form over eigenvalue pairs."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    w = _pair_weights(modal.lambdas)
    Om = modal.residues
    # sum_ij w_ij Om_i U Om_j^T
    OU = Om @ U                                   # (n, m, p)
    Ucal = np.einsum("ij,iap,jbp->ab", w, OU, Om, optimize=True)
    return _sym(realify(Ucal))


def _pair_quadratic(modal: ModalDecomposition, M: np.ndarray) -> np.ndarray:
    """``sum_ij w_ij Om_i^T M Om_j``, i.e. ``sum_tau H_tau^T M H_tau``."""
    w = _pair_weights(modal.lambdas)
    Om = modal.residues
    MO = np.einsum("ab,jbq->jaq", M, Om)
    out = np.einsum("ij,iap,jaq->pq", w, Om, MO, optimize=True)
    return _sym(realify(out))


def design_matrices(modal: ModalDecomposition, Wcal, X: CostWeights) -> DesignPair:
    """Detection matrix ``P`` and cost matrix ``X`` of the design problem."""
    Wcal = np.atleast_2d(np.asarray(Wcal, dtype=float))
    Winv = _sym(np.linalg.inv(Wcal))
    P = _pair_quadratic(modal, Winv)
    H0 = modal.H0()
    Xd = _pair_quadratic(modal, X.X_yy) + H0.T @ X.X_yphi + X.X_phiy @ H0 + X.X_phiphi
    return DesignPair(P_mat=P, X_mat=_sym(Xd))


def optimal_watermark(dp: DesignPair, delta: float) -> np.ndarray:
    """Rank-one maximizer of ``tr(U P)`` subject to ``tr(U X) <= delta``.

    Solved as the symmetric problem ``L^{-1} P L^{-T}`` with ``X = L L^T``.
    Warns with :class:`NonUniqueMaximizerWarning` when the top eigenvalue is
    not simple (to ``1e-8`` relative); one maximizer is still returned.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    P = _sym(np.atleast_2d(dp.P_mat))
    X = _sym(np.atleast_2d(dp.X_mat))
    L = np.linalg.cholesky(X)
    Linv = np.linalg.inv(L)
    M = _sym(Linv @ P @ Linv.T)
    evals, evecs = np.linalg.eigh(M)
    top = evals[-1]
    if evals.size > 1 and evals[-1] - evals[-2] < 1e-8 * max(abs(top), np.finfo(float).tiny):
        warnings.warn("non-unique maximizer: top generalized eigenvalue is not simple",
                      NonUniqueMaximizerWarning, stacklevel=2)
    z = Linv.T @ evecs[:, -1]
    z *= np.sqrt(delta / float(z @ X @ z))
    nz = np.flatnonzero(np.abs(z) > 1e-14 * np.abs(z).max())
    if nz.size and z[nz[0]] < 0:
        z = -z
    return np.outer(z, z)


def top_generalized_eigenvalue(dp: DesignPair) -> float:
    L = np.linalg.cholesky(_sym(dp.X_mat))
    Linv = np.linalg.inv(L)
    return float(np.linalg.eigvalsh(_sym(Linv @ dp.P_mat @ Linv.T))[-1])


def expected_kl(Ucal, Wcal) -> float:
    """Expected KL divergence ``tr(Ucal W^{-1}) - 0.5 logdet(I + Ucal W^{-1})``."""
    Ucal = np.atleast_2d(np.asarray(Ucal, dtype=float))
    Wcal = np.atleast_2d(np.asarray(Wcal, dtype=float))
    UW = np.linalg.solve(Wcal.T, Ucal.T).T       # Ucal @ Wcal^{-1}
    sign, logdet = np.linalg.slogdet(np.eye(UW.shape[0]) + UW)
    if sign <= 0:
        raise ValueError("I + Ucal Wcal^{-1} is not positive definite")
    return float(np.trace(UW) - 0.5 * logdet)


def kl_bounds(Ucal, Wcal) -> tuple[float, float]:
    Ucal = np.atleast_2d(np.asarray(Ucal, dtype=float))
    Wcal = np.atleast_2d(np.asarray(Wcal, dtype=float))
    t = float(np.trace(np.linalg.solve(Wcal, Ucal)))
    return 0.5 * t, t - 0.5 * np.log1p(t)


def lqg_cost(U, modal: ModalDecomposition, Wcal, X: CostWeights) -> tuple[float, float]:
    """Baseline cost ``J0 = tr(X_yy W)`` and watermark excess ``tr(X S)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Wcal = np.atleast_2d(np.asarray(Wcal, dtype=float))
    Ucal = steady_watermark_cov(modal, U)
    H0U = modal.H0() @ U
    S = np.block([[Ucal, H0U], [H0U.T, U]])
    J0 = float(np.trace(X.X_yy @ Wcal))
    return J0, float(np.trace(X.full @ S))


@dataclass(frozen=True, eq=False)
class ExactDesign:
    """Everything the known-parameter detector needs."""

    modal: ModalDecomposition
    Wcal: np.ndarray
    Ucal: np.ndarray
    design: DesignPair
    U: np.ndarray
    J0: float
    deltaJ: float

    @property
    def J(self) -> float:
        return self.J0 + self.deltaJ


def exact_design(sys: LinearSystem, X: CostWeights, delta: float) -> ExactDesign:
    modal = modal_decomposition(sys)
    W = steady_output_cov(sys)
    dp = design_matrices(modal, W, X)
    U = optimal_watermark(dp, delta)
    J0, dJ = lqg_cost(U, modal, W, X)
    return ExactDesign(modal=modal, Wcal=W, Ucal=steady_watermark_cov(modal, U),
                       design=dp, U=U, J0=J0, deltaJ=dJ)
