"""Neyman-Pearson replay detector.

Per tick ``k`` the caller evaluates :func:`np_statistic` with the response
built from ``phi_0 .. phi_{k-1}`` and only then feeds ``phi_k`` to
:meth:`ResponseState.update`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lti import ModalDecomposition, realify


@dataclass
class ResponseState:
    """Modal accumulators of the watermark response ``sum_t H_t phi_{k-t}``."""

    components: np.ndarray          # (n, m) complex
    gamma: np.ndarray               # (m,) real

    @classmethod
    def zeros(cls, n: int, m: int) -> "ResponseState":
        return cls(np.zeros((n, m), dtype=complex), np.zeros(m))

    @classmethod
    def for_modal(cls, modal: ModalDecomposition) -> "ResponseState":
        return cls.zeros(modal.n, modal.residues.shape[1])

    def update(self, modal: ModalDecomposition, phi) -> "ResponseState":
        return update_response(self, modal, phi)


def update_response(state: ResponseState, modal: ModalDecomposition, phi) -> ResponseState:
    """``gamma_{k,i} <- lambda_i gamma_{k-1,i} + Omega_i phi`` (in place)."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if state.components.shape != (modal.n, modal.residues.shape[1]):
        raise ValueError("response state does not match the modal decomposition")
    if phi.shape != (modal.residues.shape[2],):
        raise ValueError(f"phi must have length {modal.residues.shape[2]}")
    state.components = modal.lambdas[:, None] * state.components + modal.residues @ phi
    state.gamma = realify(state.components.sum(axis=0), tol=1e-8)
    return state


@dataclass(frozen=True, eq=False)
class DetectorModel:
    """Covariances under both hypotheses and the alarm threshold."""

    Wcal: np.ndarray
    Ucal: np.ndarray
    zeta: float = np.inf
    _Winv: np.ndarray = field(init=False, repr=False)
    _WUinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.Wcal, dtype=float))
        U = np.atleast_2d(np.asarray(self.Ucal, dtype=float))
        object.__setattr__(self, "Wcal", W)
        object.__setattr__(self, "Ucal", U)
        try:
            np.linalg.cholesky(W)
            np.linalg.cholesky(W + U)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular covariance: W and W + U must be positive definite") from exc
        object.__setattr__(self, "_Winv", np.linalg.inv(W))
        object.__setattr__(self, "_WUinv", np.linalg.inv(W + U))

    def with_threshold(self, zeta: float) -> "DetectorModel":
        return DetectorModel(self.Wcal, self.Ucal, zeta)


def np_statistic(y, gamma, model: DetectorModel) -> float:
    """``(y - gamma)^T W^{-1} (y - gamma) - y^T (W + U)^{-1} y``."""
    y = np.asarray(y, dtype=float)
    r = y - gamma
    return float(r @ model._Winv @ r - y @ model._WUinv @ y)


def decide(g: float, zeta: float) -> bool:
    return bool(g >= zeta)


def threshold_lqg_ratio(J: float, ratio: float = 0.9) -> float:
    return J / ratio


def threshold_empirical_quantile(trace, alpha: float) -> float:
    """``(1 - alpha)`` sample quantile of a no-attack statistic trace.

    Uses the "higher" order statistic, so ``alpha = 0`` returns the maximum.
    """
    trace = np.asarray(trace, dtype=float).reshape(-1)
    if trace.size == 0:
        raise ValueError("empty calibration trace")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    return float(np.quantile(trace, 1.0 - alpha, method="higher"))


def calibrate_threshold(mode: str, **inputs) -> float:
    """Dispatch on ``mode``: ``lqg_ratio`` needs ``J`` (or ``J0`` and
    ``deltaJ``); ``empirical_quantile`` needs ``trace`` and ``alpha``."""
    if mode == "lqg_ratio":
        J = inputs["J"] if "J" in inputs else inputs["J0"] + inputs["deltaJ"]
        return threshold_lqg_ratio(J, inputs.get("ratio", 0.9))
    if mode == "empirical_quantile":
        return threshold_empirical_quantile(inputs["trace"], inputs.get("alpha", 0.05))
    raise ValueError(f"unknown calibration mode {mode!r}")
