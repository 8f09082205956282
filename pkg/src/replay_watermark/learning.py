"""Online identification and adaptive watermark design.

The learner never sees ``A, B, C, Q, R``. From the applied watermarks and the
measured outputs it keeps running cross-correlations

    H_hat[tau] = 1/(k+1) sum_t y_t phi_{t-tau-1}^T U_{t-tau-1}^{-1}

for ``tau = 0 .. 3n-2``, fits the characteristic polynomial of the plant on a
block-Hankel arrangement of them, fits modal residues on the recovered roots,
tracks the noise covariance, and periodically re-solves the design problem
with an exploration term ``delta / (k+1)**beta * I`` added to the optimum.

Per tick the call order is::

    phi = learner.generate_watermark()
    y = plant(phi)
    g = learner.online_np_statistic(y)
    learner.ingest(y)            # or learner.update(y) to redesign on cadence
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import ResponseState, np_statistic, DetectorModel
from .lti import DEGENERATE_GAP, DegenerateSpectrumError, ModalDecomposition, canonical_order, \
    conjugate_partners, min_pairwise_gap
from .watermark import CostWeights, DesignPair, NonUniqueMaximizerWarning, design_matrices, \
    optimal_watermark

MODULUS_CLAMP = 0.999
PD_FLOOR = 1e-8
CONDITION_LIMIT = 1e12


class InsufficientExcitationError(ValueError):
    """Hankel normal equations too ill-conditioned to fit the polynomial."""


class SequencingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Identification primitives
# ---------------------------------------------------------------------------

def _order_from_length(L: int) -> int:
    if L < 2 or (L + 1) % 3:
        raise ValueError(f"need 3n-1 Markov estimates, got {L}")
    return (L + 1) // 3


def hankel_blocks(H_hat) -> np.ndarray:
    """Block Hankel matrix with block ``(i, j) = H_hat[i + j]``,
    ``i < 2n-1``, ``j < n``."""
    H = np.asarray(H_hat, dtype=float)
    n = _order_from_length(H.shape[0])
    return np.block([[H[i + j] for j in range(n)] for i in range(2 * n - 1)])


def estimate_char_poly(H_hat) -> np.ndarray:
    """Least-squares characteristic-polynomial coefficients ``alpha_0 .. alpha_{n-1}``.

    Minimizes ``|| sum_j alpha_j H_hat[i+j] + H_hat[n+i] ||_F`` over the
    ``2n-1`` block rows ``i``. Each ``alpha_j`` multiplies a fixed stack of
    blocks, so after vectorizing it is an ordinary ``n``-unknown problem.
    """
    H = np.asarray(H_hat, dtype=float)
    n = _order_from_length(H.shape[0])
    rows = 2 * n - 1
    M = np.stack([H[j:j + rows].reshape(-1) for j in range(n)], axis=1)
    rhs = -H[n:n + rows].reshape(-1)
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] == 0 or (s[0] / s[-1]) ** 2 > CONDITION_LIMIT:
        raise InsufficientExcitationError("insufficient excitation: Hankel system is rank deficient")
    alpha, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return alpha


def poly_roots(alpha) -> np.ndarray:
    """Roots of ``x^n + alpha_{n-1} x^{n-1} + ... + alpha_0``, canonically ordered."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    n = alpha.size
    comp = np.zeros((n, n))
    comp[0, :] = -alpha[::-1]
    if n > 1:
        comp[1:, :-1] = np.eye(n - 1)
    lam = np.linalg.eigvals(comp).astype(complex)
    partner = conjugate_partners(lam)
    for i, j in enumerate(partner):
        if i < j:
            avg = 0.5 * (lam[i] + np.conj(lam[j]))
            lam[i], lam[j] = avg, np.conj(avg)
        elif i == j:
            lam[i] = complex(lam[i].real, 0.0) if abs(lam[i].imag) <= 1e-9 * max(1.0, abs(lam[i])) else lam[i]
    return lam[canonical_order(lam)]


def estimate_residues(lambdas, H_hat) -> np.ndarray:
    """Least-squares residues on fixed eigenvalues: ``H_hat[tau] ~ sum_i lambda_i^tau Omega_i``.

    Returns a complex array ``(n, m, p)``; residues of conjugate eigenvalues
    are exact conjugates and residues of real eigenvalues are real.
    """
    lam = np.asarray(lambdas, dtype=complex).reshape(-1)
    H = np.asarray(H_hat, dtype=float)
    L, m, p = H.shape
    if min_pairwise_gap(lam) < DEGENERATE_GAP:
        raise DegenerateSpectrumError("degenerate spectrum: estimated eigenvalues coincide")
    V = lam[None, :] ** np.arange(L)[:, None]
    Om, *_ = np.linalg.lstsq(V, H.reshape(L, m * p).astype(complex), rcond=None)
    Om = Om.reshape(lam.size, m, p)
    partner = conjugate_partners(lam)
    for i, j in enumerate(partner):
        if i == j and lam[i].imag == 0:
            Om[i] = Om[i].real
        elif i < j:
            avg = 0.5 * (Om[i] + np.conj(Om[j]))
            Om[i], Om[j] = avg, np.conj(avg)
    return Om


def clamp_modulus(lambdas, limit: float = MODULUS_CLAMP) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=complex).copy()
    mod = np.abs(lam)
    big = mod > limit
    lam[big] *= limit / mod[big]
    return lam


def project_pd(M, floor: float = PD_FLOOR) -> np.ndarray:
    """Nearest symmetric matrix with eigenvalues ``>= floor``."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def sym_sqrt(M) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------

@dataclass
class LearnerConfig:
    m: int
    p: int
    n_model: int
    delta: float = 10.0
    beta: float = 1.0 / 3.0
    redesign_interval: int = 100
    X: CostWeights | None = None

    def __post_init__(self):
        if self.n_model < 1:
            raise ValueError("n_model must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.redesign_interval < 1:
            raise ValueError("redesign_interval must be >= 1")
        if self.X is None:
            self.X = CostWeights.identity(self.m, self.p)
        if (self.X.m, self.X.p) != (self.m, self.p):
            raise ValueError("cost weights do not match (m, p)")

    @property
    def n_lags(self) -> int:
        return 3 * self.n_model - 1

    def to_dict(self) -> dict:
        return {"m": self.m, "p": self.p, "n_model": self.n_model, "delta": self.delta,
                "beta": self.beta, "redesign_interval": self.redesign_interval,
                "X": self.X.full.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        X = d.pop("X", None)
        cfg = cls(**d)
        if X is not None:
            cfg.X = CostWeights.from_full(X, cfg.m)
        return cfg


@dataclass(eq=False)
class LearnerState:
    """Running estimates, watermark schedule and the plug-in detector."""

    cfg: LearnerConfig
    seed: int | list = 0
    keep_log: bool = False

    k: int = field(init=False, default=0)
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        c = self.cfg
        n, m, p, L = c.n_model, c.m, c.p, c.n_lags
        self.rng = np.random.default_rng(self.seed)
        self.S_tau = np.zeros((L, m, p))
        self.phi_ring = np.zeros((L, p))
        self.Uinv_ring = np.zeros((L, p, p))
        self.Y_sum = np.zeros((m, m))
        self.Ucal_pairs = np.zeros((n, n, m, m), dtype=complex)
        self.Ucal_running_sum = np.zeros((m, m))
        self.lambdas: np.ndarray | None = None
        self.residues: np.ndarray | None = None
        self.Wcal: np.ndarray | None = None
        self.Ucal: np.ndarray | None = None
        self.P_mat: np.ndarray | None = None
        self.X_mat: np.ndarray | None = None
        self.U_star = np.zeros((p, p))
        self.response = ResponseState.zeros(n, m)
        self.n_redesigns = 0
        self.n_failures = 0
        self.last_error: str | None = None
        self.pending_phi: np.ndarray | None = None
        self.pending_U: np.ndarray | None = None
        self.log_y: list = []
        self.log_phi: list = []
        self.log_U: list = []
        self._set_U(c.delta * np.eye(p))
        self._detector: DetectorModel | None = None
        self._pair_decay = None
        self._pair_increment = None

    # -- watermark covariance -------------------------------------------------

    def _set_U(self, U: np.ndarray) -> None:
        U = 0.5 * (U + U.T)
        w, V = np.linalg.eigh(U)
        if w.min() <= 0:
            raise ValueError("watermark covariance must be positive definite")
        self.U_current = U
        self._U_sqrt = (V * np.sqrt(w)) @ V.T
        self._U_inv = (V / w) @ V.T

    @property
    def has_model(self) -> bool:
        return self.lambdas is not None

    @property
    def H_hat(self) -> np.ndarray:
        return self.S_tau / max(self.k, 1)

    @property
    def modal(self) -> ModalDecomposition | None:
        if not self.has_model:
            return None
        return ModalDecomposition(self.lambdas, self.residues)

    def exploration(self, k: int | None = None) -> float:
        k = self.k if k is None else k
        return self.cfg.delta / max(k, 1) ** self.cfg.beta

    # -- per-tick operations -------------------------------------------------

    def generate_watermark(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """``phi_k = U_k^{1/2} z`` with ``z`` standard normal."""
        if self.pending_phi is not None:
            raise SequencingError("watermark already generated for this tick")
        rng = self.rng if rng is None else rng
        phi = self._U_sqrt @ rng.standard_normal(self.cfg.p)
        self.pending_phi = phi
        self.pending_U = self.U_current
        return phi

    def online_np_statistic(self, y) -> float:
        """Plug-in Neyman-Pearson statistic; ``nan`` before the first model."""
        if self._detector is None:
            return float("nan")
        return np_statistic(y, self.response.gamma, self._detector)

    def ingest(self, y) -> None:
        """Fold ``y_k`` into every running sum and advance to tick ``k+1``."""
        if self.pending_phi is None:
            raise SequencingError("ingest called before generate_watermark for this tick")
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape != (self.cfg.m,):
            raise ValueError(f"y must have length {self.cfg.m}")
        weighted = np.einsum("tij,tj->ti", self.Uinv_ring, self.phi_ring)
        self.S_tau += y[None, :, None] * weighted[:, None, :]
        self.Y_sum += np.outer(y, y)
        if self.has_model:
            self.Ucal_running_sum += self.Ucal_pairs.sum(axis=(0, 1)).real
            self.Ucal_pairs = self._pair_decay * self.Ucal_pairs + self._pair_increment
        if self.keep_log:
            self.log_y.append(y.copy())
            self.log_phi.append(self.pending_phi.copy())
            self.log_U.append(self.pending_U.copy())
        self._advance_response_and_ring()
        self.k += 1

    def skip(self) -> None:
        """Close the tick without learning from its output (the response
        predictor still absorbs the applied watermark)."""
        if self.pending_phi is None:
            raise SequencingError("skip called before generate_watermark for this tick")
        self._advance_response_and_ring()

    def _advance_response_and_ring(self) -> None:
        phi, U = self.pending_phi, self.pending_U
        if self.has_model:
            self.response.components = self.lambdas[:, None] * self.response.components + self.residues @ phi
            self.response.gamma = self.response.components.sum(axis=0).real
        self.phi_ring[1:] = self.phi_ring[:-1]
        self.phi_ring[0] = phi
        self.Uinv_ring[1:] = self.Uinv_ring[:-1]
        self.Uinv_ring[0] = self._U_inv if U is self.U_current else np.linalg.inv(U)
        self.pending_phi = None
        self.pending_U = None

    def update(self, y) -> bool:
        """:meth:`ingest` then :meth:`redesign` on cadence; True if redesigned."""
        self.ingest(y)
        if self.k % self.cfg.redesign_interval == 0:
            self.redesign()
            return True
        return False

    # -- identification and design ------------------------------------------

    def estimate_noise_cov(self) -> np.ndarray:
        if self.k < 1:
            raise ValueError("no samples ingested")
        W = (self.Y_sum - self.Ucal_running_sum) / self.k
        return 0.5 * (W + W.T)

    def current_Ucal(self) -> np.ndarray:
        Uc = self.Ucal_pairs.sum(axis=(0, 1)).real
        return project_pd(Uc, floor=0.0)

    def identify(self) -> tuple[ModalDecomposition, np.ndarray]:
        H = self.H_hat
        alpha = estimate_char_poly(H)
        lam = clamp_modulus(poly_roots(alpha))
        lam = lam[canonical_order(lam)]
        Om = estimate_residues(lam, H)
        W = project_pd(self.estimate_noise_cov())
        return ModalDecomposition(lam, Om), W

    def redesign(self) -> np.ndarray:
        """Re-identify, re-solve the design problem and refresh ``U``.

        ``U_{k+1} = U_{k,*} + delta/(k+1)^beta I``. On identification failure
        the previous optimum is kept and only the exploration term refreshes.
        Returns the new ``U``.
        """
        c = self.cfg
        try:
            modal, W = self.identify()
            dp = design_matrices(modal, W, c.X)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NonUniqueMaximizerWarning)
                U_star = optimal_watermark(dp, c.delta)
        except (ValueError, np.linalg.LinAlgError) as exc:
            self.n_failures += 1
            self.last_error = str(exc)
            self._set_U(self.U_star + self.exploration() * np.eye(c.p))
            self._refresh_increment()
            return self.U_current
        self.lambdas, self.residues = modal.lambdas, modal.residues
        self.Wcal = W
        self.P_mat, self.X_mat = dp.P_mat, dp.X_mat
        self.U_star = U_star
        self.n_redesigns += 1
        self.last_error = None
        self._set_U(U_star + self.exploration() * np.eye(c.p))
        self._refresh_increment()
        self.Ucal = self.current_Ucal()
        self._detector = DetectorModel(self.Wcal, self.Ucal)
        return self.U_current

    def _refresh_increment(self) -> None:
        if not self.has_model:
            return
        lam, Om = self.lambdas, self.residues
        self._pair_decay = (lam[:, None] * lam[None, :])[:, :, None, None]
        OU = Om @ self.U_current
        self._pair_increment = np.einsum("iap,jbp->ijab", OU, Om)

    def set_model(self, modal: ModalDecomposition, Wcal, Ucal) -> None:
        """Install estimates directly (used to compare against exact parameters)."""
        if modal.n != self.cfg.n_model:
            raise ValueError("model order mismatch")
        self.lambdas = np.asarray(modal.lambdas, dtype=complex).copy()
        self.residues = np.asarray(modal.residues, dtype=complex).copy()
        self.Wcal = np.asarray(Wcal, dtype=float)
        self.Ucal = np.asarray(Ucal, dtype=float)
        self._detector = DetectorModel(self.Wcal, self.Ucal)
        self._refresh_increment()

    def design_pair(self) -> DesignPair | None:
        if self.P_mat is None:
            return None
        return DesignPair(self.P_mat, self.X_mat)

    # -- checkpointing -------------------------------------------------------

    def to_dict(self) -> dict:
        def arr(a):
            if a is None:
                return None
            a = np.asarray(a)
            if np.iscomplexobj(a):
                return {"re": a.real.tolist(), "im": a.imag.tolist()}
            return a.tolist()

        return {
            "cfg": self.cfg.to_dict(),
            "seed": self.seed,
            "keep_log": self.keep_log,
            "k": self.k,
            "rng": self.rng.bit_generator.state,
            "S_tau": arr(self.S_tau),
            "phi_ring": arr(self.phi_ring),
            "Uinv_ring": arr(self.Uinv_ring),
            "Y_sum": arr(self.Y_sum),
            "Ucal_pairs": arr(self.Ucal_pairs),
            "Ucal_running_sum": arr(self.Ucal_running_sum),
            "lambdas": arr(self.lambdas),
            "residues": arr(self.residues),
            "Wcal": arr(self.Wcal),
            "Ucal": arr(self.Ucal),
            "P_mat": arr(self.P_mat),
            "X_mat": arr(self.X_mat),
            "U_star": arr(self.U_star),
            "U_current": arr(self.U_current),
            "response": arr(self.response.components),
            "gamma": arr(self.response.gamma),
            "pending_phi": arr(self.pending_phi),
            "pending_U": arr(self.pending_U),
            "n_redesigns": self.n_redesigns,
            "n_failures": self.n_failures,
            "log_y": arr(self.log_y),
            "log_phi": arr(self.log_phi),
            "log_U": arr(self.log_U),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerState":
        def arr(v, dtype=float):
            if v is None:
                return None
            if isinstance(v, dict):
                return np.asarray(v["re"], dtype=float) + 1j * np.asarray(v["im"], dtype=float)
            return np.asarray(v, dtype=dtype)

        cfg = LearnerConfig.from_dict(d["cfg"])
        st = cls(cfg, seed=d["seed"], keep_log=d["keep_log"])
        st.k = d["k"]
        st.rng.bit_generator.state = d["rng"]
        st.S_tau = arr(d["S_tau"])
        st.phi_ring = arr(d["phi_ring"])
        st.Uinv_ring = arr(d["Uinv_ring"])
        st.Y_sum = arr(d["Y_sum"])
        st.Ucal_pairs = arr(d["Ucal_pairs"]).astype(complex)
        st.Ucal_running_sum = arr(d["Ucal_running_sum"])
        st.lambdas = arr(d["lambdas"])
        st.residues = arr(d["residues"])
        if st.lambdas is not None:
            st.lambdas = st.lambdas.astype(complex)
            st.residues = st.residues.astype(complex)
        st.Wcal = arr(d["Wcal"])
        st.Ucal = arr(d["Ucal"])
        st.P_mat = arr(d["P_mat"])
        st.X_mat = arr(d["X_mat"])
        st.U_star = arr(d["U_star"])
        st._set_U(arr(d["U_current"]))
        st.response = ResponseState(arr(d["response"]).astype(complex), arr(d["gamma"]))
        st.pending_phi = arr(d["pending_phi"])
        pending_U = arr(d["pending_U"])
        st.pending_U = st.U_current if pending_U is not None and np.array_equal(pending_U, st.U_current) \
            else pending_U
        st.n_redesigns = d["n_redesigns"]
        st.n_failures = d["n_failures"]
        st.log_y = [np.asarray(v) for v in (d["log_y"] or [])]
        st.log_phi = [np.asarray(v) for v in (d["log_phi"] or [])]
        st.log_U = [np.asarray(v) for v in (d["log_U"] or [])]
        if st.Wcal is not None and st.Ucal is not None:
            st._detector = DetectorModel(st.Wcal, st.Ucal)
        st._refresh_increment()
        return st

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LearnerState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def batch_markov_estimates(log_y, log_phi, log_U, n_lags: int) -> np.ndarray:
    """Recompute ``H_hat`` from full logs (reference for the streaming sums)."""
    y = np.asarray(log_y)
    phi = np.asarray(log_phi)
    U = np.asarray(log_U)
    T, m = y.shape
    p = phi.shape[1]
    out = np.zeros((n_lags, m, p))
    for tau in range(n_lags):
        for t in range(tau + 1, T):
            s = t - tau - 1
            out[tau] += np.outer(y[t], np.linalg.solve(U[s], phi[s]))
    return out / max(T, 1)
