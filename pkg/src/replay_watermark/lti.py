"""Linear time-invariant plant: simulation, steady-state covariances, modal form.

The plant is

    x_{k+1} = A x_k + B phi_k + w_k,    w_k ~ N(0, Q)
    y_k     = C x_k + v_k,              v_k ~ N(0, R)

with ``phi_k`` the watermark input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

DEGENERATE_GAP = 1e-8
RANK_RTOL = 1e-10


class UnstableSystemError(ValueError):
    """Spectral radius >= 1 or the Lyapunov iteration did not converge."""


class DegenerateSpectrumError(ValueError):
    """Two eigenvalues closer than ``DEGENERATE_GAP``."""


class GenerationError(RuntimeError):
    pass


def spectral_radius(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {M.shape}")
    return M


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Plant matrices.

    Shapes: A (n, n), B (n, p), C (m, n), Q (n, n), R (m, m).
    Construction checks shapes and symmetry/definiteness of Q and R;
    stability and the rank conditions are reported by
    :func:`structural_checks` and enforced by :meth:`validate`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "Q", "R"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {self.B.shape}")
        if self.C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {self.C.shape}")
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}")
        m = self.C.shape[0]
        if self.R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {self.R.shape}")
        for name in ("Q", "R"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be positive definite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @cached_property
    def noise_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Cholesky factors of ``Q`` and ``R``."""
        return np.linalg.cholesky(self.Q), np.linalg.cholesky(self.R)

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def validate(self, require_distinct: bool = False) -> None:
        """Raise ``ValueError`` unless the plant is stable, observable and
        controllable (and, optionally, has a distinct spectrum)."""
        report = structural_checks(self)
        if not report.stable:
            raise UnstableSystemError(f"unstable system: spectral radius {report.spectral_radius:.6g}")
        if not report.observable:
            raise ValueError("(A, C) is not observable")
        if not report.controllable:
            raise ValueError("(A, B) is not controllable")
        if require_distinct and not report.distinct_spectrum:
            raise DegenerateSpectrumError("degenerate spectrum: A has repeated eigenvalues")

    def to_dict(self, seed: int | None = None) -> dict:
        doc = {k: getattr(self, k).tolist() for k in ("A", "B", "C", "Q", "R")}
        doc["seed"] = seed
        return doc

    @classmethod
    def from_dict(cls, doc: dict, validate: bool = True) -> "LinearSystem":
        unknown = set(doc) - {"A", "B", "C", "Q", "R", "seed"}
        if unknown:
            raise ValueError(f"unknown system keys: {sorted(unknown)}")
        A = _as_matrix(doc["A"], "A")
        B = _as_matrix(doc["B"], "B")
        C = _as_matrix(doc["C"], "C")
        Q = doc.get("Q")
        R = doc.get("R")
        sys = cls(A, B, C,
                  np.eye(A.shape[0]) if Q is None else Q,
                  np.eye(C.shape[0]) if R is None else R)
        if validate:
            sys.validate()
        return sys


def save_system(sys: LinearSystem, path, seed: int | None = None) -> None:
    Path(path).write_text(json.dumps(sys.to_dict(seed), indent=2))


def load_system(path, validate: bool = True) -> LinearSystem:
    return LinearSystem.from_dict(json.loads(Path(path).read_text()), validate=validate)


# ---------------------------------------------------------------------------
# Steady state
# ---------------------------------------------------------------------------

def solve_discrete_lyapunov(A, Q, max_doublings: int = 64) -> np.ndarray:
    """Solve ``S = A S A^T + Q`` by the doubling iteration.

    After ``j`` doublings ``S`` holds the partial series
    ``sum_{t < 2^j} A^t Q (A^T)^t``.
    """
    A = _as_matrix(A, "A")
    Q = _as_matrix(Q, "Q")
    if spectral_radius(A) >= 1.0:
        raise UnstableSystemError("unstable system: spectral radius of A >= 1")
    tol = 1e-10 * max(1.0, np.linalg.norm(Q))
    S = Q.copy()
    Ak = A.copy()
    for _ in range(max_doublings):
        S = S + Ak @ S @ Ak.T
        S = 0.5 * (S + S.T)
        if np.linalg.norm(S - A @ S @ A.T - Q) <= tol:
            return S
        Ak = Ak @ Ak
    raise UnstableSystemError("unstable system: Lyapunov iteration did not converge")


def steady_state_cov(sys: LinearSystem) -> np.ndarray:
    return solve_discrete_lyapunov(sys.A, sys.Q)


def steady_output_cov(sys: LinearSystem) -> np.ndarray:
    """Noise-only output covariance ``C Sigma C^T + R``."""
    Sigma = steady_state_cov(sys)
    W = sys.C @ Sigma @ sys.C.T + sys.R
    return 0.5 * (W + W.T)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    """Plant state plus its two noise streams (process, measurement)."""

    x: np.ndarray
    k: int = 0
    rng_seed: int = 0
    process_rng: np.random.Generator = field(default=None, repr=False)
    measurement_rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).copy()
        if self.process_rng is None or self.measurement_rng is None:
            proc, meas, _ = np.random.SeedSequence(self.rng_seed).spawn(3)
            self.process_rng = np.random.default_rng(proc)
            self.measurement_rng = np.random.default_rng(meas)

    @classmethod
    def initial(cls, sys: LinearSystem, seed: int, steady: bool = True) -> "SimState":
        """Fresh state; ``steady`` draws ``x_0 ~ N(0, Sigma)``, else ``x_0 = 0``."""
        x0 = np.zeros(sys.n)
        if steady:
            init_seq = np.random.SeedSequence(seed).spawn(3)[2]
            Sigma = steady_state_cov(sys)
            x0 = np.random.default_rng(init_seq).multivariate_normal(np.zeros(sys.n), Sigma, method="eigh")
        return cls(x=x0, k=0, rng_seed=seed)


def simulate_step(sys: LinearSystem, state: SimState, phi, w=None, v=None):
    """Emit ``y_k`` for the current state, then advance to ``x_{k+1}``.

    ``w`` and ``v`` override the seeded noise draws (the streams are not
    consumed when overridden). Returns ``(state, y)``; ``state`` is updated
    in place.
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.shape != (sys.p,):
        raise ValueError(f"phi must have length {sys.p}, got {phi.shape}")
    if state.x.shape != (sys.n,):
        raise ValueError(f"state has dimension {state.x.shape}, system has n={sys.n}")
    if v is None:
        v = sys.noise_factors[1] @ state.measurement_rng.standard_normal(sys.m)
    if w is None:
        w = sys.noise_factors[0] @ state.process_rng.standard_normal(sys.n)
    y = sys.C @ state.x + v
    state.x = sys.A @ state.x + sys.B @ phi + w
    state.k += 1
    return state, y


# ---------------------------------------------------------------------------
# Impulse response and modal form
# ---------------------------------------------------------------------------

def markov_parameters(sys: LinearSystem, tau_max: int) -> list[np.ndarray]:
    """``[C A^tau B for tau in 0..tau_max]``."""
    if tau_max < 0:
        raise ValueError("tau_max must be >= 0")
    out = []
    AkB = sys.B.copy()
    for _ in range(tau_max + 1):
        out.append(sys.C @ AkB)
        AkB = sys.A @ AkB
    return out


def canonical_order(lambdas: np.ndarray) -> np.ndarray:
    """Indices sorting by descending modulus, ties by ascending phase."""
    lambdas = np.asarray(lambdas, dtype=complex)
    mod = np.round(np.abs(lambdas), 10)
    phase = np.angle(lambdas)
    return np.lexsort((phase, -mod))


def min_pairwise_gap(lambdas: np.ndarray) -> float:
    lambdas = np.asarray(lambdas, dtype=complex)
    if lambdas.size < 2:
        return np.inf
    d = np.abs(lambdas[:, None] - lambdas[None, :])
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def conjugate_partners(lambdas: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """``partner[i]`` is the index of ``conj(lambda_i)``, or ``i`` for real roots."""
    lambdas = np.asarray(lambdas, dtype=complex)
    n = lambdas.size
    partner = np.arange(n)
    scale = max(1.0, float(np.abs(lambdas).max())) if n else 1.0
    taken = np.zeros(n, dtype=bool)
    for i in range(n):
        if taken[i] or abs(lambdas[i].imag) <= tol * scale:
            continue
        d = np.abs(lambdas - np.conj(lambdas[i]))
        d[i] = np.inf
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] <= 1e-6 * scale:
            partner[i], partner[j] = j, i
            taken[i] = taken[j] = True
    return partner


@dataclass
class ModalDecomposition:
    """``H_tau = sum_i lambdas[i]**tau * residues[i]``.

    ``residues`` has shape (n, m, p), complex.
    """

    lambdas: np.ndarray
    residues: np.ndarray

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=complex).reshape(-1)
        self.residues = np.asarray(self.residues, dtype=complex)
        if self.residues.ndim != 3 or self.residues.shape[0] != self.lambdas.size:
            raise ValueError("residues must have shape (n, m, p) matching lambdas")

    @property
    def n(self) -> int:
        return self.lambdas.size

    def markov(self, tau: int) -> np.ndarray:
        H = np.tensordot(self.lambdas ** tau, self.residues, axes=1)
        return realify(H)

    def H0(self) -> np.ndarray:
        return realify(self.residues.sum(axis=0))


def realify(M, tol: float = 1e-9) -> np.ndarray:
    """Drop a negligible imaginary part; raise if it is not negligible."""
    M = np.asarray(M)
    if not np.iscomplexobj(M):
        return M.astype(float, copy=False)
    scale = max(1.0, float(np.abs(M.real).max()) if M.size else 1.0)
    imag = float(np.abs(M.imag).max()) if M.size else 0.0
    if imag > tol * scale:
        raise ValueError(f"imaginary residue {imag:.3e} exceeds tolerance")
    return np.ascontiguousarray(M.real)


def modal_decomposition(sys: LinearSystem) -> ModalDecomposition:
    """Eigenvalues of ``A`` and residues ``C P e_i e_i^T P^{-1} B``."""
    lam, P = np.linalg.eig(sys.A)
    if min_pairwise_gap(lam) < DEGENERATE_GAP:
        raise DegenerateSpectrumError("degenerate spectrum: repeated eigenvalues")
    order = canonical_order(lam)
    lam, P = lam[order], P[:, order]
    CP = sys.C @ P                       # (m, n)
    PinvB = np.linalg.solve(P, sys.B.astype(complex))   # (n, p)
    residues = CP.T[:, :, None] * PinvB[:, None, :]
    residues = _enforce_conjugate_symmetry(lam, residues)
    return ModalDecomposition(lam, residues)


def _enforce_conjugate_symmetry(lam, residues):
    partner = conjugate_partners(lam)
    out = residues.copy()
    for i, j in enumerate(partner):
        if j == i:
            if abs(lam[i].imag) <= 1e-9 * max(1.0, abs(lam[i])):
                out[i] = out[i].real
        elif i < j:
            avg = 0.5 * (out[i] + np.conj(out[j]))
            out[i], out[j] = avg, np.conj(avg)
    return out


# ---------------------------------------------------------------------------
# Structural checks and generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuralReport:
    stable: bool
    observable: bool
    controllable: bool
    distinct_spectrum: bool
    spectral_radius: float

    @property
    def ok(self) -> bool:
        return self.stable and self.observable and self.controllable and self.distinct_spectrum


def _numerical_rank(M: np.ndarray) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def observability_matrix(A, C) -> np.ndarray:
    blocks, M = [], C
    for _ in range(A.shape[0]):
        blocks.append(M)
        M = M @ A
    return np.vstack(blocks)


def controllability_matrix(A, B) -> np.ndarray:
    blocks, M = [], B
    for _ in range(A.shape[0]):
        blocks.append(M)
        M = A @ M
    return np.hstack(blocks)


def structural_checks(sys: LinearSystem) -> StructuralReport:
    lam = np.linalg.eigvals(sys.A)
    rho = float(np.max(np.abs(lam)))
    n = sys.n
    return StructuralReport(
        stable=rho < 1.0,
        observable=_numerical_rank(observability_matrix(sys.A, sys.C)) == n,
        controllable=_numerical_rank(controllability_matrix(sys.A, sys.B)) == n,
        distinct_spectrum=min_pairwise_gap(lam) >= DEGENERATE_GAP,
        spectral_radius=rho,
    )


def random_stable_system(n: int, m: int, p: int, seed: int, rho_max: float = 0.9,
                         max_tries: int = 100) -> LinearSystem:
    """Gaussian ``A, B, C`` with ``A`` rescaled to spectral radius in
    ``[rho_max / 2, rho_max]``; ``Q = I``, ``R = I``."""
    if min(n, m, p) < 1:
        raise ValueError("n, m, p must be >= 1")
    if not 0.0 < rho_max < 1.0:
        raise ValueError("rho_max must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        A = rng.standard_normal((n, n))
        rho = spectral_radius(A)
        if rho == 0:
            continue
        A *= rho_max * rng.uniform(0.5, 1.0) / rho
        B = rng.standard_normal((n, p))
        C = rng.standard_normal((m, n))
        sys = LinearSystem(A, B, C, np.eye(n), np.eye(m))
        report = structural_checks(sys)
        if report.ok and report.spectral_radius <= rho_max:
            return sys
    raise GenerationError(f"generation failed after {max_tries} attempts")
