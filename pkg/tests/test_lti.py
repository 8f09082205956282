import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replay_watermark.lti import (
    DegenerateSpectrumError, LinearSystem, SimState, UnstableSystemError, load_system,
    markov_parameters, modal_decomposition, random_stable_system, save_system, simulate_step,
    solve_discrete_lyapunov, steady_output_cov, steady_state_cov, structural_checks,
)

from conftest import markov_by_powers, series_cov, system


# -- Lyapunov / covariances ---------------------------------------------------

def test_lyapunov_zero_dynamics():
    np.testing.assert_allclose(solve_discrete_lyapunov(np.zeros((2, 2)), np.eye(2)), np.eye(2))


def test_lyapunov_scalar():
    S = solve_discrete_lyapunov([[0.5]], [[1.0]])
    np.testing.assert_allclose(S, series_cov(np.array([[0.5]]), np.eye(1), 200), rtol=1e-12)
    np.testing.assert_allclose(S, [[4 / 3]], rtol=1e-12)


def test_lyapunov_nilpotent():
    A = np.array([[0.0, 0.9], [0.0, 0.0]])
    np.testing.assert_allclose(solve_discrete_lyapunov(A, np.eye(2)), [[1.81, 0], [0, 1]], atol=1e-14)


def test_lyapunov_rejects_unstable():
    with pytest.raises(UnstableSystemError):
        solve_discrete_lyapunov([[1.0]], [[1.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_lyapunov_matches_series(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(np.abs(np.linalg.eigvals(A)).max(), 1e-3)
    G = rng.standard_normal((n, n))
    Q = G @ G.T + 0.1 * np.eye(n)
    S = solve_discrete_lyapunov(A, Q)
    assert np.allclose(S, S.T, atol=1e-12)
    ref = series_cov(A, Q, 600)
    assert np.linalg.norm(S - ref) <= 1e-9 * np.linalg.norm(ref)


def test_output_cov_cases():
    s = system(np.eye(2) * 0.3, C=np.zeros((2, 2)), R=np.diag([2.0, 3.0]))
    np.testing.assert_allclose(steady_output_cov(s), np.diag([2.0, 3.0]))
    s = system([[0.5]])
    np.testing.assert_allclose(steady_output_cov(s), [[7 / 3]], rtol=1e-12)
    s = random_stable_system(3, 2, 2, seed=4)
    ref = s.C @ series_cov(s.A, s.Q, 2000) @ s.C.T + s.R
    assert np.linalg.norm(steady_output_cov(s) - ref) <= 1e-9 * np.linalg.norm(ref)


# -- simulation ---------------------------------------------------------------

def test_simulate_zero():
    s = system(np.eye(2) * 0.5)
    st_ = SimState(x=np.zeros(2))
    st_, y = simulate_step(s, st_, np.zeros(2), w=np.zeros(2), v=np.zeros(2))
    np.testing.assert_array_equal(y, 0)
    np.testing.assert_array_equal(st_.x, 0)
    assert st_.k == 1


def test_simulate_substitution():
    s = system(np.eye(2) * 0.5)
    st_, y = simulate_step(s, SimState(x=[1.0, 0.0]), [1.0, 0.0], w=np.zeros(2), v=np.zeros(2))
    np.testing.assert_allclose(y, [1, 0])
    np.testing.assert_allclose(st_.x, [1.5, 0])


def test_simulate_matches_straight_line_reimplementation():
    s = random_stable_system(3, 2, 2, seed=7)
    rng = np.random.default_rng(99)
    phis = rng.standard_normal((100, 2))
    state = SimState.initial(s, seed=5)
    x = state.x.copy()
    # same draws, taken from identically seeded streams
    proc, meas, _ = np.random.SeedSequence(5).spawn(3)
    prng, mrng = np.random.default_rng(proc), np.random.default_rng(meas)
    Lq, Lr = np.linalg.cholesky(s.Q), np.linalg.cholesky(s.R)
    for k in range(100):
        state, y = simulate_step(s, state, phis[k])
        v = Lr @ mrng.standard_normal(2)
        w = Lq @ prng.standard_normal(3)
        y_ref = s.C @ x + v
        x = s.A @ x + s.B @ phis[k] + w
        np.testing.assert_allclose(y, y_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.x, x, rtol=0, atol=1e-12)
    assert state.k == 100


def test_simulate_rejects_bad_shapes():
    s = system(np.eye(2) * 0.5)
    with pytest.raises(ValueError):
        simulate_step(s, SimState(x=np.zeros(2)), np.zeros(3))
    with pytest.raises(ValueError):
        simulate_step(s, SimState(x=np.zeros(3)), np.zeros(2))


def test_simulation_seeded_reproducible():
    s = random_stable_system(2, 2, 2, seed=1)
    ys = []
    for _ in range(2):
        state = SimState.initial(s, seed=[3, 4])
        ys.append([simulate_step(s, state, np.ones(2))[1] for _ in range(20)])
    np.testing.assert_array_equal(ys[0], ys[1])


# -- Markov parameters and modal form -------------------------------------------

def test_markov_zero_dynamics():
    s = system(np.zeros((2, 2)), B=[[1, 2], [3, 4]])
    H = markov_parameters(s, 3)
    np.testing.assert_allclose(H[0], s.C @ s.B)
    for Ht in H[1:]:
        np.testing.assert_array_equal(Ht, 0)


def test_markov_diagonal():
    s = system(np.diag([0.5, 0.2]))
    np.testing.assert_allclose(markov_parameters(s, 2)[2], np.diag([0.25, 0.04]))


def test_modal_diagonal():
    md = modal_decomposition(system(np.diag([0.5, 0.2])))
    np.testing.assert_allclose(md.lambdas, [0.5, 0.2])
    np.testing.assert_allclose(md.residues[0], np.diag([1, 0]), atol=1e-15)
    np.testing.assert_allclose(md.residues[1], np.diag([0, 1]), atol=1e-15)


def test_modal_rotation():
    th = 0.7
    A = 0.9 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    s = system(A)
    md = modal_decomposition(s)
    np.testing.assert_allclose(sorted(md.lambdas, key=lambda z: z.imag),
                               [0.9 * np.exp(-0.7j), 0.9 * np.exp(0.7j)], atol=1e-12)
    for tau, H in enumerate(markov_by_powers(A, s.B, s.C, 21)):
        np.testing.assert_allclose(md.markov(tau), H, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3))
def test_modal_reconstruction_property(seed, n, m, p):
    s = random_stable_system(n, m, p, seed=seed)
    md = modal_decomposition(s)
    np.testing.assert_allclose(md.residues.sum(axis=0).real, s.C @ s.B, atol=1e-9)
    for tau, H in enumerate(markov_by_powers(s.A, s.B, s.C, 30)):
        full = np.tensordot(md.lambdas ** tau, md.residues, axes=1)
        assert np.abs(full.imag).max() <= 1e-9
        np.testing.assert_allclose(full.real, H, atol=1e-9)
    # conjugate eigenvalues carry conjugate residues
    for i, lam in enumerate(md.lambdas):
        if abs(lam.imag) > 1e-9:
            j = int(np.argmin(np.abs(md.lambdas - np.conj(lam))))
            np.testing.assert_allclose(md.residues[j], np.conj(md.residues[i]), atol=1e-12)
    mod = np.abs(md.lambdas)
    assert np.all(np.diff(np.round(mod, 10)) <= 0)


def test_modal_rejects_repeated_eigenvalues():
    with pytest.raises(DegenerateSpectrumError):
        modal_decomposition(system(np.diag([0.5, 0.5])))


# -- structure and generation -------------------------------------------------

def test_structural_checks():
    assert structural_checks(system(np.diag([0.5, 0.2]))).controllable
    assert not structural_checks(system(np.diag([0.5, 0.5]), C=[[1.0, 0.0]])).observable
    assert structural_checks(system(np.diag([0.5, 0.2]), C=[[1.0, 1.0]])).observable


def test_generator_deterministic_and_seed_sensitive():
    a = random_stable_system(2, 2, 2, seed=11)
    b = random_stable_system(2, 2, 2, seed=11)
    c = random_stable_system(2, 2, 2, seed=12)
    for name in "ABCQR":
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert any(not np.array_equal(getattr(a, k), getattr(c, k)) for k in "ABC")


def test_generator_hundred_seeds_valid():
    for seed in range(100):
        rep = structural_checks(random_stable_system(2, 2, 2, seed=seed, rho_max=0.9))
        assert rep.ok and rep.spectral_radius <= 0.9


def test_system_validation_errors():
    with pytest.raises(ValueError):
        system(np.eye(2) * 0.5, Q=-np.eye(2))
    with pytest.raises(ValueError):
        system(np.eye(2) * 0.5, B=np.ones((3, 1)))
    with pytest.raises(UnstableSystemError):
        system(np.eye(2) * 1.1).validate()


def test_system_file_roundtrip(tmp_path):
    s = random_stable_system(3, 2, 1, seed=2)
    save_system(s, tmp_path / "sys.json", seed=2)
    t = load_system(tmp_path / "sys.json")
    for name in "ABCQR":
        np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
    doc = json.loads((tmp_path / "sys.json").read_text())
    assert doc["seed"] == 2
    doc["extra"] = 1
    with pytest.raises(ValueError):
        LinearSystem.from_dict(doc)
    doc.pop("extra")
    doc["A"] = [[1.5, 0, 0], [0, 0.1, 0], [0, 0, 0.2]]
    with pytest.raises(ValueError):
        LinearSystem.from_dict(doc)
