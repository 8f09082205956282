"""Shared independent oracles (plain series / matrix powers) and the
acceptance summary printer."""
import numpy as np
import pytest

from replay_watermark.lti import LinearSystem


def series_cov(A, Q, terms=2000):
    """sum_t A^t Q (A^T)^t by brute-force accumulation."""
    S = np.zeros_like(Q, dtype=float)
    P = np.eye(A.shape[0])
    for _ in range(terms):
        S += P @ Q @ P.T
        P = A @ P
    return S


def markov_by_powers(A, B, C, count):
    out, P = [], np.eye(A.shape[0])
    for _ in range(count):
        out.append(C @ P @ B)
        P = A @ P
    return out


def truncated_sums(sys: LinearSystem, U, Wcal, Xw, T=500):
    """(Ucal, P, Xdesign) accumulated term by term for tau <= T."""
    Hs = markov_by_powers(sys.A, sys.B, sys.C, T + 1)
    Winv = np.linalg.inv(Wcal)
    Ucal = sum(H @ U @ H.T for H in Hs)
    P = sum(H.T @ Winv @ H for H in Hs)
    Xd = sum(H.T @ Xw.X_yy @ H for H in Hs)
    H0 = Hs[0]
    Xd = Xd + H0.T @ Xw.X_yphi + Xw.X_phiy @ H0 + Xw.X_phiphi
    return Ucal, P, Xd


def system(A, B=None, C=None, Q=None, R=None) -> LinearSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.eye(n) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(C.shape[0]) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    return LinearSystem(A, B, C, Q, R)


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, str] = {}


@pytest.fixture
def note(request):
    """Attach measured values to the summary line of a criterion test."""
    mark = request.node.get_closest_marker("criterion")

    def _note(text):
        _NOTES[mark.args[0]] = text
    return _note


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _ACCEPTANCE[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        detail = f" ({_NOTES[number]})" if number in _NOTES else ""
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}{detail}")
