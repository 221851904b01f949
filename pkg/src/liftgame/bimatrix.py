"""Mixed equilibria of two-player cost bimatrix games and their derivatives.

Player 1 picks a row and pays ``A[i, j]``; player 2 picks a column and pays
``B[i, j]``. Both minimize. After shifting both matrices to be strictly
positive the equilibrium conditions become the LCP::

    p1 >= 0,  A_bar p2 - 1 >= 0,  p1 . (A_bar p2 - 1) = 0
    p2 >= 0,  B_bar' p1 - 1 >= 0, p2 . (B_bar' p1 - 1) = 0

whose solution normalizes to the mixed strategies ``q_j = p_j / sum(p_j)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import PivotLimitError

SUPPORT_TOL = 1e-12
WEAK_TOL = 1e-9


class BimatrixError(RuntimeError):
    pass


class DegenerateSolutionError(BimatrixError):
    pass


class NonIsolatedEquilibriumError(BimatrixError):
    """The equilibrium derivative is undefined (singular reduced system)."""


@dataclass(frozen=True, eq=False)
class CostMatrixPair:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape != B.shape:
            raise ValueError(f"cost matrices differ in shape: {A.shape} vs {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("cost matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True, eq=False)
class ShiftedGame:
    Abar: np.ndarray
    Bbar: np.ndarray
    alpha: float
    beta: float


@dataclass(frozen=True, eq=False)
class BimatrixSolution:
    p1: np.ndarray
    p2: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    support1: np.ndarray
    support2: np.ndarray
    strict: bool
    pivots: int = 0


def shift_positive(pair: CostMatrixPair, margin: float = 1.0) -> ShiftedGame:
    if not margin > 0:
        raise ValueError("margin must be positive")
    alpha = margin - float(pair.A.min())
    beta = margin - float(pair.B.min())
    return ShiftedGame(pair.A + alpha, pair.B + beta, alpha, beta)


def lemke_howson(shifted: ShiftedGame, entering_label: int = 0, max_pivots: int = 100000):
    """Lemke-Howson path from the artificial equilibrium; labels ``0..n1-1`` are
    player-1 strategies, ``n1..n1+n2-1`` player-2 strategies.

    Returns the LCP solution ``(p1, p2)``. Raises ``PivotLimitError``.
    """
    p1, p2, _ = _lemke_howson(shifted, entering_label, max_pivots)
    return p1, p2


def _lemke_howson(shifted, entering_label, max_pivots):
    Ab, Bb = shifted.Abar, shifted.Bbar
    n1, n2 = Ab.shape
    if np.any(Ab <= 0) or np.any(Bb <= 0):
        raise ValueError("shifted matrices must be strictly positive")
    if not 0 <= entering_label < n1 + n2:
        raise ValueError(f"entering label must lie in [0, {n1 + n2})")
    # both players maximize the reflected payoffs on the best-response polytopes
    Apay = np.ascontiguousarray(Ab.max() + 1.0 - Ab)
    Bpay = np.ascontiguousarray(Bb.max() + 1.0 - Bb)
    x, y, pivots = kernels.lemke_howson(Apay, Bpay, int(entering_label), int(max_pivots))
    q1, q2 = normalize(np.maximum(x, 0.0), np.maximum(y, 0.0))
    p1 = _rescale(q1, Bb.T @ q1)
    p2 = _rescale(q2, Ab @ q2)
    return p1, p2, pivots


def _rescale(q, g):
    p = q / g.min()
    p[q <= SUPPORT_TOL * q.max()] = 0.0
    return p


def normalize(p1: np.ndarray, p2: np.ndarray):
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    s1, s2 = p1.sum(), p2.sum()
    if not (s1 > 0 and s2 > 0):
        raise DegenerateSolutionError("LCP solution has a zero block")
    return p1 / s1, p2 / s2


def bmg(pair: CostMatrixPair, entering_label: int = 0, margin: float = 1.0) -> BimatrixSolution:
    """Mixed Nash equilibrium of the cost game ``(A, B)``."""
    n1, n2 = pair.shape
    if n1 == 1 and n2 == 1:
        return BimatrixSolution(
            1.0 / (pair.B + margin - pair.B.min())[0], 1.0 / (pair.A + margin - pair.A.min())[0],
            np.ones(1), np.ones(1), np.zeros(1, dtype=int), np.zeros(1, dtype=int), True,
        )
    sg = shift_positive(pair, margin)
    p1, p2, pivots = _lemke_howson(sg, entering_label, 100000)
    q1, q2 = normalize(p1, p2)
    S1 = np.flatnonzero(p1 > 0)
    S2 = np.flatnonzero(p2 > 0)
    # zero strategies that are nonetheless best responses
    weak1 = np.abs(sg.Abar @ p2 - 1.0) <= WEAK_TOL
    weak2 = np.abs(sg.Bbar.T @ p1 - 1.0) <= WEAK_TOL
    weak1[S1] = False
    weak2[S2] = False
    strict = not (weak1.any() or weak2.any())
    S1 = np.flatnonzero((p1 > 0) | weak1)
    S2 = np.flatnonzero((p2 > 0) | weak2)
    return BimatrixSolution(p1, p2, q1, q2, S1, S2, strict, pivots)


def _reduced_solve(M, rhs, transpose, what):
    """Solve ``M x = rhs`` (or ``M' x = rhs``) on the support, pseudo-inverse for non-square blocks."""
    Mt = M.T if transpose else M
    if Mt.shape[0] == Mt.shape[1]:
        try:
            cond = np.linalg.cond(Mt)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise NonIsolatedEquilibriumError(f"reduced {what} block is singular")
        return np.linalg.solve(Mt, rhs)
    if np.linalg.matrix_rank(M) < min(M.shape):
        raise NonIsolatedEquilibriumError(f"reduced {what} block is rank deficient")
    return np.linalg.pinv(Mt) @ rhs


def bmg_vjp(pair: CostMatrixPair, solution: BimatrixSolution, q1bar, q2bar, margin: float = 1.0):
    """Cotangents ``(Abar_cot, Bbar_cot)`` on the cost matrices for cotangents on ``q1, q2``.

    ``p1`` depends only on ``B`` and ``p2`` only on ``A``; the constant shifts do
    not affect ``q``.
    """
    n1, n2 = pair.shape
    gA = np.zeros((n1, n2))
    gB = np.zeros((n1, n2))
    q1bar = np.asarray(q1bar, dtype=float)
    q2bar = np.asarray(q2bar, dtype=float)
    if n1 == 1 and n2 == 1:
        return gA, gB
    S1, S2 = solution.support1, solution.support2
    sg = shift_positive(pair, margin)
    p1, p2 = solution.p1, solution.p2
    # quotient rule of q = p / sum(p)
    pb1 = (q1bar - q1bar @ solution.q1) / p1.sum()
    pb2 = (q2bar - q2bar @ solution.q2) / p2.sum()
    # skip blocks whose projected cotangent vanishes on the support (e.g. the
    # indifference condition of a zero-sum game)
    t1 = 1e-11 * np.max(np.abs(q1bar), initial=0.0) / p1.sum()
    t2 = 1e-11 * np.max(np.abs(q2bar), initial=0.0) / p2.sum()
    if np.max(np.abs(pb2[S2])) > t2:
        w = _reduced_solve(sg.Abar[np.ix_(S1, S2)], pb2[S2], True, "A")
        gA[np.ix_(S1, S2)] = -np.outer(w, p2[S2])
    if np.max(np.abs(pb1[S1])) > t1:
        v = _reduced_solve(sg.Bbar[np.ix_(S1, S2)], pb1[S1], False, "B")
        gB[np.ix_(S1, S2)] = -np.outer(p1[S1], v)
    return gA, gB


def verify_equilibrium(pair: CostMatrixPair, q1, q2, tol: float = 1e-9):
    """Check the Nash inequalities against every pure deviation. Returns ``(ok, worst_violation)``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    Aq2 = pair.A @ q2
    Bq1 = pair.B.T @ q1
    v1 = q1 @ Aq2 - Aq2.min()
    v2 = Bq1 @ q2 - Bq1.min()
    worst = float(max(v1, v2, 0.0))
    return worst <= tol, worst


def parse_bimatrix_text(text: str) -> CostMatrixPair:
    """Parse ``n1 n2`` followed by the row-major entries of ``A`` and then ``B``."""
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("missing dimensions line")
    try:
        n1, n2 = int(tokens[0]), int(tokens[1])
    except ValueError as exc:
        raise ValueError(f"bad dimensions: {tokens[:2]}") from exc
    if n1 < 1 or n2 < 1:
        raise ValueError("dimensions must be positive")
    vals = tokens[2:]
    if len(vals) != 2 * n1 * n2:
        raise ValueError(f"expected {2 * n1 * n2} matrix entries, found {len(vals)}")
    data = np.array([float(v) for v in vals])
    return CostMatrixPair(data[: n1 * n2].reshape(n1, n2), data[n1 * n2 :].reshape(n1, n2))


def format_bimatrix_text(pair: CostMatrixPair) -> str:
    n1, n2 = pair.shape
    lines = [f"{n1} {n2}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in pair.A]
    lines += [" ".join(repr(float(v)) for v in row) for row in pair.B]
    return "\n".join(lines) + "\n"


__all__ = [
    "BimatrixError", "BimatrixSolution", "CostMatrixPair", "DegenerateSolutionError",
    "NonIsolatedEquilibriumError", "PivotLimitError", "ShiftedGame", "bmg", "bmg_vjp",
    "format_bimatrix_text", "lemke_howson", "normalize", "parse_bimatrix_text",
    "shift_positive", "verify_equilibrium",
]
