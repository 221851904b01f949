"""Lifted game: candidate references -> trajectories -> cost matrices -> mixed equilibrium -> expected losses.

``forward`` evaluates the pipeline and ``backward`` differentiates either
player's expected loss with respect to every candidate reference of both
players. With one candidate per player the bimatrix layer is the constant
``(1, 1)`` and the lifted game is the ordinary reference game.
"""
from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bimatrix as bm
from . import tag_env as te
from . import traj_opt as to

log = logging.getLogger(__name__)


class LiftedGameError(RuntimeError):
    pass


class CandidateInfeasibleError(LiftedGameError):
    def __init__(self, player, candidate, cause):
        super().__init__(f"player {player} candidate {candidate}: {cause}")
        self.player = player
        self.candidate = candidate


class DivergenceError(LiftedGameError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class ReferenceBundle:
    """``refs[j]`` is the ``j``-th candidate reference of ``player`` (1 or 2)."""

    player: int
    refs: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.refs, dtype=float))
        if r.shape[0] < 1:
            raise ValueError("a bundle needs at least one reference")
        if not np.all(np.isfinite(r)):
            raise ValueError("references must be finite")
        object.__setattr__(self, "refs", r)

    def __len__(self):
        return self.refs.shape[0]


@dataclass(frozen=True, eq=False)
class GameDescription:
    """Everything the pipeline needs about a two-player game.

    ``cost_matrices(taus1, taus2) -> (A, B)`` evaluates both costs on all
    candidate pairs; ``cost_matrices_vjp(taus1, taus2, Abar, Bbar)`` pulls
    cotangents on the matrices back to the stacked trajectories.
    ``sample_reference(player, rng)`` draws one random reference.
    """

    name: str
    spec1: to.TrajProblemSpec
    spec2: to.TrajProblemSpec
    cost_matrices: Callable
    cost_matrices_vjp: Callable
    sample_reference: Callable
    sticky_weight: float = 1e-2
    zero_sum: bool = False
    env: te.TagEnvSpec | None = None

    def spec(self, player: int) -> to.TrajProblemSpec:
        return self.spec1 if player == 1 else self.spec2

    def random_bundle(self, player: int, n: int, rng: np.random.Generator) -> ReferenceBundle:
        return ReferenceBundle(player, np.array([self.sample_reference(player, rng) for _ in range(n)]))


def tag_game(env: te.TagEnvSpec | None = None, mode: str = "control", control_weight: float = 0.1,
             config: to.SolverConfig = to.DEFAULT_CONFIG) -> GameDescription:
    """Zero-sum tag: pursuer (player 1) minimizes mean squared distance plus net control effort."""
    env = env or te.TagEnvSpec()
    if mode == "control":
        spec = to.control_reference_spec(env, config)
    elif mode == "goal":
        spec = to.goal_reference_spec(env, control_weight, config)
    elif mode == "identity":
        spec = to.identity_spec(env, config)
    else:
        raise ValueError(f"unknown reference mode {mode!r}")

    def costs(t1, t2):
        A = te.pursuer_cost_matrix(t1, t2, env)
        return A, -A

    def costs_vjp(t1, t2, Abar, Bbar):
        return te.pursuer_cost_matrix_vjp(t1, t2, Abar - Bbar, env)

    def sample(player, rng):
        if mode == "control":
            return rng.uniform(-env.u_max, env.u_max, spec.ref_dim)
        if mode == "goal":
            return te.sample_position(env, rng)
        return rng.uniform(-1.0, 1.0, spec.ref_dim)

    return GameDescription(f"tag-{mode}", spec, spec, costs, costs_vjp, sample, config.sticky_weight, True, env)


def toy_interval_game(regularized: bool = True, lo: float = -1.0, hi: float = 1.0,
                      sticky_weight: float = 1e-2) -> GameDescription:
    """Scalar game on ``[lo, hi]``: player 1 pays ``(t1 - t2)^2``; player 2 pays the
    negation, minus ``t2^2`` when ``regularized``."""
    spec = to.box_spec(lo, hi)
    reg = 1.0 if regularized else 0.0

    def costs(t1, t2):
        a = t1[:, :1]
        b = t2[:, :1].T
        A = (a - b) ** 2
        return A, -A - reg * b**2

    def costs_vjp(t1, t2, Abar, Bbar):
        a = t1[:, :1]
        b = t2[:, :1].T
        d = 2.0 * (a - b) * (Abar - Bbar)
        g1 = d.sum(1)[:, None]
        g2 = (-d.sum(0) - 2.0 * reg * b[0] * Bbar.sum(0))[:, None]
        return g1, g2

    def sample(player, rng):
        return rng.uniform(lo, hi, 1)

    return GameDescription("toy-interval" if regularized else "toy-interval-unregularized",
                           spec, spec, costs, costs_vjp, sample, sticky_weight, not regularized)


@dataclass(frozen=True, eq=False)
class LiftedSolution:
    refs1: np.ndarray
    refs2: np.ndarray
    taus1: np.ndarray
    taus2: np.ndarray
    A: np.ndarray
    B: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    L1: float
    L2: float
    qp1: list
    qp2: list
    cons1: to.LinearConstraintSet
    cons2: to.LinearConstraintSet
    equilibrium: bm.BimatrixSolution
    game: GameDescription = field(repr=False)

    def to_json(self) -> dict:
        return {
            "game": self.game.name,
            "references": {"player1": self.refs1.tolist(), "player2": self.refs2.tolist()},
            "trajectories": {"player1": self.taus1.tolist(), "player2": self.taus2.tolist()},
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "q1": self.q1.tolist(),
            "q2": self.q2.tolist(),
            "L1": self.L1,
            "L2": self.L2,
        }


def _solve_candidates(bundle, x0, spec, cons, player, pool):
    def one(j):
        try:
            return to.solve_traj(bundle.refs[j], x0, spec, cons)
        except to.TrajError as exc:
            raise CandidateInfeasibleError(player, j, exc) from exc

    idx = range(len(bundle))
    if pool is None:
        return [one(j) for j in idx]
    return list(pool.map(one, idx))


def forward(
    xi1: ReferenceBundle,
    xi2: ReferenceBundle,
    x1: np.ndarray,
    x2: np.ndarray,
    game: GameDescription,
    pool: Executor | None = None,
    constraints: tuple | None = None,
    reuse: tuple = (None, None),
) -> LiftedSolution:
    """Evaluate the lifted pipeline. ``pool`` optionally runs candidate solves concurrently.

    ``reuse[i]`` may hold the candidate solutions of player ``i + 1`` from an
    earlier call with the same references and state; they are used as is.
    """
    if constraints is None:
        try:
            c1 = to.build_constraints(x1, game.spec1, game.env)
        except to.TrajError as exc:
            raise CandidateInfeasibleError(1, None, exc) from exc
        try:
            c2 = to.build_constraints(x2, game.spec2, game.env)
        except to.TrajError as exc:
            raise CandidateInfeasibleError(2, None, exc) from exc
    else:
        c1, c2 = constraints
    qp1 = reuse[0] if reuse[0] is not None else _solve_candidates(xi1, x1, game.spec1, c1, 1, pool)
    qp2 = reuse[1] if reuse[1] is not None else _solve_candidates(xi2, x2, game.spec2, c2, 2, pool)
    taus1 = np.array([s.tau for s in qp1])
    taus2 = np.array([s.tau for s in qp2])
    tol = game.spec1.config.feas_tol
    for player, cons, taus in ((1, c1, taus1), (2, c2, taus2)):
        for j, t in enumerate(taus):
            if cons.violation(t) > tol:
                raise CandidateInfeasibleError(player, j, "returned trajectory violates its constraints")
    A, B = game.cost_matrices(taus1, taus2)
    eq = bm.bmg(bm.CostMatrixPair(A, B))
    L1 = float(eq.q1 @ A @ eq.q2)
    L2 = float(eq.q1 @ B @ eq.q2)
    return LiftedSolution(xi1.refs, xi2.refs, taus1, taus2, A, B, eq.q1, eq.q2, L1, L2, qp1, qp2, c1, c2, eq, game)


def backward(
    sol: LiftedSolution,
    which: int,
    wrt: tuple = (1, 2),
    on_degenerate: str = "raise",
    seed: float = 1.0,
) -> dict:
    """Gradient of ``seed * L_which`` with respect to the candidate references.

    Returns ``{player: array shaped like that player's references}`` for each
    player in ``wrt``. ``on_degenerate="direct"`` drops the contribution through
    the equilibrium weights when the bimatrix derivative is undefined (the
    caller can inspect ``result["degenerate"]``).
    """
    M = sol.A if which == 1 else sol.B
    q1, q2 = sol.q1, sol.q2
    Mbar = seed * np.outer(q1, q2)
    q1bar = seed * (M @ q2)
    q2bar = seed * (M.T @ q1)
    degenerate = False
    try:
        gA, gB = bm.bmg_vjp(bm.CostMatrixPair(sol.A, sol.B), sol.equilibrium, q1bar, q2bar)
    except bm.NonIsolatedEquilibriumError:
        if on_degenerate != "direct":
            raise
        degenerate = True
        gA = np.zeros_like(sol.A)
        gB = np.zeros_like(sol.B)
    if which == 1:
        gA = gA + Mbar
    else:
        gB = gB + Mbar
    tb1, tb2 = sol.game.cost_matrices_vjp(sol.taus1, sol.taus2, gA, gB)
    out = {"degenerate": degenerate}
    for player in wrt:
        spec = sol.game.spec(player)
        qps, cons, tb = (sol.qp1, sol.cons1, tb1) if player == 1 else (sol.qp2, sol.cons2, tb2)
        g = np.zeros_like(sol.refs1 if player == 1 else sol.refs2)
        for j, s in enumerate(qps):
            if np.any(tb[j]):
                g[j] = to.traj_vjp(s, spec, cons, tb[j])
        out[player] = g
    return out


def sticky_gradient(sol: LiftedSolution, player: int) -> tuple[float, np.ndarray]:
    """Weighted sticky-constraint penalty summed over a player's candidates, and its gradient."""
    game = sol.game
    spec = game.spec(player)
    refs, qps, cons = (sol.refs1, sol.qp1, sol.cons1) if player == 1 else (sol.refs2, sol.qp2, sol.cons2)
    total = 0.0
    g = np.zeros_like(refs)
    for j in range(len(refs)):
        v, gj = to.sticky_penalty(refs[j], cons, spec, qps[j])
        total += v
        g[j] = gj
    return game.sticky_weight * total, game.sticky_weight * g


def player_gradients(sol: LiftedSolution, sticky: bool = True, on_degenerate: str = "direct",
                     players: tuple = (1, 2)):
    """``(grad_1 L_1, grad_2 L_2, degenerate)`` at the same iterate, sticky penalty included.

    Gradients of players missing from ``players`` are returned as zeros.
    """
    out = [np.zeros_like(sol.refs1), np.zeros_like(sol.refs2)]
    degenerate = False
    for p in (1, 2):
        if p not in players:
            continue
        g = backward(sol, p, wrt=(p,), on_degenerate=on_degenerate)
        degenerate |= g["degenerate"]
        out[p - 1] = g[p] + (sticky_gradient(sol, p)[1] if sticky else 0.0)
    return out[0], out[1], degenerate


@dataclass
class GradientPlayTrace:
    values: list = field(default_factory=list)  # L1 per step
    grad_norms: list = field(default_factory=list)  # (|g1|, |g2|) per step
    refs1: list = field(default_factory=list)
    refs2: list = field(default_factory=list)
    taus1: list = field(default_factory=list)
    taus2: list = field(default_factory=list)
    degenerate_steps: int = 0
    converged: bool = False


def gradient_play_references(
    x1: np.ndarray,
    x2: np.ndarray,
    n1: int,
    n2: int,
    steps: int,
    rates,
    rng: np.random.Generator,
    game: GameDescription,
    tol: float = 1e-6,
    init: tuple | None = None,
    record_refs: bool = False,
    sticky: bool = True,
):
    """Simultaneous gradient play on candidate references.

    Both players' gradients are evaluated at the same iterate and then both
    bundles are updated. Stops after ``steps`` updates or once both gradient
    norms fall below ``tol``. A player with rate zero keeps its bundle (its
    candidate solutions are computed once). Returns ``(bundle1, bundle2, trace)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    r1, r2 = (rates, rates) if np.isscalar(rates) else rates
    if r1 < 0 or r2 < 0:
        raise ValueError("rates must be nonnegative")
    if init is None:
        b1 = game.random_bundle(1, n1, rng)
        b2 = game.random_bundle(2, n2, rng)
    else:
        b1, b2 = init
    c1 = to.build_constraints(x1, game.spec1, game.env)
    c2 = to.build_constraints(x2, game.spec2, game.env)
    trace = GradientPlayTrace()
    reuse = [None, None]
    for k in range(steps):
        sol = forward(b1, b2, x1, x2, game, constraints=(c1, c2), reuse=tuple(reuse))
        if r1 == 0:
            reuse[0] = sol.qp1
        if r2 == 0:
            reuse[1] = sol.qp2
        if not np.isfinite(sol.L1):
            raise DivergenceError(k)
        d1, d2, degen = player_gradients(sol, sticky, players=(1 if r1 else None, 2 if r2 else None))
        trace.degenerate_steps += int(degen)
        n1g, n2g = float(np.linalg.norm(d1)), float(np.linalg.norm(d2))
        if not (np.isfinite(n1g) and np.isfinite(n2g)):
            raise DivergenceError(k)
        trace.values.append(sol.L1)
        trace.grad_norms.append((n1g, n2g))
        if record_refs:
            trace.refs1.append(b1.refs.copy())
            trace.refs2.append(b2.refs.copy())
            trace.taus1.append(sol.taus1.copy())
            trace.taus2.append(sol.taus2.copy())
        if n1g < tol and n2g < tol:
            trace.converged = True
            break
        if r1:
            b1 = ReferenceBundle(1, b1.refs - r1 * d1)
        if r2:
            b2 = ReferenceBundle(2, b2.refs - r2 * d2)
    return b1, b2, trace


def solution_trajectories(sol: LiftedSolution, env: te.TagEnvSpec):
    """Candidate trajectories of both players as ``Trajectory`` objects."""
    T = env.horizon
    return ([te.Trajectory.unflatten(t, T) for t in sol.taus1], [te.Trajectory.unflatten(t, T) for t in sol.taus2])
