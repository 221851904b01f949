"""Reference-tracking trajectory QP, its solution map derivative, and the sticky-constraint penalty.

Each player's trajectory is the solution of::

    min_tau  1/2 |G tau - xi|^2 + 1/2 |H tau|^2
    s.t.     A_eq tau = b_eq,   lb <= C tau <= ub

The equality block (dynamics and initial state) never changes shape, only its
right-hand side, so every ``TrajProblemSpec`` condenses it away once: with
``Z`` an orthonormal basis of ``null(A_eq)`` and ``tau = tau_p + Z v`` the
problem becomes a small inequality-constrained QP in ``v``. That QP is solved
with ADMM until the active set settles, then polished by solving the reduced
KKT system, which yields exact multipliers for differentiation. When ADMM
stalls or the polish cycles, a Goldfarb-Idnani dual active-set method takes
over; it terminates finitely and returns the same exact active-set solution.

Multiplier convention: ``lam[j] > 0`` means the upper bound of row ``j`` is
active, ``lam[j] < 0`` the lower bound. Stationarity reads
``(G'G + H'H) tau - G' xi + A_eq' nu + C' lam = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from . import kernels
from .tag_env import N_CONTROL, N_STATE, TagEnvSpec, transition_matrices


class TrajError(RuntimeError):
    pass


class InfeasibleError(TrajError):
    """The trajectory constraint set is empty."""


class NonConvergenceError(TrajError):
    def __init__(self, msg, best_residual):
        super().__init__(f"{msg} (best residual {best_residual:.3e})")
        self.best_residual = best_residual


class DegenerateDerivativeError(TrajError):
    """The reduced KKT system is singular; the solution is not isolated."""


@dataclass(frozen=True)
class SolverConfig:
    """All numerical tolerances and ADMM settings in one place."""

    eps_prim: float = 1e-8
    eps_dual: float = 1e-8
    feas_tol: float = 1e-6
    weak_tol: float = 1e-7
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    admm_eps_abs: float = 1e-6
    admm_eps_rel: float = 1e-6
    admm_eps_inf: float = 1e-7
    admm_max_iter: int = 20000
    admm_fallback_iter: int = 500
    admm_chunk: int = 25
    polish_rounds: int = 25
    polish_delta: float = 1e-11
    polish_refine: int = 3
    sticky_weight: float = 1e-2


DEFAULT_CONFIG = SolverConfig()


@dataclass(frozen=True, eq=False)
class ConstraintStructure:
    """Shape of a player's constraint set; only ``b_eq = E0 @ x0 + e0`` varies with ``x0``.

    ``groups`` names contiguous row blocks of ``C`` (used for reporting and tests).
    """

    A_eq: np.ndarray
    E0: np.ndarray
    e0: np.ndarray
    C: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.A_eq.shape[0] != self.E0.shape[0] or self.e0.shape != (self.A_eq.shape[0],):
            raise ValueError("equality rhs dimensions do not match A_eq rows")
        if self.C.shape[0] != len(self.lb) or self.C.shape[0] != len(self.ub):
            raise ValueError("inequality bounds do not match C rows")
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")

    @property
    def n(self) -> int:
        return self.C.shape[1]


@dataclass(frozen=True, eq=False)
class LinearConstraintSet:
    structure: ConstraintStructure
    b_eq: np.ndarray

    A_eq = property(lambda self: self.structure.A_eq)
    C = property(lambda self: self.structure.C)
    lb = property(lambda self: self.structure.lb)
    ub = property(lambda self: self.structure.ub)

    def violation(self, tau: np.ndarray) -> float:
        """Largest constraint violation of ``tau`` (0 if feasible)."""
        s = self.structure
        eq = np.max(np.abs(s.A_eq @ tau - self.b_eq), initial=0.0)
        g = s.C @ tau
        ineq = np.max(np.maximum(g - s.ub, s.lb - g), initial=0.0)
        return float(max(eq, ineq, 0.0))


@dataclass(frozen=True, eq=False)
class QpSolution:
    tau: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    active: np.ndarray  # -1 lower, 0 inactive, +1 upper
    weak: np.ndarray  # active rows whose multiplier is below the weak tolerance
    kkt_residual: float
    stationarity: float
    iterations: int

    @property
    def strict(self) -> np.ndarray:
        return (self.active != 0) & ~self.weak


class _Workspace:
    """Condensed data shared by every solve of one problem spec. Read-only after construction."""

    def __init__(self, G, H, s: ConstraintStructure, cfg: SolverConfig):
        n = s.n
        self.P = G.T @ G + H.T @ H
        if s.A_eq.shape[0]:
            self.Z = sla.null_space(s.A_eq)
            self.eq_pinv = np.linalg.pinv(s.A_eq)
            self.nu_map = np.linalg.pinv(s.A_eq.T)
        else:
            self.Z = np.eye(n)
            self.eq_pinv = np.zeros((n, 0))
            self.nu_map = np.zeros((0, n))
        self.Q = self.Z.T @ self.P @ self.Z
        eig = np.linalg.eigvalsh(self.Q) if self.Q.size else np.array([1.0])
        if eig.min() <= 1e-10 * max(1.0, eig.max()):
            raise ValueError("objective is not strictly convex on the equality-constrained subspace")
        self.GZ = G @ self.Z
        Dfull = s.C @ self.Z
        norms = np.linalg.norm(Dfull, axis=1)
        self.row_norm = norms
        scale = max(1.0, float(np.max(np.abs(s.C), initial=0.0)))
        self.rows = np.flatnonzero(norms > 1e-12 * scale)
        self.const_rows = np.flatnonzero(norms <= 1e-12 * scale)
        self.D = np.ascontiguousarray(Dfull[self.rows])
        self.row_scale = 1.0 / norms[self.rows]
        self.Ds = np.ascontiguousarray(self.D * self.row_scale[:, None])
        self.rho = cfg.rho * float(np.mean(np.diag(self.Q)))
        K = self.Q + cfg.sigma * np.eye(len(self.Q)) + self.rho * self.Ds.T @ self.Ds
        self.Kinv = np.ascontiguousarray(np.linalg.inv(K))
        self.Qc = np.ascontiguousarray(self.Q)
        self.Qinv = np.linalg.inv(self.Q)
        self.DQinv = self.D @ self.Qinv
        self.W = self.DQinv @ self.D.T


@dataclass(frozen=True, eq=False)
class TrajProblemSpec:
    """Objective matrices and constraint structure of one player's trajectory QP.

    ``mode`` is ``"identity"`` (reference lives in trajectory space),
    ``"control"`` (control reference), ``"goal"`` (terminal-position reference)
    or ``"custom"``.
    """

    G: np.ndarray
    H: np.ndarray
    structure: ConstraintStructure
    horizon: int = 1
    n_state: int = 0
    n_control: int = 0
    mode: str = "custom"
    config: SolverConfig = DEFAULT_CONFIG

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "H", H)
        if G.shape[1] != self.structure.n or H.shape[1] != self.structure.n:
            raise ValueError("G and H must act on the trajectory dimension")
        if np.linalg.matrix_rank(G) != G.shape[0]:
            raise ValueError("G must have full row rank")
        object.__setattr__(self, "_ws", _Workspace(G, H, self.structure, self.config))

    @property
    def ref_dim(self) -> int:
        return self.G.shape[0]

    @property
    def traj_dim(self) -> int:
        return self.structure.n


# ----------------------------------------------------------------------------
# tag constraint structure and problem specs


def tag_constraint_structure(env: TagEnvSpec) -> ConstraintStructure:
    """Double-integrator dynamics, arena walls, speed polytope, input box, terminal braking rows."""
    T, nx, nu = env.horizon, N_STATE, N_CONTROL
    n = T * (nx + nu)
    ix = lambda t: slice(nx * t, nx * (t + 1))
    iu = lambda t: slice(nx * T + nu * t, nx * T + nu * (t + 1))
    F, E = transition_matrices(env.dt)

    A_eq = np.zeros((nx * T, n))
    A_eq[0:nx, ix(0)] = np.eye(nx)
    for t in range(T - 1):
        r = slice(nx * (t + 1), nx * (t + 2))
        A_eq[r, ix(t + 1)] = np.eye(nx)
        A_eq[r, ix(t)] = -F
        A_eq[r, iu(t)] = -E
    E0 = np.zeros((nx * T, nx))
    E0[:nx] = np.eye(nx)

    wn, wb = env.walls
    sn, sb = env.speed_halfspaces
    rows, lbs, ubs, groups = [], [], [], {}

    def block(name, mats, lo, hi):
        start = len(rows)
        rows.extend(mats)
        lbs.extend(lo)
        ubs.extend(hi)
        groups[name] = slice(start, len(rows))

    pos, spd, ctl = [], [], []
    for t in range(T):
        for k in range(len(wn)):
            r = np.zeros(n)
            r[ix(t)][:2] = wn[k]
            pos.append(r)
        for k in range(len(sn)):
            r = np.zeros(n)
            r[ix(t)][2:] = sn[k]
            spd.append(r)
        for a in range(nu):
            r = np.zeros(n)
            r[iu(t)][a] = 1.0
            ctl.append(r)
    block("position", pos, [-np.inf] * len(pos), np.tile(wb, T))
    block("speed", spd, [-np.inf] * len(spd), np.tile(sb, T))
    block("control", ctl, [-env.u_max] * len(ctl), [env.u_max] * len(ctl))
    if env.terminal_braking:
        c = env.v_max / env.u_max
        term = []
        for k in range(len(wn)):
            r = np.zeros(n)
            r[ix(T - 1)][:2] = wn[k]
            r[ix(T - 1)][2:] = c * wn[k]
            term.append(r)
        block("terminal", term, [-np.inf] * len(term), list(wb))
    return ConstraintStructure(A_eq, E0, np.zeros(nx * T), np.array(rows), np.array(lbs), np.array(ubs), groups)


def _control_selector(env: TagEnvSpec) -> np.ndarray:
    T = env.horizon
    S = np.zeros((T * N_CONTROL, env.traj_dim))
    S[:, T * N_STATE :] = np.eye(T * N_CONTROL)
    return S


def control_reference_spec(env: TagEnvSpec, config: SolverConfig = DEFAULT_CONFIG) -> TrajProblemSpec:
    """``G = [0 I]``: the reference is a control sequence."""
    s = tag_constraint_structure(env)
    G = _control_selector(env)
    return TrajProblemSpec(G, np.zeros((1, env.traj_dim)), s, env.horizon, N_STATE, N_CONTROL, "control", config)


def goal_reference_spec(env: TagEnvSpec, control_weight: float = 0.1, config: SolverConfig = DEFAULT_CONFIG) -> TrajProblemSpec:
    """The reference is a terminal position; controls are regularized by ``H``."""
    s = tag_constraint_structure(env)
    T = env.horizon
    G = np.zeros((2, env.traj_dim))
    G[:, N_STATE * (T - 1) : N_STATE * (T - 1) + 2] = np.eye(2)
    H = np.sqrt(control_weight) * _control_selector(env)
    return TrajProblemSpec(G, H, s, env.horizon, N_STATE, N_CONTROL, "goal", config)


def identity_spec(env: TagEnvSpec, config: SolverConfig = DEFAULT_CONFIG) -> TrajProblemSpec:
    """``G = I, H = 0``: the reference is a full trajectory."""
    s = tag_constraint_structure(env)
    n = env.traj_dim
    return TrajProblemSpec(np.eye(n), np.zeros((1, n)), s, env.horizon, N_STATE, N_CONTROL, "identity", config)


def box_spec(lo: float, hi: float, config: SolverConfig = DEFAULT_CONFIG) -> TrajProblemSpec:
    """Scalar ``min 1/2 (tau - xi)^2  s.t.  lo <= tau <= hi`` (no dynamics)."""
    s = ConstraintStructure(np.zeros((0, 1)), np.zeros((0, 0)), np.zeros(0), np.ones((1, 1)), np.array([lo]), np.array([hi]))
    return TrajProblemSpec(np.eye(1), np.zeros((1, 1)), s, 1, 0, 1, "identity", config)


# ----------------------------------------------------------------------------
# solve


def build_constraints(x0: np.ndarray, spec: TrajProblemSpec, env: TagEnvSpec | None = None) -> LinearConstraintSet:
    """Constraint set for initial state ``x0``.

    Rows that do not depend on the free variables (they only see the pinned
    initial state) are checked immediately; an ``x0`` outside the arena or
    speed limits raises ``InfeasibleError``.
    """
    s = spec.structure
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    b_eq = s.E0 @ x0 + s.e0 if s.E0.size else s.e0.copy()
    cons = LinearConstraintSet(s, b_eq)
    ws = spec._ws
    if len(ws.const_rows):
        tau_p = ws.eq_pinv @ b_eq
        g = s.C[ws.const_rows] @ tau_p
        tol = spec.config.feas_tol
        bad = (g > s.ub[ws.const_rows] + tol) | (g < s.lb[ws.const_rows] - tol)
        if np.any(bad):
            raise InfeasibleError(f"initial state violates constraint rows {ws.const_rows[bad].tolist()}")
    return cons


def _kkt_solve(Q, DS, rhs_v, rhs_l, delta, refine):
    """Solve ``[[Q, DS'], [DS, 0]] [v; l] = [rhs_v; rhs_l]`` with regularization and refinement."""
    n, k = Q.shape[0], DS.shape[0]
    K0 = np.zeros((n + k, n + k))
    K0[:n, :n] = Q
    K0[:n, n:] = DS.T
    K0[n:, :n] = DS
    Kd = K0.copy()
    Kd[:n, :n] += delta * np.eye(n)
    Kd[n:, n:] -= delta * np.eye(k)
    b = np.concatenate([rhs_v, rhs_l])
    lu = sla.lu_factor(Kd, check_finite=False)
    sol = sla.lu_solve(lu, b, check_finite=False)
    for _ in range(refine):
        sol = sol + sla.lu_solve(lu, b - K0 @ sol, check_finite=False)
    return sol[:n], sol[n:]


def _active_solve(ws, cfg, S, c, bS):
    """Equality-constrained minimizer with rows ``S`` held at ``bS``, via the Schur complement."""
    v_free = -(ws.Qinv @ c)
    if len(S) == 0:
        return v_free, np.zeros(0)
    WS = ws.W[np.ix_(S, S)]
    try:
        cf = sla.cho_factor(WS, check_finite=False)
        lamS = sla.cho_solve(cf, ws.D[S] @ v_free - bS, check_finite=False)
        ok = np.all(np.isfinite(lamS)) and np.min(np.abs(np.diag(cf[0]))) > 1e-7 * np.sqrt(np.max(np.diag(WS)))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        return _kkt_solve(ws.Qc, ws.D[S], -c, bS, cfg.polish_delta, cfg.polish_refine)
    v = v_free - ws.DQinv[S].T @ lamS
    # one refinement step on the active-row residual
    r = ws.D[S] @ v - bS
    if np.any(r):
        dl = sla.cho_solve(cf, r, check_finite=False)
        lamS = lamS + dl
        v = v - ws.DQinv[S].T @ dl
    return v, lamS


def _polish(ws, cfg, c, l, u, lower, upper):
    """Primal-dual active-set refinement from an initial guess of the active rows.

    Returns ``(v, lam_condensed)`` or ``None`` if the active set does not settle.
    """
    m = len(l)
    lower = lower.copy()
    upper = upper.copy()
    seen = set()
    ptol = 1e-10 * max(1.0, float(np.max(np.abs(np.concatenate([l[np.isfinite(l)], u[np.isfinite(u)]])), initial=1.0)))
    dtol = 1e-12
    for _ in range(cfg.polish_rounds):
        key = (lower.tobytes(), upper.tobytes())
        if key in seen:
            return None
        seen.add(key)
        S = np.flatnonzero(lower | upper)
        bS = np.where(upper[S], u[S], l[S])
        v, lamS = _active_solve(ws, cfg, S, c, bS)
        g = ws.D @ v
        lam = np.zeros(m)
        lam[S] = lamS
        free = ~(lower | upper)
        add_up = free & (g > u + ptol)
        add_lo = free & (g < l - ptol)
        drop = (upper & (lam < -dtol)) | (lower & (lam > dtol))
        if not (add_up.any() or add_lo.any() or drop.any()):
            return v, lam
        upper = (upper & ~drop) | add_up
        lower = (lower & ~drop) | add_lo
    return None


def _dual_active_set(ws, cfg, c, l, u, max_iter=2000):
    """Goldfarb-Idnani dual active-set method on ``min 1/2 v'Qv + c'v, l <= Dv <= u``.

    Starts from the unconstrained minimizer and adds the most violated row
    each round; terminates finitely. Returns ``(v, lam_condensed)``.
    """
    m = len(l)
    ptol = 1e-10 * max(1.0, float(np.max(np.abs(np.concatenate([l[np.isfinite(l)], u[np.isfinite(u)]])), initial=1.0)))
    v = -(ws.Qinv @ c)
    K, sig, mu = [], [], []  # active rows, +1 lower / -1 upper, multipliers (>= 0)
    for _ in range(max_iter):
        g = ws.D @ v
        viol = np.maximum(np.where(np.isfinite(u), g - u, -np.inf), np.where(np.isfinite(l), l - g, -np.inf))
        viol[K] = -np.inf
        p = int(np.argmax(viol)) if m else 0
        if m == 0 or viol[p] <= ptol:
            break
        sp = 1.0 if l[p] - g[p] >= g[p] - u[p] else -1.0
        bp = l[p] if sp > 0 else u[p]
        mup = 0.0
        while True:
            if K:
                sK = np.array(sig)
                M = np.outer(sK, sK) * ws.W[np.ix_(K, K)]
                r = np.linalg.solve(M, sK * sp * ws.W[K, p])
                z = sp * ws.DQinv[p] - (sK * r) @ ws.DQinv[K]
            else:
                r = np.zeros(0)
                z = sp * ws.DQinv[p]
            zn = sp * (ws.D[p] @ z)
            pos = np.flatnonzero(r > 1e-14)
            t1, jb = np.inf, -1
            if len(pos):
                ratios = np.array(mu)[pos] / r[pos]
                jb = int(pos[np.argmin(ratios)])
                t1 = float(ratios.min())
            s = sp * (ws.D[p] @ v - bp)
            t2 = -s / zn if zn > 1e-14 * max(1.0, ws.W[p, p]) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise InfeasibleError("trajectory constraints are infeasible (dual active-set certificate)")
            t = min(t1, t2)
            if np.isfinite(t2):
                v = v + t * z
            mu = list(np.array(mu) - t * r) if K else []
            mup += t
            if t2 <= t1:
                K.append(p)
                sig.append(sp)
                mu.append(mup)
                break
            del K[jb], sig[jb], mu[jb]
    else:
        raise NonConvergenceError("dual active-set method hit its iteration limit", float(np.max(viol)))
    S = np.array(K, dtype=int)
    lam = np.zeros(m)
    if len(S):
        # recompute on the final set for accuracy
        bS = np.where(np.array(sig) < 0, u[S], l[S])
        v, lamS = _active_solve(ws, cfg, S, c, bS)
        lam[S] = lamS
    return v, lam


def solve_traj(
    xi: np.ndarray,
    x0: np.ndarray,
    spec: TrajProblemSpec,
    constraints: LinearConstraintSet | None = None,
    guess: np.ndarray | None = None,
) -> QpSolution:
    """Solve the reference-tracking QP for reference ``xi`` from initial state ``x0``.

    ``guess`` is an optional primal trajectory; the rows it touches seed the
    active-set polish before any ADMM iterations are spent.
    """
    cfg = spec.config
    ws = spec._ws
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (spec.ref_dim,):
        raise ValueError(f"reference has dimension {xi.shape[0]}, expected {spec.ref_dim}")
    if constraints is None:
        constraints = build_constraints(x0, spec)
    s = constraints.structure
    tau_p = ws.eq_pinv @ constraints.b_eq
    c = ws.Z.T @ (ws.P @ tau_p - spec.G.T @ xi)
    Ct = s.C[ws.rows] @ tau_p
    l = s.lb[ws.rows] - Ct
    u = s.ub[ws.rows] - Ct
    m = len(l)

    result = None
    iters = 0
    if guess is not None:
        vg = ws.Z.T @ (np.asarray(guess, dtype=float) - tau_p)
        g = ws.D @ vg
        tol = 1e-9 * (1.0 + np.abs(g))
        result = _polish(ws, cfg, c, l, u, g <= l + tol, g >= u - tol)
    if result is None and m == 0:
        v = np.linalg.solve(ws.Qc, -c)
        result = (v, np.zeros(0))
    if result is None:
        rs = ws.row_scale
        ls, us = l * rs, u * rs
        x = np.zeros(len(c))
        z = np.clip(ws.Ds @ x, ls, us)
        y = np.zeros(m)
        best = np.inf
        while iters < cfg.admm_max_iter:
            k, status = kernels.admm(
                ws.Qc, ws.Kinv, ws.Ds, np.ascontiguousarray(c), ls, us, x, z, y,
                ws.rho, cfg.sigma, cfg.alpha, cfg.admm_chunk, cfg.admm_chunk,
                cfg.admm_eps_abs, cfg.admm_eps_rel, cfg.admm_eps_inf,
            )
            iters += k
            if status == kernels.ADMM_INFEASIBLE:
                raise InfeasibleError("trajectory constraints are infeasible (ADMM certificate)")
            best = min(best, float(np.max(np.abs(ws.Ds @ x - z), initial=0.0)))
            lower = (z - ls < -y / ws.rho) & np.isfinite(ls)
            upper = (us - z < y / ws.rho) & np.isfinite(us)
            result = _polish(ws, cfg, c, l, u, lower, upper)
            if result is not None:
                break
            if iters >= cfg.admm_fallback_iter:
                # slow ADMM tail or a cycling polish: switch to the finite dual method
                result = _dual_active_set(ws, cfg, c, l, u)
                break
        if result is None:
            raise NonConvergenceError("trajectory QP did not converge", best)

    v, lam_c = result
    return _finalize(spec, constraints, xi, tau_p, v, lam_c, iters)


def _finalize(spec, constraints, xi, tau_p, v, lam_c, iters) -> QpSolution:
    ws = spec._ws
    cfg = spec.config
    s = constraints.structure
    tau = tau_p + ws.Z @ v
    lam = np.zeros(s.C.shape[0])
    lam[ws.rows] = lam_c
    # multipliers with the wrong sign at round-off level
    lam[np.abs(lam) < 1e-13] = 0.0
    r = ws.P @ tau - spec.G.T @ xi + s.C.T @ lam
    nu = -(ws.nu_map @ r) if len(ws.nu_map) else np.zeros(0)
    stat = r + s.A_eq.T @ nu
    g = s.C @ tau
    eq_res = np.max(np.abs(s.A_eq @ tau - constraints.b_eq), initial=0.0)
    ineq = np.max(np.maximum(g - s.ub, s.lb - g), initial=0.0)
    near_up = np.abs(g - s.ub) <= cfg.weak_tol
    near_lo = np.abs(g - s.lb) <= cfg.weak_tol
    nz = lam != 0
    gap = np.where(lam[nz] > 0, g[nz] - s.ub[nz], g[nz] - s.lb[nz])
    compl = np.max(np.abs(lam[nz] * gap), initial=0.0)
    active = np.zeros(len(lam), dtype=np.int8)
    active[(lam > 0) | ((lam == 0) & near_up)] = 1
    active[(lam < 0) | ((lam == 0) & near_lo & ~near_up)] = -1
    weak = (active != 0) & (np.abs(lam) < cfg.weak_tol)
    stat_norm = float(np.max(np.abs(stat), initial=0.0))
    kkt = float(max(stat_norm, eq_res, max(ineq, 0.0), compl))
    if stat_norm > cfg.eps_dual * max(1.0, float(np.max(np.abs(xi), initial=0.0))) or max(eq_res, ineq) > cfg.feas_tol:
        raise NonConvergenceError("polished solution fails KKT tolerances", kkt)
    return QpSolution(tau, nu, lam, active, weak, kkt, stat_norm, iters)


# ----------------------------------------------------------------------------
# derivatives


def traj_vjp(
    solution: QpSolution,
    spec: TrajProblemSpec,
    constraints: LinearConstraintSet | None,
    gbar: np.ndarray | None,
    lambar: np.ndarray | None = None,
) -> np.ndarray:
    """Pull cotangents on ``tau`` (and optionally on ``lam``) back to the reference.

    Uses the KKT system restricted to strictly active rows; weakly active
    rows are treated as inactive.
    """
    ws = spec._ws
    n = len(ws.Qc)
    rhs_v = ws.Z.T @ gbar if gbar is not None else np.zeros(n)
    strict_full = solution.strict
    pos = np.full(len(strict_full), -1)
    pos[ws.rows] = np.arange(len(ws.rows))
    S = pos[strict_full & (pos >= 0)]
    DS = ws.D[S]
    rhs_l = np.zeros(len(S))
    if lambar is not None:
        rhs_l = np.asarray(lambar, dtype=float)[ws.rows[S]]
    if len(S) == 0:
        a = np.linalg.solve(ws.Qc, rhs_v)
        return ws.GZ @ a
    sv = np.linalg.svd(DS, compute_uv=False)
    full_rank = len(S) <= n and sv.min() > 1e-10 * max(1.0, sv.max())
    if full_rank:
        K = np.zeros((n + len(S), n + len(S)))
        K[:n, :n] = ws.Qc
        K[:n, n:] = DS.T
        K[n:, :n] = DS
        try:
            a = sla.solve(K, np.concatenate([rhs_v, rhs_l]), assume_a="sym", check_finite=False)[:n]
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
            raise DegenerateDerivativeError(str(exc)) from exc
        return ws.GZ @ a
    # redundant active rows: the primal sensitivity is still unique
    N = sla.null_space(DS)
    if N.shape[1] == 0:
        a_v = np.zeros(n)
    else:
        QN = N.T @ ws.Qc @ N
        a_v = N @ np.linalg.solve(QN, N.T @ rhs_v)
    if np.any(rhs_l):
        # multiplier sensitivity is not unique; take the minimum-norm one
        K = np.zeros((n + len(S), n + len(S)))
        K[:n, :n] = ws.Qc
        K[:n, n:] = DS.T
        K[n:, :n] = DS
        a = np.linalg.lstsq(K, np.concatenate([rhs_v, rhs_l]), rcond=None)[0][:n]
        return ws.GZ @ a
    return ws.GZ @ a_v


def sticky_penalty(
    xi: np.ndarray,
    constraints: LinearConstraintSet,
    spec: TrajProblemSpec,
    solution: QpSolution | None = None,
) -> tuple[float, np.ndarray]:
    """Unweighted sticky-constraint penalty and its gradient w.r.t. the reference.

    Identity mode: squared hinge violation of ``xi`` itself (equality rows
    count as two-sided bounds). Any other mode: squared norm of the
    inequality multipliers of ``solution``, each measured against its
    constraint row normalized on the free-variable subspace so the penalty
    is in reference units and does not depend on how rows are scaled.
    """
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if spec.mode == "identity":
        s = constraints.structure
        g = s.C @ xi
        up = np.maximum(g - s.ub, 0.0)
        lo = np.maximum(s.lb - g, 0.0)
        h = up + lo
        e = s.A_eq @ xi - constraints.b_eq
        val = float(h @ h + e @ e)
        grad = 2.0 * (s.C.T @ (up - lo)) + 2.0 * (s.A_eq.T @ e)
        return val, grad
    if solution is None:
        solution = solve_traj(xi, None, spec, constraints)
    w = spec._ws.row_norm**2
    lam = solution.lam
    val = float(lam @ (w * lam))
    if val == 0.0:
        return 0.0, np.zeros_like(xi)
    return val, traj_vjp(solution, spec, constraints, None, 2.0 * w * lam)
