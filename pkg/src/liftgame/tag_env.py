"""Two-player tag: planar double integrators in a convex polygonal arena.

State layout per player is ``(px, py, vx, vy)``, control is ``(ax, ay)``.
Trajectories are flattened as ``[x_1, ..., x_T, u_1, ..., u_T]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_STATE = 4
N_CONTROL = 2


class ArenaError(ValueError):
    """Raised for malformed arena polygons."""


def regular_polygon(sides: int, radius: float, phase: float = np.pi / 2) -> np.ndarray:
    angles = phase + 2.0 * np.pi * np.arange(sides) / sides
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def polygon_halfspaces(vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(normals, offsets)`` with the polygon equal to ``normals @ p <= offsets``.

    Vertices may be given in either orientation. Raises ``ArenaError`` if the
    polygon is degenerate or not convex.
    """
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise ArenaError("polygon needs at least 3 planar vertices")
    edges = np.roll(v, -1, axis=0) - v
    cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    if np.all(cross > 1e-12):
        sign = 1.0
    elif np.all(cross < -1e-12):
        sign = -1.0
    else:
        raise ArenaError("polygon is not strictly convex")
    # outward normal of a counter-clockwise edge (dx, dy) is (dy, -dx)
    normals = sign * np.column_stack([edges[:, 1], -edges[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, v)
    return normals, offsets


@dataclass(frozen=True)
class TagEnvSpec:
    """Arena, limits and cost weights of the tag game.

    ``terminal_braking`` adds one row per wall at the last step,
    ``n.p_T + (v_max/u_max) n.v_T <= b``, which keeps every receding-horizon
    replan feasible (full braking from the terminal state never leaves the arena).
    """

    vertices: np.ndarray = field(default_factory=lambda: regular_polygon(5, 1.0))
    v_max: float = 0.8
    u_max: float = 1.0
    dt: float = 0.1
    horizon: int = 20
    effort_weight: float = 0.1
    speed_sides: int = 8
    terminal_braking: bool = True

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        polygon_halfspaces(self.vertices)
        if min(self.v_max, self.u_max, self.dt) <= 0 or self.horizon < 2:
            raise ArenaError("limits, time step and horizon must be positive")
        if self.speed_sides < 3:
            raise ArenaError("speed polytope needs at least 3 sides")

    @property
    def walls(self) -> tuple[np.ndarray, np.ndarray]:
        return polygon_halfspaces(self.vertices)

    @property
    def speed_halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Regular polygon inscribed in the circle of radius ``v_max``."""
        k = self.speed_sides
        mid = np.pi / k + 2.0 * np.pi * np.arange(k) / k
        normals = np.column_stack([np.cos(mid), np.sin(mid)])
        return normals, np.full(k, self.v_max * np.cos(np.pi / k))

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        c = x * yn - xn * y
        area = c.sum() / 2.0
        return np.array([((x + xn) * c).sum(), ((y + yn) * c).sum()]) / (6.0 * area)

    @property
    def traj_dim(self) -> int:
        return self.horizon * (N_STATE + N_CONTROL)

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "v_max": self.v_max,
            "u_max": self.u_max,
            "dt": self.dt,
            "horizon": self.horizon,
            "effort_weight": self.effort_weight,
            "speed_sides": self.speed_sides,
            "terminal_braking": self.terminal_braking,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TagEnvSpec":
        d = dict(d)
        if "vertices" not in d and "sides" in d:
            d["vertices"] = regular_polygon(int(d.pop("sides")), float(d.pop("circumradius", 1.0)))
        d.pop("circumradius", None)
        return cls(**d)


@dataclass(frozen=True)
class Trajectory:
    """State/control sequence of one player over the horizon."""

    states: np.ndarray  # (T, 4)
    controls: np.ndarray  # (T, 2)

    def __post_init__(self):
        if len(self.states) != len(self.controls):
            raise ValueError("states and controls must share the horizon")

    @property
    def horizon(self) -> int:
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 2:]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.states), np.ravel(self.controls)])

    @classmethod
    def unflatten(cls, tau: np.ndarray, horizon: int, n_state: int = N_STATE, n_control: int = N_CONTROL) -> "Trajectory":
        tau = np.asarray(tau, dtype=float)
        k = horizon * n_state
        if tau.shape != (horizon * (n_state + n_control),):
            raise ValueError(f"expected flat trajectory of length {horizon * (n_state + n_control)}, got {tau.shape}")
        return cls(tau[:k].reshape(horizon, n_state).copy(), tau[k:].reshape(horizon, n_control).copy())


def _split(tau: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    k = horizon * N_STATE
    return tau[..., :k].reshape(tau.shape[:-1] + (horizon, N_STATE)), tau[..., k:].reshape(tau.shape[:-1] + (horizon, N_CONTROL))


def transition_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold double integrator ``x' = F x + E u``."""
    F = np.eye(N_STATE)
    F[0, 2] = F[1, 3] = dt
    E = np.zeros((N_STATE, N_CONTROL))
    E[0, 0] = E[1, 1] = 0.5 * dt * dt
    E[2, 0] = E[3, 1] = dt
    return F, E


def step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p, v = x[:2], x[2:]
    return np.concatenate([p + v * dt + 0.5 * u * dt * dt, v + u * dt])


def rollout(x0: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """States ``x_1 = x0, ..., x_T`` produced by applying ``controls[:-1]``."""
    states = [np.asarray(x0, dtype=float)]
    for u in controls[:-1]:
        states.append(step(states[-1], u, dt))
    return np.array(states)


def pursuer_cost(tau1: np.ndarray, tau2: np.ndarray, spec: TagEnvSpec) -> float:
    """Mean squared separation plus weighted difference in control effort."""
    x1, u1 = _split(np.asarray(tau1, dtype=float), spec.horizon)
    x2, u2 = _split(np.asarray(tau2, dtype=float), spec.horizon)
    d = x1[:, :2] - x2[:, :2]
    dist = np.sum(d * d) / spec.horizon
    effort = (np.sum(u1 * u1) - np.sum(u2 * u2)) / spec.horizon
    return float(dist + spec.effort_weight * effort)


def evader_cost(tau1: np.ndarray, tau2: np.ndarray, spec: TagEnvSpec) -> float:
    return -pursuer_cost(tau1, tau2, spec)


def cost_gradients(tau1: np.ndarray, tau2: np.ndarray, spec: TagEnvSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the pursuer cost w.r.t. both flat trajectories."""
    T = spec.horizon
    x1, u1 = _split(np.asarray(tau1, dtype=float), T)
    x2, u2 = _split(np.asarray(tau2, dtype=float), T)
    d = 2.0 * (x1[:, :2] - x2[:, :2]) / T
    gx1 = np.zeros_like(x1)
    gx1[:, :2] = d
    g1 = np.concatenate([gx1.ravel(), (2.0 * spec.effort_weight / T) * u1.ravel()])
    g2 = np.concatenate([(-gx1).ravel(), (-2.0 * spec.effort_weight / T) * u2.ravel()])
    return g1, g2


def pursuer_cost_matrix(taus1: np.ndarray, taus2: np.ndarray, spec: TagEnvSpec) -> np.ndarray:
    """``A[i, j] = pursuer_cost(taus1[i], taus2[j])`` for stacked flat trajectories."""
    T = spec.horizon
    x1, u1 = _split(np.asarray(taus1, dtype=float), T)
    x2, u2 = _split(np.asarray(taus2, dtype=float), T)
    p1 = x1[:, :, :2].reshape(len(x1), -1)
    p2 = x2[:, :, :2].reshape(len(x2), -1)
    sq = (p1 * p1).sum(1)[:, None] + (p2 * p2).sum(1)[None, :] - 2.0 * p1 @ p2.T
    e1 = (u1 * u1).reshape(len(u1), -1).sum(1)
    e2 = (u2 * u2).reshape(len(u2), -1).sum(1)
    return (sq + spec.effort_weight * (e1[:, None] - e2[None, :])) / T


def pursuer_cost_matrix_vjp(
    taus1: np.ndarray, taus2: np.ndarray, abar: np.ndarray, spec: TagEnvSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cotangent on the pursuer cost matrix back to both trajectory stacks."""
    T = spec.horizon
    taus1 = np.asarray(taus1, dtype=float)
    taus2 = np.asarray(taus2, dtype=float)
    x1, u1 = _split(taus1, T)
    x2, u2 = _split(taus2, T)
    r = abar.sum(1)
    c = abar.sum(0)
    p1 = x1[:, :, :2]
    p2 = x2[:, :, :2]
    gp1 = 2.0 * (r[:, None, None] * p1 - np.einsum("ij,jtk->itk", abar, p2)) / T
    gp2 = 2.0 * (c[:, None, None] * p2 - np.einsum("ij,itk->jtk", abar, p1)) / T
    g1 = np.zeros_like(taus1)
    g2 = np.zeros_like(taus2)
    gx1 = np.zeros_like(x1)
    gx1[:, :, :2] = gp1
    gx2 = np.zeros_like(x2)
    gx2[:, :, :2] = gp2
    k = T * N_STATE
    g1[:, :k] = gx1.reshape(len(taus1), -1)
    g2[:, :k] = gx2.reshape(len(taus2), -1)
    w = 2.0 * spec.effort_weight / T
    g1[:, k:] = w * r[:, None] * u1.reshape(len(taus1), -1)
    g2[:, k:] = -w * c[:, None] * u2.reshape(len(taus2), -1)
    return g1, g2


def in_arena(p: np.ndarray, spec: TagEnvSpec, tol: float = 0.0) -> bool:
    n, b = spec.walls
    return bool(np.all(n @ np.asarray(p) <= b + tol))


def in_speed_polytope(v: np.ndarray, spec: TagEnvSpec, tol: float = 0.0) -> bool:
    n, b = spec.speed_halfspaces
    return bool(np.all(n @ np.asarray(v) <= b + tol))


def can_stop(x: np.ndarray, spec: TagEnvSpec, tol: float = 0.0) -> bool:
    """Full braking from ``x`` stays inside the arena (sufficient feasibility test)."""
    n, b = spec.walls
    p, v = np.asarray(x[:2]), np.asarray(x[2:])
    c = spec.v_max / spec.u_max
    return bool(np.all(n @ p + c * np.maximum(n @ v, 0.0) <= b + tol))


def state_ok(x: np.ndarray, spec: TagEnvSpec, tol: float = 1e-6) -> bool:
    return in_arena(x[:2], spec, tol) and in_speed_polytope(x[2:], spec, tol)


def _uniform_in(normals, offsets, lo, hi, rng) -> np.ndarray:
    while True:
        p = rng.uniform(lo, hi)
        if np.all(normals @ p <= offsets):
            return p


def sample_position(spec: TagEnvSpec, rng: np.random.Generator) -> np.ndarray:
    n, b = spec.walls
    return _uniform_in(n, b, spec.vertices.min(0), spec.vertices.max(0), rng)


def sample_velocity(spec: TagEnvSpec, rng: np.random.Generator) -> np.ndarray:
    n, b = spec.speed_halfspaces
    return _uniform_in(n, b, -np.full(2, spec.v_max), np.full(2, spec.v_max), rng)


def sample_player_state(spec: TagEnvSpec, rng: np.random.Generator) -> np.ndarray:
    while True:
        x = np.concatenate([sample_position(spec, rng), sample_velocity(spec, rng)])
        if can_stop(x, spec):
            return x


def sample_initial_state(
    spec: TagEnvSpec, rng: np.random.Generator, min_separation: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample a joint start with both players at least ``min_separation`` apart.

    Each player's state is also required to admit a full-braking stop inside
    the arena, which makes its trajectory constraint set nonempty.
    """
    while True:
        x1 = sample_player_state(spec, rng)
        x2 = sample_player_state(spec, rng)
        if np.linalg.norm(x1[:2] - x2[:2]) >= min_separation:
            return x1, x2
