"""Offline training of both reference generators by simultaneous gradient descent, and
online self-play learning inside the receding-horizon loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import generator as gn
from . import lifted_game as lg
from . import tag_env as te
from .bimatrix import NonIsolatedEquilibriumError
from .mpgp import EpisodeRecord, closed_loop_value, mpgp_simulate
from .traj_opt import TrajError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, iteration, checkpoint=None):
        super().__init__(f"{msg} at iteration {iteration}" + (f" (checkpoint {checkpoint})" if checkpoint else ""))
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    rate1: float = 1e-2
    rate2: float = 1e-2
    batch_size: int | None = None  # None: full dataset when it has at most 64 entries
    iterations: int = 200
    dataset_size: int = 64
    n1: int = 2
    n2: int = 2
    horizon: int = 20
    seed: int = 0
    sticky_weight: float = 1e-2
    checkpoint_every: int = 0
    hidden: tuple = (64, 64)
    mode: str = "control"
    window: int = 500
    replan_interval: int = 9

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.rate1 < 0 or self.rate2 < 0:
            raise ValueError("learning rates must be nonnegative")
        for name in ("iterations", "dataset_size", "n1", "n2", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def effective_batch(self) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, self.dataset_size)
        return self.dataset_size if self.dataset_size <= 64 else 64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Dataset:
    x1: np.ndarray
    x2: np.ndarray

    def __len__(self):
        return len(self.x1)

    @property
    def joint(self) -> np.ndarray:
        return np.hstack([self.x1, self.x2])


def sample_dataset(env: te.TagEnvSpec, d: int, seed: int) -> Dataset:
    if d < 1:
        raise ValueError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    pairs = [te.sample_initial_state(env, rng) for _ in range(d)]
    return Dataset(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))


def make_game(env: te.TagEnvSpec, config: TrainConfig) -> lg.GameDescription:
    import dataclasses

    from .traj_opt import DEFAULT_CONFIG

    solver = dataclasses.replace(DEFAULT_CONFIG, sticky_weight=config.sticky_weight)
    return lg.tag_game(env, config.mode, config=solver)


def init_generators(env: te.TagEnvSpec, config: TrainConfig, game: lg.GameDescription):
    scale = gn.tag_input_scale(env)
    out = env.u_max if config.mode == "control" else env.radius
    r1, r2 = game.spec1.ref_dim, game.spec2.ref_dim
    th1 = gn.init_params(gn.default_shape(8, config.n1, r1, config.hidden), config.seed * 2 + 1,
                         config.n1, r1, scale, out)
    th2 = gn.init_params(gn.default_shape(8, config.n2, r2, config.hidden), config.seed * 2 + 2,
                         config.n2, r2, scale, out)
    return th1, th2


def sample_gradient(game, b1, b2, x1, x2):
    """Forward and backward for one joint state.

    Returns ``(L1, grad_ref1, grad_ref2)`` or ``None`` when the equilibrium
    derivative is undefined (the sample is skipped by the caller).
    """
    sol = lg.forward(b1, b2, x1, x2, game)
    try:
        d1, d2, _ = lg.player_gradients(sol, sticky=True, on_degenerate="raise")
    except NonIsolatedEquilibriumError:
        return sol, None
    return sol, (d1, d2)


@dataclass
class TrainTrace:
    mean_L1: list = field(default_factory=list)
    mean_L2: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    seconds: list = field(default_factory=list)


def _tree_sum(parts: list) -> np.ndarray:
    """Pairwise reduction in a fixed order, independent of how parts were computed."""
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _save_checkpoint(directory, tag, th1, th2):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p1 = directory / f"pursuer_{tag}.json"
    p2 = directory / f"evader_{tag}.json"
    gn.save_params(th1, p1)
    gn.save_params(th2, p2)
    return str(p1)


def train_offline(
    config: TrainConfig,
    env: te.TagEnvSpec,
    dataset: Dataset | None = None,
    init: tuple | None = None,
    log_path=None,
    checkpoint_dir=None,
    pool=None,
):
    """Simultaneous gradient descent of both generators on the mean lifted losses.

    Returns ``(theta1, theta2, trace)``. ``pool`` (an executor) evaluates batch
    entries concurrently; gradients are combined by a fixed-order reduction so
    the result does not depend on scheduling.
    """
    if env.horizon != config.horizon:
        env = te.TagEnvSpec(**{**env.to_dict(), "horizon": config.horizon})
    game = make_game(env, config)
    data = dataset if dataset is not None else sample_dataset(env, config.dataset_size, config.seed)
    th1, th2 = init if init is not None else init_generators(env, config, game)
    rng = np.random.default_rng([config.seed, 7])
    bs = config.effective_batch
    trace = TrainTrace()
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path else None
    try:
        for it in range(config.iterations):
            t0 = time.perf_counter()
            idx = np.arange(len(data)) if bs >= len(data) else np.sort(rng.choice(len(data), bs, replace=False))
            X = data.joint[idx]
            Y1, acts1 = gn.forward_batch(th1, X)
            Y2, acts2 = gn.forward_batch(th2, X)

            def one(k):
                b1 = lg.ReferenceBundle(1, Y1[k].reshape(config.n1, -1))
                b2 = lg.ReferenceBundle(2, Y2[k].reshape(config.n2, -1))
                return sample_gradient(game, b1, b2, data.x1[idx[k]], data.x2[idx[k]])

            results = list(pool.map(one, range(len(idx)))) if pool is not None else [one(k) for k in range(len(idx))]
            L1 = np.array([r[0].L1 for r in results])
            L2 = np.array([r[0].L2 for r in results])
            if not (np.all(np.isfinite(L1)) and np.all(np.isfinite(L2))):
                ck = _save_checkpoint(checkpoint_dir, f"abort_{it}", th1, th2) if checkpoint_dir else None
                raise TrainingError("non-finite loss", it, ck)
            G1 = np.zeros_like(Y1)
            G2 = np.zeros_like(Y2)
            skipped = []
            for k, (_, g) in enumerate(results):
                if g is None:
                    skipped.append(int(idx[k]))
                    log.info("iteration %d: skipped sample %d (degenerate equilibrium derivative)", it, idx[k])
                    continue
                G1[k] = g[0].ravel()
                G2[k] = g[1].ravel()
            used = max(len(idx) - len(skipped), 1)
            # per-row parameter gradients reduced in a fixed order
            rows1 = [gn.backward_batch(th1, [a[k : k + 1] for a in acts1], G1[k : k + 1] / used) for k in range(len(idx))]
            rows2 = [gn.backward_batch(th2, [a[k : k + 1] for a in acts2], G2[k : k + 1] / used) for k in range(len(idx))]
            g1 = _tree_sum(rows1)
            g2 = _tree_sum(rows2)
            th1 = th1.with_flat(th1.flat() - config.rate1 * g1)
            th2 = th2.with_flat(th2.flat() - config.rate2 * g2)
            dt = time.perf_counter() - t0
            trace.mean_L1.append(float(L1.mean()))
            trace.mean_L2.append(float(L2.mean()))
            trace.grad_norms.append((float(np.linalg.norm(g1)), float(np.linalg.norm(g2))))
            trace.skipped.append(skipped)
            trace.seconds.append(dt)
            if logf:
                logf.write(json.dumps({"iteration": it, "mean_L1": trace.mean_L1[-1], "mean_L2": trace.mean_L2[-1],
                                       "grad_norm1": trace.grad_norms[-1][0], "grad_norm2": trace.grad_norms[-1][1],
                                       "skipped": skipped, "seconds": dt}) + "\n")
                logf.flush()
            if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                _save_checkpoint(checkpoint_dir, f"{it + 1:06d}", th1, th2)
    finally:
        if logf:
            logf.close()
    return th1, th2, trace


def generator_policy(th1, th2, game: lg.GameDescription, timings: list | None = None):
    """Planner that evaluates both generators at the joint state and solves the lifted game."""

    def plan(x1, x2):
        t0 = time.perf_counter()
        b1 = gn.generate(th1, x1, x2, 1)
        b2 = gn.generate(th2, x1, x2, 2)
        sol = lg.forward(b1, b2, x1, x2, game)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        return sol

    return plan


@dataclass
class SelfPlayTrace:
    turn_values: list = field(default_factory=list)  # pursuer cost on each executed segment
    predicted: list = field(default_factory=list)  # lifted-game value L1 at each turn
    grad_norms: list = field(default_factory=list)
    window_mean: list = field(default_factory=list)
    window_sem: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    forward_seconds: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    episode: EpisodeRecord | None = None
    params: tuple | None = None


def _window_stats(values, window):
    v = np.asarray(values[-window:])
    if len(v) < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def self_play_learn(
    config: TrainConfig,
    env: te.TagEnvSpec,
    turns: int,
    x0: tuple | None = None,
    init: tuple | None = None,
    snapshot_every: int = 0,
):
    """Online learning in the receding-horizon loop.

    Each turn one shared planner evaluates both generators at the joint state,
    each role samples its candidate, the chosen controls run for
    ``replan_interval`` steps, and then both generators take one simultaneous
    gradient step on the lifted losses of that turn's state.
    """
    game = make_game(env, config)
    th = list(init if init is not None else init_generators(env, config, game))
    rng = np.random.default_rng([config.seed, 11])
    x1, x2 = x0 if x0 is not None else te.sample_initial_state(env, rng)
    trace = SelfPlayTrace()
    cache = {}

    def plan(x1_, x2_):
        key = (x1_.tobytes(), x2_.tobytes())
        if cache.get("key") != key:
            t0 = time.perf_counter()
            Xj = np.concatenate([x1_, x2_])
            Y1, a1 = gn.forward_batch(th[0], Xj)
            Y2, a2 = gn.forward_batch(th[1], Xj)
            b1 = lg.ReferenceBundle(1, Y1.reshape(config.n1, -1))
            b2 = lg.ReferenceBundle(2, Y2.reshape(config.n2, -1))
            sol = lg.forward(b1, b2, x1_, x2_, game)
            trace.forward_seconds.append(time.perf_counter() - t0)
            cache.update(key=key, sol=sol, acts=(a1, a2))
        return cache["sol"]

    def learn(turn, sol, _, rec):
        a1, a2 = cache["acts"]
        try:
            d1, d2, _ = lg.player_gradients(sol, sticky=True, on_degenerate="raise")
        except NonIsolatedEquilibriumError:
            trace.skipped.append(turn)
            log.info("turn %d: skipped update (degenerate equilibrium derivative)", turn)
            d1 = np.zeros_like(sol.refs1)
            d2 = np.zeros_like(sol.refs2)
        g1 = gn.backward_batch(th[0], a1, d1.reshape(1, -1))
        g2 = gn.backward_batch(th[1], a2, d2.reshape(1, -1))
        if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2)) and np.isfinite(sol.L1)):
            raise TrainingError("non-finite gradient", turn)
        th[0] = th[0].with_flat(th[0].flat() - config.rate1 * g1)
        th[1] = th[1].with_flat(th[1].flat() - config.rate2 * g2)
        s1 = np.array(rec.states1[-config.replan_interval:])
        s2 = np.array(rec.states2[-config.replan_interval:])
        c1 = np.array(rec.controls1[-config.replan_interval:])
        c2 = np.array(rec.controls2[-config.replan_interval:])
        trace.turn_values.append(closed_loop_value(s1, c1, s2, c2, env))
        trace.predicted.append(sol.L1)
        trace.grad_norms.append((float(np.linalg.norm(g1)), float(np.linalg.norm(g2))))
        m, s = _window_stats(trace.turn_values, config.window)
        trace.window_mean.append(m)
        trace.window_sem.append(s)
        if snapshot_every and (turn + 1) % snapshot_every == 0:
            trace.snapshots.append({"turn": turn + 1, "solution": sol.to_json()})

    rng1 = np.random.default_rng([config.seed, 1])
    rng2 = np.random.default_rng([config.seed, 2])
    try:
        trace.episode = mpgp_simulate(plan, plan, x1, x2, turns, config.replan_interval, env, rng1, rng2,
                                      ("self-play", "self-play"), config.seed, on_turn=learn)
    except TrajError as exc:
        raise TrainingError(str(exc), len(trace.turn_values)) from exc
    trace.params = (th[0], th[1])
    return trace
