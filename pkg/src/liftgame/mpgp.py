"""Receding-horizon (model-predictive) game play between two independent planners."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tag_env as te
from .lifted_game import LiftedSolution


class EpisodeError(RuntimeError):
    def __init__(self, turn, role, cause):
        super().__init__(f"turn {turn}, {role}: {cause}")
        self.turn = turn
        self.role = role


@dataclass
class EpisodeRecord:
    seed: int | None
    labels: tuple
    choices: list = field(default_factory=list)  # (pursuer candidate, evader candidate) per turn
    states1: list = field(default_factory=list)
    states2: list = field(default_factory=list)
    controls1: list = field(default_factory=list)
    controls2: list = field(default_factory=list)
    plan_seconds: list = field(default_factory=list)
    value: float = float("nan")

    def arrays(self):
        return (np.array(self.states1), np.array(self.controls1), np.array(self.states2), np.array(self.controls2))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "labels": list(self.labels),
            "choices": [list(map(int, c)) for c in self.choices],
            "states1": np.asarray(self.states1).tolist(),
            "controls1": np.asarray(self.controls1).tolist(),
            "states2": np.asarray(self.states2).tolist(),
            "controls2": np.asarray(self.controls2).tolist(),
            "value": self.value,
        }


def closed_loop_value(states1, controls1, states2, controls2, env: te.TagEnvSpec) -> float:
    """Pursuer cost on executed trajectories: state ``k`` is paired with control ``k``."""
    p1 = np.asarray(states1)[:, :2]
    p2 = np.asarray(states2)[:, :2]
    u1 = np.asarray(controls1)
    u2 = np.asarray(controls2)
    d = np.sum((p1 - p2) ** 2, axis=1).mean()
    e = (np.sum(u1 * u1, axis=1) - np.sum(u2 * u2, axis=1)).mean()
    return float(d + env.effort_weight * e)


def sample_candidate(q: np.ndarray, rng: np.random.Generator) -> int:
    q = np.clip(np.asarray(q, dtype=float), 0.0, None)
    return int(rng.choice(len(q), p=q / q.sum()))


def mpgp_simulate(
    pursuer_policy: Callable[[np.ndarray, np.ndarray], LiftedSolution],
    evader_policy: Callable[[np.ndarray, np.ndarray], LiftedSolution],
    x1: np.ndarray,
    x2: np.ndarray,
    total_turns: int,
    replan_interval: int,
    env: te.TagEnvSpec,
    rng1: np.random.Generator,
    rng2: np.random.Generator,
    labels: tuple = ("pursuer", "evader"),
    seed: int | None = None,
    on_turn: Callable | None = None,
) -> EpisodeRecord:
    """Each turn both planners solve their own game from the joint state, each samples one
    of its own candidates with its private RNG, and both execute ``replan_interval`` steps.

    ``on_turn(turn, pursuer_solution, evader_solution, record)`` runs after each turn's
    execution (used for online learning).
    """
    if not 1 <= replan_interval <= env.horizon:
        raise ValueError("replan interval must lie in [1, horizon]")
    rec = EpisodeRecord(seed, tuple(labels))
    x1 = np.asarray(x1, dtype=float).copy()
    x2 = np.asarray(x2, dtype=float).copy()
    T = env.horizon
    for turn in range(total_turns):
        t0 = time.perf_counter()
        try:
            sp = pursuer_policy(x1, x2)
        except Exception as exc:
            raise EpisodeError(turn, labels[0], exc) from exc
        t1 = time.perf_counter()
        try:
            se = evader_policy(x1, x2)
        except Exception as exc:
            raise EpisodeError(turn, labels[1], exc) from exc
        t2 = time.perf_counter()
        rec.plan_seconds.append(((t1 - t0), (t2 - t1)))
        i = sample_candidate(sp.q1, rng1)
        j = sample_candidate(se.q2, rng2)
        rec.choices.append((i, j))
        u1 = te.Trajectory.unflatten(sp.taus1[i], T).controls
        u2 = te.Trajectory.unflatten(se.taus2[j], T).controls
        for k in range(replan_interval):
            rec.states1.append(x1)
            rec.states2.append(x2)
            rec.controls1.append(u1[k])
            rec.controls2.append(u2[k])
            x1 = te.step(x1, u1[k], env.dt)
            x2 = te.step(x2, u2[k], env.dt)
        if on_turn is not None:
            on_turn(turn, sp, se, rec)
    rec.states1.append(x1)
    rec.states2.append(x2)
    s1, c1, s2, c2 = rec.arrays()
    rec.value = closed_loop_value(s1[:-1], c1, s2[:-1], c2, env)
    return rec
