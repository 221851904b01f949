"""Desk-scale studies: toy interval game, pure-vs-lifted convergence, open-loop and
receding-horizon tournaments, sampled-vs-learned candidates and self-play.

Every study takes an ``ExperimentConfig`` and returns an ``ExperimentResult``
holding one CSV row per trial plus a JSON-ready summary. Each trial draws its
random numbers from streams keyed by ``(seed, trial, stream)`` so results do
not depend on execution order or thread count.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import generator as gn
from . import lifted_game as lg
from . import tag_env as te
from . import training as tr
from .mpgp import EpisodeRecord, mpgp_simulate  # noqa: F401  (re-exported)
from .traj_opt import DEFAULT_CONFIG, build_constraints

log = logging.getLogger(__name__)

EXPERIMENTS = (
    "toy_interval",
    "equilibrium_convergence",
    "open_loop_tournament",
    "receding_horizon_tournament",
    "sampled_vs_learned",
    "self_play",
)

PRESETS = {
    "paper": {
        "sampled_vs_learned": 50,
        "equilibrium_convergence": 20,
        "open_loop_tournament": 100,
        "receding_horizon_tournament": 5,
        "self_play": 2500,
        "toy_interval": 100,
    },
    "ci": {
        "sampled_vs_learned": 10,
        "equilibrium_convergence": 5,
        "open_loop_tournament": 20,
        "receding_horizon_tournament": 2,
        "self_play": 500,
        "toy_interval": 100,
    },
}

PAIRINGS = (("pure", "pure"), ("pure", "lifted"), ("lifted", "pure"), ("lifted", "lifted"))


def _default_train():
    return tr.TrainConfig(rate1=1.0, rate2=1.0, iterations=300, dataset_size=64)


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs shared by all studies. ``trials`` overrides the preset count."""

    experiment: str = "toy_interval"
    seed: int = 0
    preset: str = "ci"
    trials: int | None = None
    env: te.TagEnvSpec = field(default_factory=te.TagEnvSpec)
    train: tr.TrainConfig = field(default_factory=_default_train)
    n_lifted: int = 2
    gp_steps: int = 400
    gp_rate: float = 1.0
    gp_tol: float = 1e-6
    converged_window: int = 50
    toy_steps: int = 2000
    toy_rate: float = 0.5
    rh_turns: int = 500
    replan_interval: int = 9
    goal_candidates: int = 20
    goal_steps: int = 200
    goal_rate: float = 0.2
    goal_control_weight: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.trials is not None and self.trials < 0:
            raise ValueError("trials must be nonnegative")
        for name in ("n_lifted", "gp_steps", "converged_window", "toy_steps", "rh_turns", "goal_candidates",
                     "goal_steps", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.replan_interval <= self.env.horizon:
            raise ValueError("replan_interval must lie in [1, horizon]")
        for name in ("gp_rate", "toy_rate", "goal_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def count(self, experiment: str | None = None) -> int:
        if self.trials is not None:
            return self.trials
        return PRESETS[self.preset][experiment or self.experiment]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["env"] = self.env.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fields: {sorted(unknown)}")
        d = dict(d)
        if "env" in d:
            d["env"] = te.TagEnvSpec.from_dict(d["env"])
        if "train" in d:
            d["train"] = tr.TrainConfig.from_dict({**_default_train().to_dict(), **d["train"]})
        return cls(**d)


def trial_rng(seed: int, trial: int, stream: int, *extra) -> np.random.Generator:
    return np.random.default_rng([seed, trial, stream, *extra])


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def mean_sem(values) -> tuple:
    """Mean and standard error; ``(None, None)`` without values, SEM ``None`` for one value."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    if v.size < 2:
        return float(v.mean()), None
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class TournamentResult:
    """Game values of one pursuer/evader pairing across trials."""

    pursuer: str
    evader: str
    values: list = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.values)

    @property
    def mean(self):
        return mean_sem(self.values)[0]

    @property
    def sem(self):
        return mean_sem(self.values)[1]

    def to_json(self) -> dict:
        return {"pursuer": self.pursuer, "evader": self.evader, "trials": self.trials,
                "mean": self.mean, "sem": self.sem, "values": list(map(float, self.values))}


def combined_sem(a, b) -> float | None:
    if a is None or b is None:
        return None
    return float(np.hypot(a, b))


def grid_ordering(grid: dict) -> dict:
    """Check value(P,L) > value(L,L) > value(L,P) > value(P,P) and the gaps in combined SEMs."""
    order = [("pure", "lifted"), ("lifted", "lifted"), ("lifted", "pure"), ("pure", "pure")]
    cells = [grid[k] for k in order]
    if any(c.mean is None for c in cells):
        return {"ordered": False, "gaps": [], "gaps_in_sem": []}
    gaps, in_sem = [], []
    for hi, lo in zip(cells[:-1], cells[1:]):
        g = hi.mean - lo.mean
        s = combined_sem(hi.sem, lo.sem)
        gaps.append(g)
        in_sem.append(g / s if s else None)
    return {"ordered": all(g > 0 for g in gaps), "gaps": gaps, "gaps_in_sem": in_sem,
            "order": ["%s/%s" % k for k in order]}


@dataclass
class ExperimentResult:
    name: str
    config: dict
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # bulky data kept out of the summary

    def write(self, outdir) -> dict:
        """Write ``<name>.csv`` and ``<name>_summary.json``; returns the paths."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": outdir / f"{self.name}.csv", "summary": outdir / f"{self.name}_summary.json"}
        keys = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        with open(paths["csv"], "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        paths["summary"].write_text(json.dumps({"experiment": self.name, "config": self.config,
                                                "summary": self.summary}, indent=2, default=_jsonable))
        return {k: str(v) for k, v in paths.items()}


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _initial_state(cfg, trial):
    return te.sample_initial_state(cfg.env, trial_rng(cfg.seed, trial, 0))


# toy interval game ---------------------------------------------------------------

def local_nash(game: lg.GameDescription, t1: float, t2: float, lo=-1.0, hi=1.0,
               steps=(1e-3, 1e-2, 1e-1), tol=1e-12) -> bool:
    """True when neither player lowers its own cost by a small unilateral move inside ``[lo, hi]``."""

    def cost(a, b, player):
        A, B = game.cost_matrices(np.array([[a]]), np.array([[b]]))
        return float((A if player == 1 else B)[0, 0])

    f1, f2 = cost(t1, t2, 1), cost(t1, t2, 2)
    for d in steps:
        for s in (-d, d):
            if lo <= t1 + s <= hi and cost(t1 + s, t2, 1) < f1 - tol:
                return False
            if lo <= t2 + s <= hi and cost(t1, t2 + s, 2) < f2 - tol:
                return False
    return True


def classify_toy_run(game, taus1, taus2, converged, tail=0.1, spread=1e-3) -> str:
    """``equilibrium``, ``stationary-non-equilibrium`` or ``non-convergent``."""
    t1 = np.array([t[0, 0] for t in taus1])
    t2 = np.array([t[0, 0] for t in taus2])
    k = max(int(len(t1) * tail), 1)
    settled = converged or (np.ptp(t1[-k:]) < spread and np.ptp(t2[-k:]) < spread)
    if not settled:
        return "non-convergent"
    return "equilibrium" if local_nash(game, t1[-1], t2[-1]) else "stationary-non-equilibrium"


def exp_toy_interval(cfg: ExperimentConfig) -> ExperimentResult:
    """Gradient play on the scalar interval game with and without regularization."""
    res = ExperimentResult("toy_interval", cfg.to_dict())
    n = cfg.count("toy_interval")
    x = np.zeros(1)
    for regularized in (True, False):
        game = lg.toy_interval_game(regularized)
        variant = "regularized" if regularized else "unregularized"

        def run(k):
            rng = trial_rng(cfg.seed, k, 1, int(regularized))
            _, _, trace = lg.gradient_play_references(x, x, 1, 1, cfg.toy_steps, cfg.toy_rate, rng, game,
                                                      tol=cfg.gp_tol, record_refs=True)
            status = classify_toy_run(game, trace.taus1, trace.taus2, trace.converged)
            return {
                "variant": variant, "trial": k,
                "start1": float(trace.taus1[0][0, 0]), "start2": float(trace.taus2[0][0, 0]),
                "final1": float(trace.taus1[-1][0, 0]), "final2": float(trace.taus2[-1][0, 0]),
                "iterations": len(trace.values), "gradient_stop": trace.converged,
                "final_grad_norm": float(max(trace.grad_norms[-1])), "status": status,
            }

        rows = _map(run, range(n), cfg.threads)
        res.rows += rows
        limits = {}
        for r in rows:
            if r["status"] != "non-convergent":
                key = "(%g, %g)" % (round(r["final1"], 3) + 0.0, round(r["final2"], 3) + 0.0)
                limits[key] = limits.get(key, 0) + 1
        statuses = {}
        for r in rows:
            statuses[r["status"]] = statuses.get(r["status"], 0) + 1
        res.summary[variant] = {
            "runs": n, "limit_points": limits, "status_counts": statuses,
            "gradient_stops": sum(r["gradient_stop"] for r in rows),
            "equilibria": statuses.get("equilibrium", 0),
        }
    return res


# pure vs lifted convergence ---------------------------------------------------------

def converged_value(values, window: int) -> float:
    return float(np.mean(values[-window:]))


def window_drift(values, window: int) -> float:
    """Relative change between the last two ``window``-long means."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2 * window:
        return float("nan")
    last, prev = v[-window:].mean(), v[-2 * window : -window].mean()
    return float(abs(last - prev) / max(abs(last), 1e-12))


def _pad(values, steps):
    v = list(values)
    return v + [v[-1]] * (steps - len(v))


def exp_equilibrium_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    """Gradient play from random references with one candidate per player and with ``n_lifted``."""
    res = ExperimentResult("equilibrium_convergence", cfg.to_dict())
    game = lg.tag_game(cfg.env, "control")
    n = cfg.count("equilibrium_convergence")

    def run(k):
        x1, x2 = _initial_state(cfg, k)
        out = {}
        for stream, (label, m) in enumerate((("pure", 1), ("lifted", cfg.n_lifted)), start=1):
            t0 = time.perf_counter()
            _, _, trace = lg.gradient_play_references(x1, x2, m, m, cfg.gp_steps, cfg.gp_rate,
                                                      trial_rng(cfg.seed, k, stream), game, tol=cfg.gp_tol)
            out[label] = (trace, time.perf_counter() - t0)
        return out

    runs = _map(run, range(n), cfg.threads)
    traces = {"pure": [], "lifted": []}
    for k, out in enumerate(runs):
        for label, (trace, secs) in out.items():
            vals = _pad(trace.values, cfg.gp_steps)
            traces[label].append(vals)
            g1, g2 = trace.grad_norms[-1]
            res.rows.append({
                "trial": k, "method": label, "converged_value": converged_value(vals, cfg.converged_window),
                "final_value": vals[-1], "iterations": len(trace.values), "gradient_stop": trace.converged,
                "final_grad_norm1": g1, "final_grad_norm2": g2, "degenerate_steps": trace.degenerate_steps,
                "seconds": secs,
            })
    summ = {}
    for label in ("pure", "lifted"):
        V = np.array(traces[label]) if traces[label] else np.zeros((0, cfg.gp_steps))
        cv = [r["converged_value"] for r in res.rows if r["method"] == label]
        m, s = mean_sem(cv)
        mean_trace = V.mean(0) if len(V) else np.zeros(0)
        summ[label] = {
            "converged_mean": m, "converged_sem": s,
            "drift": window_drift(mean_trace, cfg.converged_window) if len(V) else None,
            "trace_mean": mean_trace.tolist(),
            "trace_sem": (V.std(0, ddof=1) / np.sqrt(len(V))).tolist() if len(V) > 1 else [],
        }
    if n:
        gap = summ["lifted"]["converged_mean"] - summ["pure"]["converged_mean"]
        cs = combined_sem(summ["lifted"]["converged_sem"], summ["pure"]["converged_sem"])
        diffs = [a["converged_value"] - b["converged_value"]
                 for a, b in zip(res.rows[1::2], res.rows[0::2])]
        summ.update(gap=gap, combined_sem=cs, gap_in_sem=gap / cs if cs else None,
                    paired_sem=mean_sem(diffs)[1])
    res.summary = summ
    return res


# open-loop tournament ---------------------------------------------------------------

def exp_open_loop_tournament(cfg: ExperimentConfig) -> ExperimentResult:
    """Independent pure and lifted solvers for each role; each pairing plays one sampled candidate."""
    res = ExperimentResult("open_loop_tournament", cfg.to_dict())
    game = lg.tag_game(cfg.env, "control")
    n = cfg.count("open_loop_tournament")
    sizes = {"pure": 1, "lifted": cfg.n_lifted}

    def run(k):
        x1, x2 = _initial_state(cfg, k)
        # separate solver instance per (variant, role); only the initial state is shared
        sols = {}
        for s, (variant, role) in enumerate([(v, r) for v in ("pure", "lifted") for r in (1, 2)], start=1):
            m = sizes[variant]
            b1, b2, trace = lg.gradient_play_references(x1, x2, m, m, cfg.gp_steps, cfg.gp_rate,
                                                        trial_rng(cfg.seed, k, s), game, tol=cfg.gp_tol)
            sols[variant, role] = (lg.forward(b1, b2, x1, x2, game), trace)
        rows = []
        for pv, ev in PAIRINGS:
            sp, _ = sols[pv, 1]
            se, _ = sols[ev, 2]
            i = int(trial_rng(cfg.seed, k, 10, PAIRINGS.index((pv, ev)), 1).choice(len(sp.q1), p=sp.q1))
            j = int(trial_rng(cfg.seed, k, 10, PAIRINGS.index((pv, ev)), 2).choice(len(se.q2), p=se.q2))
            A = te.pursuer_cost_matrix(sp.taus1, se.taus2, cfg.env)
            rows.append({"trial": k, "pursuer": pv, "evader": ev, "value": float(A[i, j]),
                         "expected_value": float(sp.q1 @ A @ se.q2), "pursuer_candidate": i,
                         "evader_candidate": j, "pursuer_solver_L1": sp.L1, "evader_solver_L1": se.L1})
        return rows

    for rows in _map(run, range(n), cfg.threads):
        res.rows += rows
    grid = {p: TournamentResult(*p, [r["value"] for r in res.rows if (r["pursuer"], r["evader"]) == p])
            for p in PAIRINGS}
    res.summary = {"grid": {"%s/%s" % p: grid[p].to_json() for p in PAIRINGS}, "ordering": grid_ordering(grid),
                   "expected": {"%s/%s" % p: mean_sem([r["expected_value"] for r in res.rows
                                                      if (r["pursuer"], r["evader"]) == p]) for p in PAIRINGS}}
    res.extra["grid"] = grid
    return res


# receding-horizon tournament -------------------------------------------------------

def train_generators(cfg: ExperimentConfig, variant: str, log_path=None):
    """Offline-trained generator pair for one solver variant."""
    m = 1 if variant == "pure" else cfg.n_lifted
    tc = dataclasses.replace(cfg.train, n1=m, n2=m, seed=cfg.seed, horizon=cfg.env.horizon, mode="control")
    th1, th2, trace = tr.train_offline(tc, cfg.env, log_path=log_path)
    return th1, th2, trace, tc


def exp_receding_horizon_tournament(cfg: ExperimentConfig, outdir=None) -> ExperimentResult:
    """Closed-loop play of generator-driven planners, next to one open-loop plan from the same states."""
    res = ExperimentResult("receding_horizon_tournament", cfg.to_dict())
    n = cfg.count("receding_horizon_tournament")
    gens, games = {}, {}
    for variant in ("pure", "lifted"):
        lp = Path(outdir) / f"train_{variant}.jsonl" if outdir else None
        th1, th2, trace, tc = train_generators(cfg, variant, lp)
        gens[variant] = (th1, th2)
        games[variant] = tr.make_game(cfg.env, tc)
        res.extra[f"train_{variant}"] = trace
        if outdir:
            Path(outdir).mkdir(parents=True, exist_ok=True)
            gn.save_params(th1, Path(outdir) / f"{variant}_pursuer.json")
            gn.save_params(th2, Path(outdir) / f"{variant}_evader.json")

    def run(k):
        x1, x2 = _initial_state(cfg, k)
        rows = []
        for pi, (pv, ev) in enumerate(PAIRINGS):
            lat_p, lat_e = [], []
            pol_p = tr.generator_policy(*gens[pv], games[pv], lat_p)
            pol_e = tr.generator_policy(*gens[ev], games[ev], lat_e)
            r1 = trial_rng(cfg.seed, k, 20, pi, 1)
            r2 = trial_rng(cfg.seed, k, 20, pi, 2)
            ep = mpgp_simulate(pol_p, pol_e, x1, x2, cfg.rh_turns, cfg.replan_interval, cfg.env, r1, r2,
                               (f"{pv} pursuer", f"{ev} evader"), cfg.seed)
            s1, _, s2, _ = ep.arrays()
            feasible = all(te.state_ok(a, cfg.env) and te.state_ok(b, cfg.env) for a, b in zip(s1, s2))
            ol = mpgp_simulate(pol_p, pol_e, x1, x2, 1, cfg.env.horizon, cfg.env,
                               trial_rng(cfg.seed, k, 21, pi, 1), trial_rng(cfg.seed, k, 21, pi, 2))
            rows.append({"trial": k, "pursuer": pv, "evader": ev, "value": ep.value, "open_loop_value": ol.value,
                         "steps": len(ep.controls1), "feasible": feasible,
                         "plan_ms_pursuer": 1e3 * float(np.mean(lat_p)), "plan_ms_evader": 1e3 * float(np.mean(lat_e))})
        return rows

    for rows in _map(run, range(n), cfg.threads):
        res.rows += rows
    grid = {p: TournamentResult(*p, [r["value"] for r in res.rows if (r["pursuer"], r["evader"]) == p])
            for p in PAIRINGS}
    ol = {p: TournamentResult(*p, [r["open_loop_value"] for r in res.rows if (r["pursuer"], r["evader"]) == p])
          for p in PAIRINGS}
    below = {"%s/%s" % p: (grid[p].mean is not None and grid[p].mean < ol[p].mean) for p in PAIRINGS}
    res.summary = {
        "grid": {"%s/%s" % p: grid[p].to_json() for p in PAIRINGS},
        "open_loop": {"%s/%s" % p: ol[p].to_json() for p in PAIRINGS},
        "ordering": grid_ordering(grid), "below_open_loop": below,
        "all_feasible": all(r["feasible"] for r in res.rows),
        "training_final_L1": {v: res.extra[f"train_{v}"].mean_L1[-1] for v in gens},
    }
    res.extra.update(grid=grid, open_loop=ol)
    return res


# sampled vs learned candidates -------------------------------------------------------

def exp_sampled_vs_learned(cfg: ExperimentConfig) -> ExperimentResult:
    """Goal-reference tag against a fixed evader bundle: sampled pursuer goals vs two learned ones.

    Sampled baselines use the first ``n1`` of one set of ``goal_candidates``
    goals drawn uniformly over the arena, so larger sets contain smaller ones.
    """
    res = ExperimentResult("sampled_vs_learned", cfg.to_dict())
    game = lg.tag_game(cfg.env, "goal", cfg.goal_control_weight, DEFAULT_CONFIG)
    n = cfg.count("sampled_vs_learned")
    N = cfg.goal_candidates

    def run(k):
        x1, x2 = _initial_state(cfg, k)
        b2 = game.random_bundle(2, N, trial_rng(cfg.seed, k, 30))
        pool1 = game.random_bundle(1, N, trial_rng(cfg.seed, k, 31))
        c = (build_constraints(x1, game.spec1, game.env), build_constraints(x2, game.spec2, game.env))
        sol = lg.forward(pool1, b2, x1, x2, game, constraints=c)
        rows = []
        for m in range(1, N + 1):
            sub = lg.forward(lg.ReferenceBundle(1, pool1.refs[:m]), b2, x1, x2, game, constraints=c,
                             reuse=(sol.qp1[:m], sol.qp2))
            rows.append({"trial": k, "pursuer": "sampled", "n1": m, "value": sub.L1})
        init = (game.random_bundle(1, cfg.n_lifted, trial_rng(cfg.seed, k, 32)), b2)
        b1, _, trace = lg.gradient_play_references(x1, x2, cfg.n_lifted, N, cfg.goal_steps, (cfg.goal_rate, 0.0),
                                                   None, game, tol=cfg.gp_tol, init=init)
        learned = lg.forward(b1, b2, x1, x2, game, constraints=c, reuse=(None, sol.qp2))
        rows.append({"trial": k, "pursuer": "learned", "n1": cfg.n_lifted, "value": learned.L1,
                     "initial_value": trace.values[0], "iterations": len(trace.values)})
        return rows

    for rows in _map(run, range(n), cfg.threads):
        res.rows += rows
    base = {}
    for m in range(1, N + 1):
        mu, se = mean_sem([r["value"] for r in res.rows if r["pursuer"] == "sampled" and r["n1"] == m])
        base[m] = {"mean": mu, "sem": se}
    lm, ls = mean_sem([r["value"] for r in res.rows if r["pursuer"] == "learned"])
    summ = {"baseline": base, "learned": {"mean": lm, "sem": ls, "n1": cfg.n_lifted},
            "goal_distribution": "uniform over the arena polygon"}
    if n:
        cs = combined_sem(base[N]["sem"], ls)
        summ["advantage"] = base[N]["mean"] - lm
        summ["advantage_in_sem"] = summ["advantage"] / cs if cs else None
        means = [base[m]["mean"] for m in range(1, N + 1)]
        summ["baseline_worst_at_one"] = bool(np.argmax(means) == 0)
    res.summary = summ
    return res


# self-play ---------------------------------------------------------------------------

def exp_self_play(cfg: ExperimentConfig) -> ExperimentResult:
    """Online learning of both generators inside the receding-horizon loop."""
    res = ExperimentResult("self_play", cfg.to_dict())
    turns = cfg.count("self_play")
    tc = dataclasses.replace(cfg.train, n1=cfg.n_lifted, n2=cfg.n_lifted, seed=cfg.seed,
                             horizon=cfg.env.horizon, replan_interval=cfg.replan_interval)
    x0 = _initial_state(cfg, 0)
    trace = tr.self_play_learn(tc, cfg.env, turns, x0=x0)
    s1, _, s2, _ = trace.episode.arrays()
    feasible = [te.state_ok(a, cfg.env) and te.state_ok(b, cfg.env) for a, b in zip(s1, s2)]
    for t in range(len(trace.turn_values)):
        res.rows.append({"turn": t, "value": trace.turn_values[t], "predicted": trace.predicted[t],
                         "grad_norm1": trace.grad_norms[t][0], "grad_norm2": trace.grad_norms[t][1],
                         "window_mean": trace.window_mean[t], "forward_ms": 1e3 * trace.forward_seconds[t]})
    G = np.array(trace.grad_norms).sum(1) if trace.grad_norms else np.zeros(0)
    w = max(turns // 5, 1)
    first, last = (float(G[:w].mean()), float(G[-w:].mean())) if len(G) else (None, None)
    W = cfg.train.window
    v = np.asarray(trace.turn_values)
    drift = (float(abs(v[-W:].mean() - v[-2 * W : -W].mean()) / abs(v[-W:].mean()))
             if len(v) >= 2 * W else None)
    fs = np.asarray(trace.forward_seconds) * 1e3
    res.summary = {
        "turns": turns, "all_feasible": bool(all(feasible)), "compare_window": w,
        "grad_norm_first_window": first, "grad_norm_last_window": last,
        "grad_norm_decreased": bool(first is not None and last < first),
        "window_mean_final": trace.window_mean[-1] if trace.window_mean else None,
        "window_sem_final": trace.window_sem[-1] if trace.window_sem else None,
        "window_drift": drift, "skipped_updates": len(trace.skipped),
        "forward_ms_mean": float(fs.mean()) if fs.size else None,
        "forward_ms_median": float(np.median(fs)) if fs.size else None,
    }
    res.extra["trace"] = trace
    return res


RUNNERS = {
    "toy_interval": exp_toy_interval,
    "equilibrium_convergence": exp_equilibrium_convergence,
    "open_loop_tournament": exp_open_loop_tournament,
    "receding_horizon_tournament": exp_receding_horizon_tournament,
    "sampled_vs_learned": exp_sampled_vs_learned,
    "self_play": exp_self_play,
}


def run_experiment(cfg: ExperimentConfig, outdir=None) -> ExperimentResult:
    if cfg.experiment == "receding_horizon_tournament":
        res = exp_receding_horizon_tournament(cfg, outdir)
    else:
        res = RUNNERS[cfg.experiment](cfg)
    if outdir is not None:
        res.write(outdir)
    return res
