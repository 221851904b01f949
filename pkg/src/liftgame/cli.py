"""Command-line entry point.

Subcommands: run, train, play, solve-bimatrix, dump-trajectories. Configuration is
a JSON object with the fields of ``ExperimentConfig`` (nested ``env`` and
``train`` objects); ``key.sub=value`` arguments override fields after loading.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import bimatrix as bm
from . import experiments as ex
from . import generator as gn
from . import lifted_game as lg
from . import tag_env as te
from . import training as tr
from .mpgp import mpgp_simulate

log = logging.getLogger("liftgame")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def _line_of(text: str, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(d: dict, dotted: str):
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} is not of the form key=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not an object")
    node[parts[-1]] = _parse_value(raw)


def load_config(path=None, overrides=(), **flags) -> tuple:
    """Build an ``ExperimentConfig`` from an optional JSON file, flags and dotted overrides.

    Returns ``(config, file_text)``. Raises ``ConfigError`` with a ``file:line``
    prefix where the offending entry can be located.
    """
    text = ""
    data = {}
    where = str(path) if path else "<config>"
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{where}: cannot read config: {exc.strerror}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{where}:1: top level must be a JSON object")
    for k, v in flags.items():
        if v is not None:
            data[k] = v
    for o in overrides:
        apply_override(data, o)
    try:
        return ex.ExperimentConfig.from_dict(data), text
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        line = None
        for key in re.findall(r"'(\w+)'", msg) + re.findall(r"(\w+) must", msg):
            line = _line_of(text, key)
            if line:
                break
        raise ConfigError(f"{where}:{line}: {msg}" if line else f"{where}: {msg}") from exc


def _setup_logging(outdir=None):
    level = os.environ.get("LIFTGAME_LOG", "WARNING").upper()
    handlers = [logging.StreamHandler(sys.stderr)]
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(outdir) / "run.log"))
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), handlers=handlers, force=True,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _prepare_output(args, cfg, text) -> Path:
    out = Path(args.output_dir or f"results/{cfg.experiment}_seed{cfg.seed}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from exc
    if args.config:
        shutil.copyfile(args.config, out / "config.json")
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return out


def _fmt(x, nd=4):
    return "-" if x is None else f"{x:.{nd}f}"


def format_summary(res: ex.ExperimentResult) -> str:
    s = res.summary
    lines = [f"experiment: {res.name}"]
    if res.name == "toy_interval":
        for variant in ("regularized", "unregularized"):
            v = s[variant]
            lines.append(f"{variant}: runs={v['runs']} equilibria={v['equilibria']} gradient_stops={v['gradient_stops']}")
            lines.append("  limit points: " + ", ".join(f"{k} x{n}" for k, n in sorted(v["limit_points"].items())))
            lines.append("  status: " + ", ".join(f"{k}={n}" for k, n in sorted(v["status_counts"].items())))
    elif res.name in ("open_loop_tournament", "receding_horizon_tournament"):
        lines.append(f"{'pursuer':>8} {'evader':>8} {'trials':>6} {'mean':>8} {'sem':>8}")
        for key, g in s["grid"].items():
            lines.append(f"{g['pursuer']:>8} {g['evader']:>8} {g['trials']:>6} {_fmt(g['mean']):>8} {_fmt(g['sem']):>8}")
        lines.append(f"ordering P/L > L/L > L/P > P/P: {s['ordering']['ordered']}")
        if "below_open_loop" in s:
            lines.append("below open loop: " + ", ".join(f"{k}={v}" for k, v in s["below_open_loop"].items()))
    elif res.name == "equilibrium_convergence":
        for m in ("pure", "lifted"):
            lines.append(f"{m}: converged {_fmt(s[m]['converged_mean'])} +- {_fmt(s[m]['converged_sem'])}"
                         f" drift {_fmt(s[m]['drift'])}")
        if "gap" in s:
            lines.append(f"gap {_fmt(s['gap'])} = {_fmt(s['gap_in_sem'], 2)} combined SEM")
    elif res.name == "sampled_vs_learned":
        for m, b in s["baseline"].items():
            lines.append(f"sampled n1={m:>2}: {_fmt(b['mean'])} +- {_fmt(b['sem'])}")
        lines.append(f"learned n1={s['learned']['n1']:>2}: {_fmt(s['learned']['mean'])} +- {_fmt(s['learned']['sem'])}")
    elif res.name == "self_play":
        for k in ("turns", "all_feasible", "grad_norm_first_window", "grad_norm_last_window",
                  "window_mean_final", "window_drift", "forward_ms_mean"):
            lines.append(f"{k}: {s[k]}")
    return "\n".join(lines)


# subcommands -----------------------------------------------------------------------

def cmd_run(args, cfg, text):
    out = _prepare_output(args, cfg, text)
    _setup_logging(out)
    t0 = time.perf_counter()
    res = ex.run_experiment(cfg, out)
    print(format_summary(res))
    print(f"wrote {out} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_train(args, cfg, text):
    out = _prepare_output(args, cfg, text)
    _setup_logging(out)
    tc = dataclasses.replace(cfg.train, seed=cfg.seed, horizon=cfg.env.horizon)
    th1, th2, trace = tr.train_offline(tc, cfg.env, log_path=out / "train.jsonl",
                                       checkpoint_dir=out / "checkpoints" if tc.checkpoint_every else None)
    gn.save_params(th1, out / "pursuer.json")
    gn.save_params(th2, out / "evader.json")
    print(f"trained {tc.iterations} iterations: mean L1 {trace.mean_L1[0]:.4f} -> {trace.mean_L1[-1]:.4f}")
    print(f"checkpoints: {out / 'pursuer.json'} {out / 'evader.json'}")
    return EXIT_OK


def _load_pair(args, cfg):
    try:
        th1 = gn.load_params(args.pursuer)
        th2 = gn.load_params(args.evader)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    mode = "goal" if th1.ref_dim == 2 else "control"
    tc = dataclasses.replace(cfg.train, n1=th1.n_candidates, n2=th2.n_candidates, mode=mode)
    return th1, th2, tr.make_game(cfg.env, tc)


def cmd_play(args, cfg, text):
    out = _prepare_output(args, cfg, text)
    _setup_logging(out)
    th1, th2, game = _load_pair(args, cfg)
    x1, x2 = te.sample_initial_state(cfg.env, ex.trial_rng(cfg.seed, 0, 0))
    timings = []
    plan = tr.generator_policy(th1, th2, game, timings)
    cache = {}

    def shared(a, b):
        key = (a.tobytes(), b.tobytes())
        if cache.get("key") != key:
            cache.update(key=key, sol=plan(a, b))
        return cache["sol"]

    ep = mpgp_simulate(shared, shared, x1, x2, cfg.rh_turns, cfg.replan_interval, cfg.env,
                       ex.trial_rng(cfg.seed, 0, 1), ex.trial_rng(cfg.seed, 0, 2), ("pursuer", "evader"), cfg.seed)
    ms = 1e3 * np.asarray(timings)
    report = {"turns": cfg.rh_turns, "steps": len(ep.controls1), "value": ep.value,
              "forward_ms_mean": float(ms.mean()), "forward_ms_median": float(np.median(ms)),
              "forward_ms_max": float(ms.max())}
    (out / "episode.json").write_text(json.dumps({**ep.to_json(), "timing": report}))
    print(f"closed-loop value {ep.value:.4f} over {report['steps']} steps")
    print(f"per-plan forward latency: mean {report['forward_ms_mean']:.2f} ms, "
          f"median {report['forward_ms_median']:.2f} ms, max {report['forward_ms_max']:.2f} ms")
    return EXIT_OK


def cmd_dump(args, cfg, text):
    out = _prepare_output(args, cfg, text)
    _setup_logging(out)
    x1, x2 = te.sample_initial_state(cfg.env, ex.trial_rng(cfg.seed, 0, 0))
    if args.pursuer and args.evader:
        th1, th2, game = _load_pair(args, cfg)
        sol = tr.generator_policy(th1, th2, game)(x1, x2)
    else:
        game = lg.tag_game(cfg.env, "control")
        n = cfg.n_lifted
        b1, b2, _ = lg.gradient_play_references(x1, x2, n, n, cfg.gp_steps, cfg.gp_rate,
                                                ex.trial_rng(cfg.seed, 0, 1), game, tol=cfg.gp_tol)
        sol = lg.forward(b1, b2, x1, x2, game)
    trajs1, trajs2 = lg.solution_trajectories(sol, cfg.env)
    dump = {**sol.to_json(), "x1": x1.tolist(), "x2": x2.tolist(), "arena": cfg.env.vertices.tolist(),
            "positions": {"player1": [t.states[:, :2].tolist() for t in trajs1],
                          "player2": [t.states[:, :2].tolist() for t in trajs2]}}
    path = out / "trajectories.json"
    path.write_text(json.dumps(dump))
    print(f"L1 {sol.L1:.4f}, q1 {np.round(sol.q1, 4).tolist()}, q2 {np.round(sol.q2, 4).tolist()}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_solve_bimatrix(args):
    try:
        pair = bm.parse_bimatrix_text(Path(args.file).read_text())
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {args.file}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sol = bm.bmg(pair, entering_label=args.label)
    ok, worst = bm.verify_equilibrium(pair, sol.q1, sol.q2)
    np.set_printoptions(precision=10, suppress=True)
    print(f"q1 = {sol.q1}")
    print(f"q2 = {sol.q2}")
    # rounding hides round-off such as 1e-33 in symmetric games (and adding 0.0 turns -0.0 into 0.0)
    c1 = round(float(sol.q1 @ pair.A @ sol.q2), 12) + 0.0
    c2 = round(float(sol.q1 @ pair.B @ sol.q2), 12) + 0.0
    print(f"player 1 cost = {c1:.10g}")
    print(f"player 2 cost = {c2:.10g}")
    print(f"verification residual = {worst:.3e}")
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liftgame", description="Lifted trajectory games: experiments and tools.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--experiment", help="experiment name")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--preset", help="trial-count preset: paper or ci")
        sp.add_argument("--threads", type=int, help="worker threads for independent trials")
        sp.add_argument("--output-dir", help="directory for results")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted field overrides")

    common(sub.add_parser("run", help="run an experiment"))
    common(sub.add_parser("train", help="train both generators offline"))
    for name, helptext in (("play", "receding-horizon episode from two checkpoints"),
                           ("dump-trajectories", "export one lifted solution as JSON")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--pursuer", required=name == "play", help="pursuer generator checkpoint")
        sp.add_argument("--evader", required=name == "play", help="evader generator checkpoint")
    sb = sub.add_parser("solve-bimatrix", help="mixed equilibrium of a cost bimatrix game")
    sb.add_argument("file", help="text file: 'n1 n2' then A and B row-major")
    sb.add_argument("--label", type=int, default=0, help="entering label (0-based)")
    return p


COMMANDS = {"run": cmd_run, "train": cmd_train, "play": cmd_play, "dump-trajectories": cmd_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "solve-bimatrix":
        return cmd_solve_bimatrix(args)
    try:
        cfg, text = load_config(args.config, args.overrides, experiment=args.experiment, seed=args.seed,
                                preset=args.preset, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg, text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {args.command} {cfg.experiment} (seed {cfg.seed}) failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
