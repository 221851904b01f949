"""Compare the compiled and pure-Python kernels on tag-sized problems.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends get identical inputs; the script checks that they agree and
prints the median wall time per call and the speedup.
"""
import argparse
import time

import numpy as np

from liftgame import kernels
from liftgame import tag_env as te
from liftgame import traj_opt as to
from liftgame.bimatrix import shift_positive, CostMatrixPair


def admm_inputs(seed=0):
    env = te.TagEnvSpec()
    spec = to.control_reference_spec(env)
    rng = np.random.default_rng(seed)
    x1, _ = te.sample_initial_state(env, rng)
    cons = to.build_constraints(x1, spec, env)
    ws = spec._ws
    s = cons.structure
    xi = rng.uniform(-1, 1, spec.ref_dim) * 2.0
    tau_p = ws.eq_pinv @ cons.b_eq
    c = np.ascontiguousarray(ws.Z.T @ (ws.P @ tau_p - spec.G.T @ xi))
    Ct = s.C[ws.rows] @ tau_p
    ls = (s.lb[ws.rows] - Ct) * ws.row_scale
    us = (s.ub[ws.rows] - Ct) * ws.row_scale
    return ws, c, ls, us


def run_admm(backend, inputs, iters):
    ws, c, ls, us = inputs
    x = np.zeros(len(c))
    z = np.clip(ws.Ds @ x, ls, us)
    y = np.zeros(len(ls))
    # zero tolerances: always run the full iteration budget
    backend.admm(ws.Qc, ws.Kinv, ws.Ds, c, ls, us, x, z, y, ws.rho, 1e-6, 1.6, iters, iters, 0.0, 0.0, 0.0)
    return x


def lh_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    sg = shift_positive(CostMatrixPair(rng.normal(size=(n, n)), rng.normal(size=(n, n))))
    Apay = np.ascontiguousarray(sg.Abar.max() + 1.0 - sg.Abar)
    Bpay = np.ascontiguousarray(sg.Bbar.max() + 1.0 - sg.Bbar)
    return Apay, Bpay


def timeit(fn, repeat):
    out, times = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--admm-iters", type=int, default=500)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    backends = {"python": kernels.python_backend, "cython": kernels.compiled_backend}

    cases = []
    inputs = admm_inputs()
    cases.append((f"admm x{args.admm_iters} (tag QP, {len(inputs[2])} rows)",
                  {k: (lambda b=b: run_admm(b, inputs, args.admm_iters)) for k, b in backends.items()}))
    for n in (2, 4, 10, 20):
        Ap, Bp = lh_inputs(n)
        cases.append((f"lemke_howson {n}x{n}",
                      {k: (lambda b=b, Ap=Ap, Bp=Bp: b.lemke_howson(Ap, Bp, 0, 100000)[:2]) for k, b in backends.items()}))

    print(f"{'kernel':<36} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, fns in cases:
        tp, op = timeit(fns["python"], args.repeat)
        tc, oc = timeit(fns["cython"], args.repeat)
        op = np.concatenate([np.ravel(a) for a in (op if isinstance(op, tuple) else (op,))])
        oc = np.concatenate([np.ravel(a) for a in (oc if isinstance(oc, tuple) else (oc,))])
        diff = float(np.max(np.abs(op - oc)))
        print(f"{name:<36} {1e3 * tp:>10.3f} {1e3 * tc:>10.3f} {tp / tc:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
