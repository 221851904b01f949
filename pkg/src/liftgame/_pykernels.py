"""Pure-Python kernels (numpy). Reference semantics for ``_ckernels``."""
import numpy as np

ADMM_RUNNING = 0
ADMM_SOLVED = 1
ADMM_INFEASIBLE = 2


class PivotLimitError(RuntimeError):
    def __init__(self, label, pivots):
        super().__init__(f"Lemke-Howson exceeded {pivots} pivots (entering label {label})")
        self.label = label
        self.pivots = pivots


def admm(Q, Kinv, D, c, l, u, x, z, y, rho, sigma, alpha, max_iter, check_every, eps_abs, eps_rel, eps_inf):
    """Run OSQP-style ADMM on ``min 1/2 x'Qx + c'x  s.t.  l <= Dx <= u``.

    ``Kinv`` is the inverse of ``Q + sigma I + rho D'D``. The iterates ``x, z, y``
    are updated in place. Returns ``(iterations, status)``.
    """
    y_prev = y.copy()
    for k in range(1, max_iter + 1):
        check = k % check_every == 0 or k == max_iter
        if check:
            y_prev[:] = y
        xt = Kinv @ (sigma * x - c + D.T @ (rho * z - y))
        zt = D @ xt
        x *= 1.0 - alpha
        x += alpha * xt
        zr = alpha * zt + (1.0 - alpha) * z
        z[:] = np.clip(zr + y / rho, l, u)
        y += rho * (zr - z)
        if not check:
            continue
        Dx = D @ x
        Dty = D.T @ y
        Qx = Q @ x
        r_prim = np.max(np.abs(Dx - z), initial=0.0)
        r_dual = np.max(np.abs(Qx + c + Dty), initial=0.0)
        e_prim = eps_abs + eps_rel * max(np.max(np.abs(Dx), initial=0.0), np.max(np.abs(z), initial=0.0))
        e_dual = eps_abs + eps_rel * max(np.max(np.abs(Qx)), np.max(np.abs(Dty), initial=0.0), np.max(np.abs(c)))
        if r_prim <= e_prim and r_dual <= e_dual:
            return k, ADMM_SOLVED
        dy = y - y_prev
        ndy = np.max(np.abs(dy), initial=0.0)
        if ndy > 0.0 and np.max(np.abs(D.T @ dy)) <= eps_inf * ndy:
            pos = np.maximum(dy, 0.0)
            neg = np.minimum(dy, 0.0)
            if not (np.any(np.isinf(u) & (pos > 0)) or np.any(np.isinf(l) & (neg < 0))):
                fin_u = np.where(np.isinf(u), 0.0, u)
                fin_l = np.where(np.isinf(l), 0.0, l)
                if fin_u @ pos + fin_l @ neg <= -eps_inf * ndy:
                    return k, ADMM_INFEASIBLE
    return max_iter, ADMM_RUNNING


def _pivot(T, row, col):
    T[row] /= T[row, col]
    f = T[:, col].copy()
    f[row] = 0.0
    T -= np.outer(f, T[row])


def _lex_min_ratio(T, col, slack0, nslack, tol):
    coef = T[:, col]
    rows = np.flatnonzero(coef > tol)
    if len(rows) == 0:
        return -1
    keys = [T.shape[1] - 1] + list(range(slack0, slack0 + nslack))
    for key in keys:
        r = T[rows, key] / coef[rows]
        m = r.min()
        rows = rows[r <= m + tol * max(1.0, abs(m))]
        if len(rows) == 1:
            break
    return int(rows[0])


def lemke_howson(Apay, Bpay, label, max_pivots):
    """Lemke-Howson on positive payoff matrices (both players maximize).

    Uses the polytopes ``{x >= 0 : Bpay' x <= 1}`` and ``{y >= 0 : Apay y <= 1}``
    with a lexicographic ratio test. Returns ``(x, y, pivots)`` with ``x, y``
    the unnormalized polytope vertices.
    """
    n1, n2 = Apay.shape
    tol = 1e-13
    # tableau Q: vars y (n2) then r (n1); tableau P: vars x (n1) then s (n2)
    TQ = np.hstack([Apay, np.eye(n1), np.ones((n1, 1))])
    TP = np.hstack([Bpay.T, np.eye(n2), np.ones((n2, 1))])
    basis = [list(range(n2, n2 + n1)), list(range(n1, n1 + n2))]  # Q, P
    tabs = [TQ, TP]
    slack0 = [n2, n1]
    nslack = [n1, n2]

    def label_of(t, var):
        if t == 0:
            return n1 + var if var < n2 else var - n2
        return var

    def var_of(t, lab):
        if t == 0:
            return lab - n1 if lab >= n1 else n2 + lab
        return lab

    if label < n1:
        t, var = 1, label
    else:
        t, var = 0, label - n1
    pivots = 0
    while True:
        if pivots >= max_pivots:
            raise PivotLimitError(label, pivots)
        row = _lex_min_ratio(tabs[t], var, slack0[t], nslack[t], tol)
        if row < 0:
            raise PivotLimitError(label, pivots)
        _pivot(tabs[t], row, var)
        pivots += 1
        leaving = basis[t][row]
        basis[t][row] = var
        lab = label_of(t, leaving)
        if lab == label:
            break
        t = 1 - t
        var = var_of(t, lab)

    y = np.zeros(n2)
    for row, v in enumerate(basis[0]):
        if v < n2:
            y[v] = TQ[row, -1]
    x = np.zeros(n1)
    for row, v in enumerate(basis[1]):
        if v < n1:
            x[v] = TP[row, -1]
    return x, y, pivots
