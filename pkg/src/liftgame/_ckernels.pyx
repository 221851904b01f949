# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY, isinf

cnp.import_array()

ADMM_RUNNING = 0
ADMM_SOLVED = 1
ADMM_INFEASIBLE = 2

from ._pykernels import PivotLimitError


cdef inline double _clip(double v, double lo, double hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def admm(double[:, ::1] Q, double[:, ::1] Kinv, double[:, ::1] D, double[::1] c,
         double[::1] l, double[::1] u, double[::1] x, double[::1] z, double[::1] y,
         double rho, double sigma, double alpha, int max_iter, int check_every,
         double eps_abs, double eps_rel, double eps_inf):
    cdef Py_ssize_t n = Q.shape[0], m = D.shape[0]
    cdef Py_ssize_t i, j
    cdef int k, status = 0, iters = max_iter
    cdef double[::1] w = np.empty(m)
    cdef double[::1] rhs = np.empty(n)
    cdef double[::1] xt = np.empty(n)
    cdef double[::1] y_prev = np.empty(m)
    cdef double[::1] dx = np.empty(m)
    cdef double[::1] dty = np.empty(n)
    cdef double s, zr, ri = 1.0 / rho
    cdef double r_prim, r_dual, n_dx, n_z, n_qx, n_dty, n_c, qx, ndy, cert
    cdef bint check, bad

    with nogil:
        for k in range(1, max_iter + 1):
            check = (k % check_every == 0) or (k == max_iter)
            if check:
                for j in range(m):
                    y_prev[j] = y[j]
            for j in range(m):
                w[j] = rho * z[j] - y[j]
            for i in range(n):
                rhs[i] = sigma * x[i] - c[i]
            for j in range(m):
                s = w[j]
                if s != 0.0:
                    for i in range(n):
                        rhs[i] += D[j, i] * s
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += Kinv[i, j] * rhs[j]
                xt[i] = s
            for j in range(m):
                s = 0.0
                for i in range(n):
                    s += D[j, i] * xt[i]
                zr = alpha * s + (1.0 - alpha) * z[j]
                s = _clip(zr + y[j] * ri, l[j], u[j])
                y[j] += rho * (zr - s)
                z[j] = s
            for i in range(n):
                x[i] = alpha * xt[i] + (1.0 - alpha) * x[i]
            if not check:
                continue

            r_prim = 0.0
            n_dx = 0.0
            n_z = 0.0
            for j in range(m):
                s = 0.0
                for i in range(n):
                    s += D[j, i] * x[i]
                n_dx = max(n_dx, fabs(s))
                n_z = max(n_z, fabs(z[j]))
                r_prim = max(r_prim, fabs(s - z[j]))
            for i in range(n):
                dty[i] = 0.0
            for j in range(m):
                s = y[j]
                if s != 0.0:
                    for i in range(n):
                        dty[i] += D[j, i] * s
            r_dual = 0.0
            n_qx = 0.0
            n_dty = 0.0
            n_c = 0.0
            for i in range(n):
                qx = 0.0
                for j in range(n):
                    qx += Q[i, j] * x[j]
                n_qx = max(n_qx, fabs(qx))
                n_dty = max(n_dty, fabs(dty[i]))
                n_c = max(n_c, fabs(c[i]))
                r_dual = max(r_dual, fabs(qx + c[i] + dty[i]))
            if r_prim <= eps_abs + eps_rel * max(n_dx, n_z) and r_dual <= eps_abs + eps_rel * max(max(n_qx, n_dty), n_c):
                iters = k
                status = 1
                break

            ndy = 0.0
            for j in range(m):
                dx[j] = y[j] - y_prev[j]
                ndy = max(ndy, fabs(dx[j]))
            if ndy > 0.0:
                for i in range(n):
                    dty[i] = 0.0
                for j in range(m):
                    s = dx[j]
                    if s != 0.0:
                        for i in range(n):
                            dty[i] += D[j, i] * s
                s = 0.0
                for i in range(n):
                    s = max(s, fabs(dty[i]))
                if s <= eps_inf * ndy:
                    bad = False
                    cert = 0.0
                    for j in range(m):
                        if dx[j] > 0.0:
                            if isinf(u[j]):
                                bad = True
                            else:
                                cert += u[j] * dx[j]
                        elif dx[j] < 0.0:
                            if isinf(l[j]):
                                bad = True
                            else:
                                cert += l[j] * dx[j]
                    if not bad and cert <= -eps_inf * ndy:
                        iters = k
                        status = 2
                        break
    return iters, status


cdef void _pivot(double[:, ::1] T, Py_ssize_t row, Py_ssize_t col) noexcept nogil:
    cdef Py_ssize_t r, j, nr = T.shape[0], nc = T.shape[1]
    cdef double p = T[row, col], f
    for j in range(nc):
        T[row, j] /= p
    for r in range(nr):
        if r == row:
            continue
        f = T[r, col]
        if f != 0.0:
            for j in range(nc):
                T[r, j] -= f * T[row, j]


cdef Py_ssize_t _lex_min_ratio(double[:, ::1] T, Py_ssize_t col, Py_ssize_t slack0,
                               Py_ssize_t nslack, double tol) noexcept nogil:
    cdef Py_ssize_t nr = T.shape[0], rhs = T.shape[1] - 1
    cdef Py_ssize_t r, best = -1, kk, key
    cdef double a, b, m
    for r in range(nr):
        if T[r, col] <= tol:
            continue
        if best < 0:
            best = r
            continue
        # compare row r against best on keys rhs, slack0, slack0+1, ...
        for kk in range(nslack + 1):
            key = rhs if kk == 0 else slack0 + kk - 1
            a = T[r, key] / T[r, col]
            b = T[best, key] / T[best, col]
            m = b if b < a else a
            if fabs(a - b) <= tol * max(1.0, fabs(m)):
                continue
            if a < b:
                best = r
            break
    return best


def lemke_howson(double[:, ::1] Apay, double[:, ::1] Bpay, int label, int max_pivots):
    cdef Py_ssize_t n1 = Apay.shape[0], n2 = Apay.shape[1]
    cdef Py_ssize_t i, j, row, t, var, leaving, lab
    cdef int pivots = 0
    cdef double tol = 1e-13
    TQ_np = np.zeros((n1, n2 + n1 + 1))
    TP_np = np.zeros((n2, n1 + n2 + 1))
    cdef double[:, ::1] TQ = TQ_np
    cdef double[:, ::1] TP = TP_np
    cdef cnp.intp_t[::1] bQ = np.arange(n2, n2 + n1, dtype=np.intp)
    cdef cnp.intp_t[::1] bP = np.arange(n1, n1 + n2, dtype=np.intp)
    for i in range(n1):
        for j in range(n2):
            TQ[i, j] = Apay[i, j]
            TP[j, i] = Bpay[i, j]
        TQ[i, n2 + i] = 1.0
        TQ[i, n2 + n1] = 1.0
    for j in range(n2):
        TP[j, n1 + j] = 1.0
        TP[j, n1 + n2] = 1.0

    if label < n1:
        t = 1
        var = label
    else:
        t = 0
        var = label - n1
    with nogil:
        while True:
            if pivots >= max_pivots:
                break
            if t == 0:
                row = _lex_min_ratio(TQ, var, n2, n1, tol)
            else:
                row = _lex_min_ratio(TP, var, n1, n2, tol)
            if row < 0:
                pivots = max_pivots
                break
            if t == 0:
                _pivot(TQ, row, var)
                leaving = bQ[row]
                bQ[row] = var
                lab = n1 + leaving if leaving < n2 else leaving - n2
            else:
                _pivot(TP, row, var)
                leaving = bP[row]
                bP[row] = var
                lab = leaving
            pivots += 1
            if lab == label:
                break
            t = 1 - t
            if t == 0:
                var = lab - n1 if lab >= n1 else n2 + lab
            else:
                var = lab
    if pivots >= max_pivots:
        raise PivotLimitError(label, pivots)

    y = np.zeros(n2)
    x = np.zeros(n1)
    for row in range(n1):
        if bQ[row] < n2:
            y[bQ[row]] = TQ[row, n2 + n1]
    for row in range(n2):
        if bP[row] < n1:
            x[bP[row]] = TP[row, n1 + n2]
    return x, y, pivots
