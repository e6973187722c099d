"""Hot loops of the matrix-free solver.

Every kernel exists twice: a numba ``@njit`` version and a pure numpy/scipy
version with the same signature. ``HOMOGENIZE_NUMBA=0`` in the environment
selects the numpy path at import time; :func:`use_numba` switches at runtime
(used by the benchmark and the equivalence tests).

Arrays holding field vectors are ``(n_elements, n_local)`` C-contiguous
float64; flat indices address ``data.reshape(-1)``.
"""
from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("HOMOGENIZE_NUMBA", "1").strip().lower()
_ACTIVE = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")

__all__ = [
    "numba_enabled",
    "use_numba",
    "class_apply",
    "weighted_apply",
    "interface_sum",
    "dup_dot",
    "interpolate_columns",
    "restrict_columns",
    "cg_update",
    "p_update",
]


def numba_enabled() -> bool:
    return _ACTIVE


def use_numba(flag: bool) -> bool:
    """Select the kernel backend; returns the previous setting."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = bool(flag) and HAVE_NUMBA
    return prev


# ---------------------------------------------------------------------------
# numpy implementations


def _class_apply_np(x, y, indptr, indices, class_vals, elem_class):
    n = x.shape[1]
    for c in range(class_vals.shape[0]):
        idx = np.flatnonzero(elem_class == c)
        if idx.size == 0:
            continue
        A = sp.csr_matrix((class_vals[c], indices, indptr), shape=(n, n))
        y[idx] = (A @ x[idx].T).T
    return float(np.vdot(x, y))


def _weighted_apply_np(x, y, indptr, indices, vals, w):
    n = x.shape[1]
    y[...] = 0.0
    for t in range(vals.shape[1]):
        A = sp.csr_matrix((vals[:, t], indices, indptr), shape=(n, n))
        y += w[:, t, None] * (A @ x.T).T
    return float(np.vdot(x, y))


def _interface_sum_np(y, ptr, members):
    if members.size == 0:
        return
    sums = np.add.reduceat(y[members], ptr[:-1])
    y[members] = np.repeat(sums, np.diff(ptr))


def _dup_dot_np(x, z, w):
    return float(np.dot(x * w, z))


def _interpolate_np(xc, xf, parents, n_prev):
    xf[:, :n_prev] = xc
    xf[:, n_prev:] = 0.5 * (xc[:, parents[:, 0]] + xc[:, parents[:, 1]])


def _restrict_np(xf, xc, parents, n_prev):
    n_new = parents.shape[0]
    rows = np.r_[np.arange(n_prev), parents[:, 0], parents[:, 1]]
    cols = np.r_[np.arange(n_prev), n_prev + np.arange(n_new), n_prev + np.arange(n_new)]
    vals = np.r_[np.ones(n_prev), np.full(2 * n_new, 0.5)]
    RT = sp.csr_matrix((vals, (rows, cols)), shape=(n_prev, n_prev + n_new))
    xc[...] = (RT @ xf.T).T


def _cg_update_np(x, r, p, ap, a, w):
    x += a * p
    r -= a * ap
    return float(np.dot(r * w, r))


def _p_update_np(p, r, beta):
    p *= beta
    p += r


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    # Four elements are processed together so the row sums form independent
    # dependency chains; each element still sums its row in CSR order.

    @njit(cache=True)
    def _class_apply_nb(x, y, indptr, indices, class_vals, elem_class):
        m, n = x.shape
        en = 0.0
        j = 0
        while j + 4 <= m:
            c0, c1, c2, c3 = elem_class[j], elem_class[j + 1], elem_class[j + 2], elem_class[j + 3]
            for i in range(n):
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                s3 = 0.0
                for e in range(indptr[i], indptr[i + 1]):
                    k = indices[e]
                    s0 += class_vals[c0, e] * x[j, k]
                    s1 += class_vals[c1, e] * x[j + 1, k]
                    s2 += class_vals[c2, e] * x[j + 2, k]
                    s3 += class_vals[c3, e] * x[j + 3, k]
                y[j, i] = s0
                y[j + 1, i] = s1
                y[j + 2, i] = s2
                y[j + 3, i] = s3
                en += s0 * x[j, i] + s1 * x[j + 1, i] + s2 * x[j + 2, i] + s3 * x[j + 3, i]
            j += 4
        while j < m:
            c = elem_class[j]
            for i in range(n):
                s = 0.0
                for e in range(indptr[i], indptr[i + 1]):
                    s += class_vals[c, e] * x[j, indices[e]]
                y[j, i] = s
                en += s * x[j, i]
            j += 1
        return en

    @njit(cache=True)
    def _weighted_apply_nb(x, y, indptr, indices, vals, w):
        m, n = x.shape
        T = vals.shape[1]
        nnz = indices.shape[0]
        coef = np.empty((4, nnz))
        en = 0.0
        j = 0
        while j < m:
            nb = min(4, m - j)
            for b in range(nb):
                for e in range(nnz):
                    s = 0.0
                    for t in range(T):
                        s += w[j + b, t] * vals[e, t]
                    coef[b, e] = s
            if nb == 4:
                for i in range(n):
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    s3 = 0.0
                    for e in range(indptr[i], indptr[i + 1]):
                        k = indices[e]
                        s0 += coef[0, e] * x[j, k]
                        s1 += coef[1, e] * x[j + 1, k]
                        s2 += coef[2, e] * x[j + 2, k]
                        s3 += coef[3, e] * x[j + 3, k]
                    y[j, i] = s0
                    y[j + 1, i] = s1
                    y[j + 2, i] = s2
                    y[j + 3, i] = s3
                    en += s0 * x[j, i] + s1 * x[j + 1, i] + s2 * x[j + 2, i] + s3 * x[j + 3, i]
            else:
                for b in range(nb):
                    for i in range(n):
                        s = 0.0
                        for e in range(indptr[i], indptr[i + 1]):
                            s += coef[b, e] * x[j + b, indices[e]]
                        y[j + b, i] = s
                        en += s * x[j + b, i]
            j += nb
        return en

    @njit(cache=True)
    def _interface_sum_nb(y, ptr, members):
        for g in range(ptr.shape[0] - 1):
            s = 0.0
            for e in range(ptr[g], ptr[g + 1]):
                s += y[members[e]]
            for e in range(ptr[g], ptr[g + 1]):
                y[members[e]] = s

    @njit(cache=True)
    def _dup_dot_nb(x, z, w):
        s0 = 0.0
        s1 = 0.0
        n = x.shape[0]
        i = 0
        while i + 1 < n:
            s0 += w[i] * x[i] * z[i]
            s1 += w[i + 1] * x[i + 1] * z[i + 1]
            i += 2
        if i < n:
            s0 += w[i] * x[i] * z[i]
        return s0 + s1

    @njit(cache=True)
    def _interpolate_nb(xc, xf, parents, n_prev):
        m = xc.shape[0]
        n_new = parents.shape[0]
        for j in range(m):
            for i in range(n_prev):
                xf[j, i] = xc[j, i]
            for k in range(n_new):
                xf[j, n_prev + k] = 0.5 * (xc[j, parents[k, 0]] + xc[j, parents[k, 1]])

    @njit(cache=True)
    def _restrict_nb(xf, xc, parents, n_prev):
        m = xf.shape[0]
        n_new = parents.shape[0]
        for j in range(m):
            for i in range(n_prev):
                xc[j, i] = xf[j, i]
            for k in range(n_new):
                v = 0.5 * xf[j, n_prev + k]
                xc[j, parents[k, 0]] += v
                xc[j, parents[k, 1]] += v

    @njit(cache=True)
    def _cg_update_nb(x, r, p, ap, a, w):
        s = 0.0
        for i in range(x.shape[0]):
            x[i] += a * p[i]
            ri = r[i] - a * ap[i]
            r[i] = ri
            s += w[i] * ri * ri
        return s

    @njit(cache=True)
    def _p_update_nb(p, r, beta):
        for i in range(p.shape[0]):
            p[i] = r[i] + beta * p[i]


# ---------------------------------------------------------------------------
# dispatch


def class_apply(x, y, indptr, indices, class_vals, elem_class) -> float:
    """``y[j] = A_{class[j]} @ x[j]`` with class matrices sharing one CSR pattern.

    Returns ``sum_j x[j] . y[j]``, which comes almost for free while the rows are hot.
    """
    if _ACTIVE:
        return float(_class_apply_nb(x, y, indptr, indices, class_vals, elem_class))
    return _class_apply_np(x, y, indptr, indices, class_vals, elem_class)


def weighted_apply(x, y, indptr, indices, vals, w) -> float:
    """``y[j] = (sum_t w[j, t] A_t) @ x[j]`` without forming the combination; returns ``sum x . y``."""
    if _ACTIVE:
        return float(_weighted_apply_nb(x, y, indptr, indices, vals, w))
    return _weighted_apply_np(x, y, indptr, indices, vals, w)


def interface_sum(y_flat, ptr, members):
    """Sum the copies of each shared node and write the total back to every copy."""
    if _ACTIVE:
        _interface_sum_nb(y_flat, ptr, members)
    else:
        _interface_sum_np(y_flat, ptr, members)


def dup_dot(x_flat, z_flat, owner_weight):
    """Inner product counting each shared node once (non-owner copies have weight 0).

    ``owner_weight`` is a uint8 0/1 array; it is read on every call, so it is kept small.
    """
    if _ACTIVE:
        return float(_dup_dot_nb(x_flat, z_flat, owner_weight))
    return _dup_dot_np(x_flat, z_flat, owner_weight)


def interpolate_columns(xc, xf, parents, n_prev):
    if _ACTIVE:
        _interpolate_nb(xc, xf, parents, n_prev)
    else:
        _interpolate_np(xc, xf, parents, n_prev)


def restrict_columns(xf, xc, parents, n_prev):
    if _ACTIVE:
        _restrict_nb(xf, xc, parents, n_prev)
    else:
        _restrict_np(xf, xc, parents, n_prev)


def cg_update(x, r, p, ap, a, owner_weight):
    """``x += a p``, ``r -= a Ap``; returns the duplicate-aware ``<r, r>``."""
    if _ACTIVE:
        return float(_cg_update_nb(x, r, p, ap, a, owner_weight))
    return _cg_update_np(x, r, p, ap, a, owner_weight)


def p_update(p, r, beta):
    """``p = r + beta p`` in place."""
    if _ACTIVE:
        _p_update_nb(p, r, beta)
    else:
        _p_update_np(p, r, beta)
