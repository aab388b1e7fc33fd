"""Numba-compiled kernels; signatures mirror ``_numpy``."""
import math

import numpy as np
from numba import njit

NAME = "numba"

VDP, LORENZ63, ARCTAN_LORENZ = 0, 1, 2
TANH, SIGMOID = 0, 1


@njit(cache=True)
def bin_counts(points, lower, h, counts, strides):
    n, d = points.shape
    size = 1
    for i in range(d):
        size *= counts[i]
    out = np.zeros(size)
    inside = 0
    for p in range(n):
        j = 0
        ok = True
        for i in range(d):
            k = int(math.floor((points[p, i] - lower[i]) / h[i] + 1e-12))
            if k < 0 or k >= counts[i]:
                ok = False
                break
            j += k * strides[i]
        if ok:
            out[j] += 1.0
            inside += 1
    return out, inside


@njit(cache=True)
def assemble_coo(p, q, u, dh, c, n):
    nf = p.shape[0]
    diag = np.ones(n)
    rows = np.empty(2 * nf, dtype=np.int64)
    cols = np.empty(2 * nf, dtype=np.int64)
    vals = np.empty(2 * nf)
    for f in range(nf):
        uf = u[f]
        up = c * (max(uf, 0.0) + dh)
        down = c * (-min(uf, 0.0) + dh)
        diag[p[f]] -= up
        diag[q[f]] -= down
        rows[f] = q[f]
        cols[f] = p[f]
        vals[f] = up
        rows[nf + f] = p[f]
        cols[nf + f] = q[f]
        vals[nf + f] = down
    return diag, rows, cols, vals


# exp dominates; these flags let it vectorise while keeping inf semantics
_FAST = {"reassoc", "contract", "afn", "arcp", "nsz"}


@njit(cache=True, fastmath=_FAST)
def logconv(a, logk):
    m, n = logk.shape
    r = a.shape[1]
    out = np.empty((m, r))
    mx = np.empty(r)
    acc = np.empty(r)
    for j in range(m):
        # rows of ``a`` are contiguous, so sweep them innermost
        mx[:] = -np.inf
        for k in range(n):
            lk = logk[j, k]
            for c in range(r):
                mx[c] = max(mx[c], a[k, c] + lk)
        for c in range(r):
            if mx[c] == -np.inf:
                mx[c] = 0.0  # whole column is -inf; exp below gives 0
        acc[:] = 0.0
        for k in range(n):
            lk = logk[j, k]
            for c in range(r):
                acc[c] += math.exp(a[k, c] + lk - mx[c])
        for c in range(r):
            out[j, c] = mx[c] + math.log(acc[c])
    return out


# -- pointwise drifts ----------------------------------------------------------

@njit(cache=True)
def _builtin(x, v, prm):
    kind, c = prm
    if kind == VDP:
        v[0] = x[1]
        v[1] = c[0] * (1.0 - x[0] * x[0]) * x[1] - x[0]
    else:
        v[0] = c[0] * (x[1] - x[0])
        v[1] = x[0] * (c[1] - x[2]) - x[1]
        v[2] = x[0] * x[1] - c[2] * x[2]
        if kind == ARCTAN_LORENZ:
            for i in range(3):
                v[i] = 50.0 * math.atan(v[i] / 50.0)


@njit(cache=True)
def _mlp(x, v, prm):
    w1, b1, w2, b2, act = prm
    hdim, d = w1.shape
    for i in range(v.shape[0]):
        v[i] = b2[i]
    for k in range(hdim):
        z = b1[k]
        for i in range(d):
            z += w1[k, i] * x[i]
        if act == TANH:
            z = math.tanh(z)
        else:
            z = 1.0 / (1.0 + math.exp(-z))
        for i in range(v.shape[0]):
            v[i] += w2[i, k] * z


@njit(cache=True)
def _poly(x, v, prm):
    exps, coefs = prm
    m, d = exps.shape
    for i in range(v.shape[0]):
        v[i] = 0.0
    for ell in range(m):
        phi = 1.0
        for i in range(d):
            for _ in range(exps[ell, i]):
                phi *= x[i]
        for i in range(v.shape[0]):
            v[i] += coefs[i, ell] * phi


@njit(cache=True)
def _pc(x, v, prm):
    table, lower, h, counts, strides = prm
    j = 0
    for i in range(x.shape[0]):
        k = int(math.floor((x[i] - lower[i]) / h[i] + 1e-12))
        k = min(max(k, 0), counts[i] - 1)
        j += k * strides[i]
    for i in range(v.shape[0]):
        v[i] = table[i, j]


@njit(cache=True)
def _inside(xp, lo, hi):
    for i in range(xp.shape[0]):
        if not (lo[i] <= xp[i] < hi[i]):
            return False
    return True


@njit(cache=True)
def _advance(xp, v, dt, sigma, sq, nz):
    ok = True
    for i in range(xp.shape[0]):
        xp[i] += v[i] * dt + sigma * sq * nz[i]
        if not math.isfinite(xp[i]):
            ok = False
    return ok


# One loop per drift family: closures over a shared factory do not cache.

@njit(cache=True)
def em_builtin(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, kind, prm):
    npath, d = x.shape
    sq = math.sqrt(dt)
    v = np.zeros(d)
    excursions = 0
    for s in range(noise.shape[0]):
        for p in range(npath):
            if _inside(x[p], lo, hi):
                _builtin(x[p], v, (kind, prm))
            else:
                excursions += 1
                v[:] = 0.0
            if not _advance(x[p], v, dt, sigma, sq, noise[s, p]):
                return rec_pos, step0 + s, excursions
        if (step0 + s + 1) % rec_every == 0:
            out[rec_pos] = x
            rec_pos += 1
    return rec_pos, -1, excursions


@njit(cache=True)
def em_mlp(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, w1, b1, w2, b2, act):
    npath, d = x.shape
    sq = math.sqrt(dt)
    v = np.zeros(d)
    excursions = 0
    for s in range(noise.shape[0]):
        for p in range(npath):
            if _inside(x[p], lo, hi):
                _mlp(x[p], v, (w1, b1, w2, b2, act))
            else:
                excursions += 1
                v[:] = 0.0
            if not _advance(x[p], v, dt, sigma, sq, noise[s, p]):
                return rec_pos, step0 + s, excursions
        if (step0 + s + 1) % rec_every == 0:
            out[rec_pos] = x
            rec_pos += 1
    return rec_pos, -1, excursions


@njit(cache=True)
def em_poly(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, exps, coefs):
    npath, d = x.shape
    sq = math.sqrt(dt)
    v = np.zeros(d)
    excursions = 0
    for s in range(noise.shape[0]):
        for p in range(npath):
            if _inside(x[p], lo, hi):
                _poly(x[p], v, (exps, coefs))
            else:
                excursions += 1
                v[:] = 0.0
            if not _advance(x[p], v, dt, sigma, sq, noise[s, p]):
                return rec_pos, step0 + s, excursions
        if (step0 + s + 1) % rec_every == 0:
            out[rec_pos] = x
            rec_pos += 1
    return rec_pos, -1, excursions


@njit(cache=True)
def em_pc(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, table, lower, h, counts, strides):
    npath, d = x.shape
    sq = math.sqrt(dt)
    v = np.zeros(d)
    excursions = 0
    for s in range(noise.shape[0]):
        for p in range(npath):
            if _inside(x[p], lo, hi):
                _pc(x[p], v, (table, lower, h, counts, strides))
            else:
                excursions += 1
                v[:] = 0.0
            if not _advance(x[p], v, dt, sigma, sq, noise[s, p]):
                return rec_pos, step0 + s, excursions
        if (step0 + s + 1) % rec_every == 0:
            out[rec_pos] = x
            rec_pos += 1
    return rec_pos, -1, excursions
