"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``_numba``.
"""
import numpy as np

NAME = "numpy"

VDP, LORENZ63, ARCTAN_LORENZ = 0, 1, 2
TANH, SIGMOID = 0, 1


def bin_counts(points, lower, h, counts, strides):
    k = np.floor((points - lower) / h + 1e-12).astype(np.int64)
    ok = np.all((k >= 0) & (k < counts), axis=1)
    flat = k[ok] @ strides
    size = int(np.prod(counts))
    return np.bincount(flat, minlength=size).astype(np.float64), int(ok.sum())


def assemble_coo(p, q, u, dh, c, n):
    """Upwind + central-diffusion entries of the one-step Markov matrix.

    Face ``f`` joins cell ``p[f]`` (below) and ``q[f]`` (above) with normal
    velocity ``u[f]``.  Returns ``(diag, rows, cols, vals)`` where ``diag``
    already includes the identity.
    """
    up = c * (np.maximum(u, 0.0) + dh)
    down = c * (-np.minimum(u, 0.0) + dh)
    diag = 1.0 - np.bincount(p, weights=up, minlength=n) - np.bincount(q, weights=down, minlength=n)
    rows = np.concatenate((q, p))
    cols = np.concatenate((p, q))
    vals = np.concatenate((up, down))
    return diag, rows, cols, vals


def logconv(a, logk):
    """``out[j, r] = log sum_k exp(a[k, r] + logk[j, k])``."""
    m = logk.shape[0]
    out = np.empty((m, a.shape[1]))
    step = max(1, 2_000_000 // max(1, a.shape[0] * a.shape[1]))
    for s in range(0, m, step):
        t = logk[s:s + step, :, None] + a[None, :, :]
        mx = t.max(axis=1)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        out[s:s + step] = safe + np.log(np.exp(t - safe[:, None, :]).sum(axis=1))
    return out


# -- drift fields, vectorised over rows of x ----------------------------------

def builtin_drift(kind, prm, x):
    v = np.empty_like(x)
    if kind == VDP:
        c = prm[0]
        v[:, 0] = x[:, 1]
        v[:, 1] = c * (1.0 - x[:, 0] ** 2) * x[:, 1] - x[:, 0]
    else:
        c1, c2, c3 = prm[0], prm[1], prm[2]
        v[:, 0] = c1 * (x[:, 1] - x[:, 0])
        v[:, 1] = x[:, 0] * (c2 - x[:, 2]) - x[:, 1]
        v[:, 2] = x[:, 0] * x[:, 1] - c3 * x[:, 2]
        if kind == ARCTAN_LORENZ:
            v = 50.0 * np.arctan(v / 50.0)
    return v


def mlp_drift(x, w1, b1, w2, b2, act):
    z = x @ w1.T + b1
    hdn = np.tanh(z) if act == TANH else 1.0 / (1.0 + np.exp(-z))
    return hdn @ w2.T + b2


def poly_drift(x, exps, coefs):
    phi = np.prod(x[:, None, :] ** exps[None, :, :], axis=2)
    return phi @ coefs.T


def pc_drift(x, table, lower, h, counts, strides):
    k = np.floor((x - lower) / h + 1e-12).astype(np.int64)
    k = np.clip(k, 0, counts - 1)
    j = k @ strides
    return table[:, j].T


def _em(drift, x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi):
    sq = np.sqrt(dt)
    excursions = 0
    for s in range(noise.shape[0]):
        inside = np.all((x >= lo) & (x < hi), axis=1)
        excursions += int((~inside).sum())
        v = np.zeros_like(x)
        if inside.any():
            v[inside] = drift(x[inside])
        x += v * dt + sigma * sq * noise[s]
        if not np.all(np.isfinite(x)):
            return rec_pos, step0 + s, excursions
        if (step0 + s + 1) % rec_every == 0:
            out[rec_pos] = x
            rec_pos += 1
    return rec_pos, -1, excursions


def em_builtin(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, kind, prm):
    return _em(lambda y: builtin_drift(kind, prm, y), x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi)


def em_mlp(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, w1, b1, w2, b2, act):
    return _em(lambda y: mlp_drift(y, w1, b1, w2, b2, act), x, noise, dt, sigma, rec_every, step0, out, rec_pos,
               lo, hi)


def em_poly(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, exps, coefs):
    return _em(lambda y: poly_drift(y, exps, coefs), x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi)


def em_pc(x, noise, dt, sigma, rec_every, step0, out, rec_pos, lo, hi, table, lower, h, counts, strides):
    return _em(lambda y: pc_drift(y, table, lower, h, counts, strides), x, noise, dt, sigma, rec_every, step0,
               out, rec_pos, lo, hi)
