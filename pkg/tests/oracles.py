"""Independent reference implementations used as test oracles.

Nothing here imports the package's own embedding or loss code: every quantity
is rebuilt from explicit loops and dense inverses.
"""

import numpy as np


def gauss_gram(a, b, sigma):
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = np.exp(-np.sum((a[i] - b[j]) ** 2) / (2.0 * sigma**2))
    return out


def label_gram(ya, yb, c, sigma_y=1.0):
    """Gaussian label kernel on one-hot codes: 1 on equal labels, exp(-1/sigma^2) else."""
    off = np.exp(-1.0 / sigma_y**2)
    return np.where(np.asarray(ya)[:, None] == np.asarray(yb)[None, :], 1.0, off)


def cme_coefficients(ys, c, eps, queries, sigma_y=1.0):
    """Columns ``inv(eps n I + L) L_y`` via an explicit dense inverse."""
    n = len(ys)
    big_l = label_gram(ys, ys, c, sigma_y)
    inv = np.linalg.inv(eps * n * np.eye(n) + big_l)
    return inv @ label_gram(ys, queries, c, sigma_y)


def mcmd2_cross(zs, ys, zt, yt, yi, yj, sigma, eps, c, sigma_y=1.0):
    a = cme_coefficients(ys, c, eps, [yi], sigma_y)[:, 0]
    b = cme_coefficients(yt, c, eps, [yj], sigma_y)[:, 0]
    return (a @ gauss_gram(zs, zs, sigma) @ a + b @ gauss_gram(zt, zt, sigma) @ b
            - 2.0 * a @ gauss_gram(zs, zt, sigma) @ b)


def mcmd2_within(z, y, yi, yj, sigma, eps, c, sigma_y=1.0):
    """Quadratic form of ``L_yi - L_yj`` in ``inv(Lt) K inv(Lt)``."""
    n = len(y)
    big_l = label_gram(y, y, c, sigma_y)
    inv = np.linalg.inv(eps * n * np.eye(n) + big_l)
    m = inv @ gauss_gram(z, z, sigma) @ inv
    v = label_gram(y, [yi], c, sigma_y)[:, 0] - label_gram(y, [yj], c, sigma_y)[:, 0]
    return float(v @ m @ v)


def du_value(z, y, sigma, eps, c):
    present = sorted(set(int(v) for v in y))
    return sum(mcmd2_within(z, y, a, b, sigma, eps, c)
               for a in present for b in present if a != b)


def tu_value(zs, ys, zt, yt, p_t, sigma, eps, c):
    total = 0.0
    for k in range(c):
        if p_t[k] > 0 and k in set(ys.tolist()) and k in set(yt.tolist()):
            total += p_t[k] * mcmd2_cross(zs, ys, zt, yt, k, k, sigma, eps, c)
    return total


def weighted_ce(logits, ys, w):
    total = 0.0
    for row, y in zip(logits, ys):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += -w[y] * (row[y] - lse)
    return total / len(ys)


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
