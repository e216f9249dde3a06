"""Independent reference implementations used only to check production code.

Everything here is deliberately written the slow, obvious way (explicit
loops, exhaustive enumeration, grid search) and shares no code with the
package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct-definition 3D convolution: loop over every output position."""
    c_out, c_in, kd, kh, kw = weight.shape
    xp = np.pad(x.astype(np.float64), ((0, 0),) + ((padding, padding),) * 3)
    od = (x.shape[1] + 2 * padding - kd) // stride + 1
    oh = (x.shape[2] + 2 * padding - kh) // stride + 1
    ow = (x.shape[3] + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    w64 = weight.astype(np.float64)
    for co in range(c_out):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    patch = xp[
                        :,
                        z * stride : z * stride + kd,
                        y * stride : y * stride + kh,
                        xx * stride : xx * stride + kw,
                    ]
                    out[co, z, y, xx] = np.sum(patch * w64[co]) + bias[co]
    return out


def naive_maxpool3d(x: np.ndarray, k: int = 3, stride: int = 2, padding: int = 1) -> np.ndarray:
    xp = np.pad(
        x.astype(np.float64), ((0, 0),) + ((padding, padding),) * 3, constant_values=-np.inf
    )
    od = (x.shape[1] + 2 * padding - k) // stride + 1
    oh = (x.shape[2] + 2 * padding - k) // stride + 1
    ow = (x.shape[3] + 2 * padding - k) // stride + 1
    out = np.zeros((x.shape[0], od, oh, ow), dtype=np.float64)
    for c in range(x.shape[0]):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    out[c, z, y, xx] = np.max(
                        xp[c, z * stride : z * stride + k, y * stride : y * stride + k,
                           xx * stride : xx * stride + k]
                    )
    return out


def flood_fill_components(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Stack-based flood fill labeling; labels ordered by first raster voxel."""
    if connectivity == 6:
        neigh = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        neigh = [
            (dz, dy, dx)
            for dz in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dz, dy, dx) != (0, 0, 0)
        ]
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_label = 0
    nz, ny, nx = mask.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x] or labels[z, y, x]:
                    continue
                next_label += 1
                stack = [(z, y, x)]
                labels[z, y, x] = next_label
                while stack:
                    cz, cy, cx = stack.pop()
                    for dz, dy, dx in neigh:
                        tz, ty, tx = cz + dz, cy + dy, cx + dx
                        if 0 <= tz < nz and 0 <= ty < ny and 0 <= tx < nx:
                            if mask[tz, ty, tx] and not labels[tz, ty, tx]:
                                labels[tz, ty, tx] = next_label
                                stack.append((tz, ty, tx))
    return labels


def auc_pairwise(scores, labels) -> float:
    """Double-loop concordance probability; ties count one half."""
    scores = list(map(float, scores))
    labels = list(labels)
    pos = [s for s, l in zip(scores, labels) if l > 0]
    neg = [s for s, l in zip(scores, labels) if l <= 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def wilcoxon_enumerate(a, b, alternative="greater"):
    """Exact signed-rank p by explicit iteration over sign tuples."""
    d = [float(x) - float(y) for x, y in zip(a, b)]
    d = [v for v in d if v != 0.0]
    n = len(d)
    absd = [abs(v) for v in d]
    order = sorted(range(n), key=lambda i: absd[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w = sum(r for r, v in zip(ranks, d) if v > 0)
    count_ge = 0
    count_le = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=n):
        ws = sum(r for r, s in zip(ranks, signs) if s)
        total += 1
        if ws >= w - 1e-9:
            count_ge += 1
        if ws <= w + 1e-9:
            count_le += 1
    if alternative == "greater":
        p = count_ge / total
    elif alternative == "less":
        p = count_le / total
    else:
        p = min(1.0, 2.0 * min(count_ge, count_le) / total)
    return w, p


def svm_dual_pg(x, y, costs, max_iter=300000, tol=1e-10):
    """Projected-gradient ascent on the dual of the augmented-bias SVM."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    q = (xa * y[:, None]) @ (xa * y[:, None]).T
    n = x.shape[0]
    alpha = np.zeros(n)
    lip = np.linalg.eigvalsh(q).max() + 1e-12
    step = 1.0 / lip
    for _ in range(max_iter):
        grad = 1.0 - q @ alpha
        proposed = np.clip(alpha + step * grad, 0.0, costs)
        pg = proposed - alpha
        if np.max(np.abs(pg)) < tol:
            break
        alpha = proposed
    w = (xa * y[:, None]).T @ alpha
    return w[:-1], float(w[-1]), alpha


def svm_primal_objective(x, y, costs, w, b):
    scores = np.asarray(x) @ w + b
    hinge = np.maximum(0.0, 1.0 - np.asarray(y) * scores)
    return 0.5 * (w @ w + b * b) + float(np.asarray(costs) @ hinge)


def platt_grid_fit(scores, y, span=8.0, steps=81, refinements=8):
    """Coarse-to-fine grid search for the score-to-probability sigmoid."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_pos = int(np.sum(y > 0))
    n_neg = int(y.size - n_pos)
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def loss(a, b):
        z = a * scores + b
        return float(np.sum(np.logaddexp(0.0, z) - (1.0 - t) * z))

    ca, cb = 0.0, 0.0
    width = span
    best = (loss(ca, cb), ca, cb)
    for _ in range(refinements):
        grid_a = np.linspace(ca - width, ca + width, steps)
        grid_b = np.linspace(cb - width, cb + width, steps)
        for a in grid_a:
            for b in grid_b:
                val = loss(a, b)
                if val < best[0]:
                    best = (val, a, b)
        _, ca, cb = best
        width /= 8.0
    return best[1], best[2]


def pca_eig(x):
    """PCA via eigendecomposition of the covariance matrix (sign-fixed)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    comps = vecs[:, order].T.copy()
    for row in comps:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    return mean, comps, np.maximum(vals, 0.0)


def normal_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))
