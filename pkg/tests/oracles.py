"""Independent reference implementations used as test oracles.

None of these import the code under test's algorithms; they re-derive each
quantity from its definition in the most direct (and slowest) way.
"""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


# -- gradients -----------------------------------------------------------------


def central_difference(f, tensors, h=1e-6, coords=None):
    """Numerical d f / d t for each tensor in ``tensors`` (in place perturbation).

    ``coords`` optionally restricts each tensor to a list of flat indices.
    Returns a list of (tensor_index, flat_index, numeric_derivative).
    """
    out = []
    for ti, t in enumerate(tensors):
        flat = t.data.view(-1)
        idx = range(flat.numel()) if coords is None else coords[ti]
        for j in idx:
            old = float(flat[j])
            flat[j] = old + h
            fp = float(f())
            flat[j] = old - h
            fm = float(f())
            flat[j] = old
            out.append((ti, j, (fp - fm) / (2 * h)))
    return out


def rel_err(a: float, n: float, floor: float = 1e-5) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


# -- DTW -----------------------------------------------------------------------

# rank of each step in the tie-break order: diagonal first, then down, then right
STEP_RANK = {(1, 1): 0, (1, 0): 1, (0, 1): 2}


@lru_cache(maxsize=None)
def monotonic_paths(U: int, V: int) -> tuple:
    """Every path (0,0)->(U-1,V-1) with steps (1,0),(0,1),(1,1), as cell tuples."""
    paths = []

    def walk(u, v, acc):
        if (u, v) == (U - 1, V - 1):
            paths.append(tuple(acc))
            return
        for du, dv in ((1, 1), (1, 0), (0, 1)):
            nu, nv = u + du, v + dv
            if nu < U and nv < V:
                acc.append((nu, nv))
                walk(nu, nv, acc)
                acc.pop()

    walk(0, 0, [(0, 0)])
    return tuple(paths)


def reversed_step_key(path) -> tuple:
    """Steps read from the end of the path backwards, ranked by tie-break preference."""
    steps = [(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:])]
    return tuple(STEP_RANK[s] for s in reversed(steps))


def ordered_paths(U, V):
    """All paths sorted so that the first max-sum path is the tie-break winner."""
    return sorted(monotonic_paths(U, V), key=reversed_step_key)


def brute_force_dtw(M):
    """Enumerate every path; return (path, mean, total) of the max-sum winner."""
    M = np.asarray(M, dtype=np.float64)
    best = None
    for p in ordered_paths(*M.shape):
        total = sum(M[c] for c in p)
        if best is None or total > best[2]:
            best = (list(p), total / len(p), total)
    return best


def path_index_arrays(U, V):
    """(paths, flat cell index matrix padded with -1, lengths) for vectorized scoring."""
    paths = ordered_paths(U, V)
    L = max(len(p) for p in paths)
    idx = np.full((len(paths), L), -1, dtype=np.int64)
    for k, p in enumerate(paths):
        idx[k, : len(p)] = [u * V + v for u, v in p]
    return paths, idx, np.array([len(p) for p in paths])


def dtw_disagreements(dtw, mats) -> int:
    """Number of matrices in ``mats`` (n, U, V) whose DP path or mean differs from enumeration."""
    U, V = mats.shape[1:]
    paths, idx, lengths = path_index_arrays(U, V)
    # padding index -1 reads an appended zero column
    flat = np.concatenate([mats.reshape(len(mats), -1), np.zeros((len(mats), 1))], axis=1)
    totals = flat[:, idx].sum(axis=2)
    win = totals.argmax(axis=1)  # first maximum is the tie-break winner
    means = totals[np.arange(len(mats)), win] / lengths[win]
    bad = 0
    for M, w, mean in zip(mats, win, means):
        r = dtw(M)
        if r.path != list(paths[w]) or abs(r.score - mean) > 1e-12:
            bad += 1
    return bad


def exhaustive_grid_check(dp_cells, U, V, values=(0.0, 0.5, 1.0), low_cells=11):
    """Compare a cell-wise batched DP against path enumeration on every matrix over ``values``.

    The first ``low_cells`` cells (row-major) vary along the batch axis and
    the rest are scalars fixed per batch, so all len(values)**(U*V) matrices
    are covered. For each matrix the reference is the first path, in
    tie-break order, among those with the largest sum. Path sums are split
    into a low part (precomputed per path over all low assignments) and a
    high part; paths sharing their high cells are reduced to their best low
    sum and the first path reaching it, which loses no path.

    Returns (matrices checked, disagreements).
    """
    paths = ordered_paths(U, V)
    n_cells = U * V
    low_cells = min(low_cells, n_cells)
    low = np.array(list(itertools.product(values, repeat=low_cells)), dtype=np.float64).T  # (low_cells, n)
    n_low = low.shape[1]
    codes = np.array([sum(1 << (u * V + v) for u, v in p) for p in paths], dtype=np.int64)

    groups: dict = {}
    for k, p in enumerate(paths):
        flat = [u * V + v for u, v in p]
        lsum = low[[c for c in flat if c < low_cells]].sum(axis=0) if any(c < low_cells for c in flat) \
            else np.zeros(n_low)
        key = tuple(c for c in flat if c >= low_cells)
        if key not in groups:
            groups[key] = [lsum, np.full(n_low, k)]
        else:
            g = groups[key]
            better = lsum > g[0]  # paths arrive in tie-break order, so only a strict gain replaces
            g[0] = np.where(better, lsum, g[0])
            g[1] = np.where(better, k, g[1])
    keys = list(groups)
    gmax = np.stack([groups[k][0] for k in keys])
    gfirst = np.stack([groups[k][1] for k in keys])
    high_n = n_cells - low_cells
    checked = bad = 0
    for high in itertools.product(values, repeat=high_n):
        hv = dict(zip(range(low_cells, n_cells), high))
        tot = gmax + np.array([sum(hv[c] for c in k) for k in keys])[:, None]
        best = tot.max(axis=0)
        winner = np.where(tot == best, gfirst, len(paths)).min(axis=0)
        totals, on = dp_cells(list(low) + list(high), U, V)
        dp_code = np.zeros(n_low, dtype=np.int64)
        for c, mask in enumerate(on):
            dp_code |= mask.astype(np.int64) << c
        bad += int(np.count_nonzero((dp_code != codes[winner]) | (totals != best)))
        checked += n_low
    return checked, bad


def grid_matrices(U, V, values=(0.0, 0.5, 1.0)):
    cells = U * V
    grid = np.array(list(itertools.product(values, repeat=cells)), dtype=np.float64)
    return grid.reshape(-1, U, V)


# -- schedules -----------------------------------------------------------------


def delayed_warmup_cosine(i, s, N, k, w, T, eta_max, r=0.1):
    """Direct transcription of the per-layer delayed warmup-cosine rule."""
    d = (N - 1 - i) * k
    D = T - d - w
    eta_min = r * eta_max
    u = s - d
    if u < 0:
        return 0.0
    if u < w:
        return eta_max * (u / w)
    if u <= w + D:
        return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * (u - w) / D))
    return eta_min


# -- optimizer -----------------------------------------------------------------


def adamw_scalar(w, g, m, v, t, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.1):
    """One AdamW step on a scalar; returns (w, m, v, t)."""
    t = t + 1
    w = w - lr * wd * w
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return w - lr * mhat / (math.sqrt(vhat) + eps), m, v, t


# -- edit distance -------------------------------------------------------------


def edit_distance(a, b) -> int:
    """Top-down memoized Levenshtein distance (unit costs)."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))
