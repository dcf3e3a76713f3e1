"""Pure numpy tree descent, used when the compiled kernel is unavailable.

Processes all points one tree level at a time, so the work stays vectorized.
Mirrors ``_assoc_core.descend`` exactly, including lowest-index tie-breaking.
"""

import numpy as np


def descend(pts, means, white, log_norm, complexity, first_child, n_children,
            root_count, max_level, lambda_c, log_floor):
    n = len(pts)
    k_total = len(means)
    # child slots per node (and a virtual root row at the end), -1 padded
    table = np.full((k_total + 1, 8), -1, dtype=np.int64)
    slot = np.arange(8)
    has = n_children > 0
    rows = np.flatnonzero(has)
    fill = slot[None, :] < n_children[rows, None]
    table[rows] = np.where(fill, first_child[rows, None] + slot[None, :], -1)
    table[k_total, :root_count] = np.arange(root_count)

    node = np.full(n, -1, dtype=np.int64)
    mass = np.ones(n)
    evals = np.zeros(n, dtype=np.int64)
    current = np.full(n, k_total, dtype=np.int64)
    active = np.arange(n)
    for level in range(max_level):
        if len(active) == 0:
            break
        ch = table[current[active]]  # (M, 8)
        valid = ch >= 0
        safe = np.where(valid, ch, 0)
        d = pts[active, None, :] - means[safe]  # (M, 8, 3)
        y = np.einsum("mkij,mkj->mki", white[safe], d)
        scores = log_norm[safe] - 0.5 * (y * y).sum(axis=2)
        scores = np.where(valid, scores, -np.inf)
        evals[active] += valid.sum(axis=1)
        arg = scores.argmax(axis=1)
        smax = scores[np.arange(len(active)), arg]
        best = safe[np.arange(len(active)), arg]
        if level == 0:
            ok = smax >= log_floor
            mass[active[~ok]] = 0.0
            active, best, smax, scores = active[ok], best[ok], smax[ok], scores[ok]
        with np.errstate(under="ignore"):
            total = np.exp(scores - smax[:, None]).sum(axis=1)
        mass[active] *= 1.0 / total
        node[active] = best
        stop = (level + 1 >= max_level) | (n_children[best] == 0) | (complexity[best] <= lambda_c)
        current[active] = best
        active = active[~stop]
    return node, mass, evals
