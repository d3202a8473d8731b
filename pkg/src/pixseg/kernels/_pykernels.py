"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and the same tie-breaking rules (lowest index wins).
"""

import numpy as np


def segment_sums(ids, values, n_segments):
    """Sum rows of ``values`` grouped by ``ids``.

    Returns ``(sums, counts)`` with shapes ``(n_segments, d)`` and ``(n_segments,)``.
    """
    ids = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    values = np.ascontiguousarray(values, dtype=np.float64).reshape(ids.shape[0], -1)
    sums = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    np.add.at(sums, ids, values)
    counts = np.bincount(ids, minlength=n_segments).astype(np.int64)
    return sums, counts


def crosstab(a, b, n_a, n_b):
    """Joint histogram of two integer label arrays, shape ``(n_a, n_b)``."""
    a = np.ascontiguousarray(a, dtype=np.int64).ravel()
    b = np.ascontiguousarray(b, dtype=np.int64).ravel()
    flat = np.bincount(a * n_b + b, minlength=n_a * n_b)
    return flat.reshape(n_a, n_b).astype(np.int64)


def cosine_assign(x, centroids):
    """Index and value of the most similar centroid for every row of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    sims = x @ centroids.T
    labels = np.argmax(sims, axis=1).astype(np.int64)
    best = sims[np.arange(x.shape[0]), labels]
    return labels, best


def window_propagate(query, ref_emb, ref_lab, radius, top_r, n_labels):
    """Label each query pixel by a top-r vote over reference pixels in a window.

    ``query`` is ``(H, W, d)``; ``ref_emb`` is ``(R, H, W, d)`` and ``ref_lab``
    ``(R, H, W)``. Candidates are reference pixels within a square window of
    ``radius`` around the query location in every reference frame. The ``top_r``
    most similar candidates vote; ties in similarity keep the candidate seen
    first (frame-major, then row, then column) and ties in the vote go to the
    lowest label.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref_emb = np.ascontiguousarray(ref_emb, dtype=np.float64)
    ref_lab = np.ascontiguousarray(ref_lab, dtype=np.int64)
    n_ref, h, w, d = ref_emb.shape
    side = 2 * radius + 1
    pad = ((0, 0), (radius, radius), (radius, radius), (0, 0))
    emb_p = np.pad(ref_emb, pad)
    lab_p = np.pad(ref_lab, pad[:3], constant_values=-1)
    valid_p = np.pad(np.ones((n_ref, h, w), bool), pad[:3], constant_values=False)

    # (R, H, W, d, side, side) views over the padded references
    win_e = np.lib.stride_tricks.sliding_window_view(emb_p, (side, side), axis=(1, 2))
    win_l = np.lib.stride_tricks.sliding_window_view(lab_p, (side, side), axis=(1, 2))
    win_v = np.lib.stride_tricks.sliding_window_view(valid_p, (side, side), axis=(1, 2))

    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        # sims: (R, W, side, side)
        sims = np.einsum("wd,rwdab->rwab", query[i], win_e[:, i])
        sims = np.where(win_v[:, i], sims, -np.inf)
        labs = win_l[:, i]
        # candidate order frame-major, then window row, then window column
        sims = np.moveaxis(sims, 1, 0).reshape(w, -1)
        labs = np.moveaxis(labs, 1, 0).reshape(w, -1)
        k = min(top_r, sims.shape[1])
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        picked_s = np.take_along_axis(sims, order, axis=1)
        picked_l = np.take_along_axis(labs, order, axis=1)
        votes = np.zeros((w, n_labels), dtype=np.int64)
        ok = np.isfinite(picked_s)
        rows = np.repeat(np.arange(w)[:, None], k, axis=1)
        np.add.at(votes, (rows[ok], picked_l[ok]), 1)
        out[i] = np.argmax(votes, axis=1)
    return out


def kmeanspp_seed(x, k, first, uniforms):
    """k-means++ seeding on cosine distance ``(1 - cos)^2``.

    ``first`` is the index of the first centre and ``uniforms`` holds ``k - 1``
    draws in [0, 1) that pick the remaining centres by inverse-CDF lookup.
    When every remaining point coincides with a centre, the draw selects
    uniformly among points not yet taken.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    taken = np.zeros(n, dtype=bool)
    taken[first] = True
    best = x @ x[first]
    for j in range(1, k):
        dist = np.clip(1.0 - best, 0.0, None) ** 2
        dist[taken] = 0.0
        cum = np.cumsum(dist)
        total = cum[-1]
        if total <= 0:
            free = np.flatnonzero(~taken)
            idx = int(free[min(int(uniforms[j - 1] * len(free)), len(free) - 1)])
        else:
            idx = int(np.searchsorted(cum, uniforms[j - 1] * total, side="right"))
            if idx >= n:  # target rounded up to the total
                idx = int(np.flatnonzero(dist > 0)[-1])
        chosen[j] = idx
        taken[idx] = True
        best = np.maximum(best, x @ x[idx])
    return chosen
