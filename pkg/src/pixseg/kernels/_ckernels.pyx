# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Signatures and tie rules mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def segment_sums(ids, values, Py_ssize_t n_segments):
    cdef cnp.int64_t[::1] ids_v = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    cdef Py_ssize_t n = ids_v.shape[0]
    cdef double[:, ::1] val_v = np.ascontiguousarray(values, dtype=np.float64).reshape(n, -1)
    cdef Py_ssize_t d = val_v.shape[1]
    sums = np.zeros((n_segments, d), dtype=np.float64)
    counts = np.zeros(n_segments, dtype=np.int64)
    cdef double[:, ::1] s_v = sums
    cdef cnp.int64_t[::1] c_v = counts
    cdef Py_ssize_t i, j
    cdef cnp.int64_t s
    with nogil:
        for i in range(n):
            s = ids_v[i]
            c_v[s] += 1
            for j in range(d):
                s_v[s, j] += val_v[i, j]
    return sums, counts


def crosstab(a, b, Py_ssize_t n_a, Py_ssize_t n_b):
    cdef cnp.int64_t[::1] a_v = np.ascontiguousarray(a, dtype=np.int64).ravel()
    cdef cnp.int64_t[::1] b_v = np.ascontiguousarray(b, dtype=np.int64).ravel()
    out = np.zeros((n_a, n_b), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o_v = out
    cdef Py_ssize_t i, n = a_v.shape[0]
    with nogil:
        for i in range(n):
            o_v[a_v[i], b_v[i]] += 1
    return out


def cosine_assign(x, centroids):
    # the similarity product goes through BLAS; a hand-written triple loop is
    # several times slower than GEMM, so only the argmax scan is compiled
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef double[:, ::1] s_v = np.ascontiguousarray(x @ centroids.T)
    cdef Py_ssize_t n = s_v.shape[0], k = s_v.shape[1]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] l_v = labels
    cdef double[::1] b_v = best
    cdef Py_ssize_t i, j
    cdef double top
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n):
            top = s_v[i, 0] if k > 0 else 0.0
            arg = 0
            for j in range(1, k):
                if s_v[i, j] > top:
                    top = s_v[i, j]
                    arg = j
            l_v[i] = arg
            b_v[i] = top
    return labels, best


def window_propagate(query, ref_emb, ref_lab, Py_ssize_t radius, Py_ssize_t top_r,
                     Py_ssize_t n_labels):
    cdef double[:, :, ::1] q_v = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, :, :, ::1] e_v = np.ascontiguousarray(ref_emb, dtype=np.float64)
    cdef cnp.int64_t[:, :, ::1] lab_v = np.ascontiguousarray(ref_lab, dtype=np.int64)
    cdef Py_ssize_t n_ref = e_v.shape[0], h = e_v.shape[1], w = e_v.shape[2], d = e_v.shape[3]
    out = np.empty((h, w), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o_v = out
    top_s_arr = np.empty(max(top_r, 1), dtype=np.float64)
    top_l_arr = np.empty(max(top_r, 1), dtype=np.int64)
    votes_arr = np.empty(max(n_labels, 1), dtype=np.int64)
    cdef double[::1] top_s = top_s_arr
    cdef cnp.int64_t[::1] top_l = top_l_arr
    cdef cnp.int64_t[::1] votes = votes_arr
    cdef Py_ssize_t i, j, r, a, b, t, filled, pos, y, x
    cdef double acc
    cdef cnp.int64_t arg, most
    with nogil:
        for i in range(h):
            for j in range(w):
                filled = 0
                for r in range(n_ref):
                    for a in range(-radius, radius + 1):
                        y = i + a
                        if y < 0 or y >= h:
                            continue
                        for b in range(-radius, radius + 1):
                            x = j + b
                            if x < 0 or x >= w:
                                continue
                            acc = 0.0
                            for t in range(d):
                                acc = acc + q_v[i, j, t] * e_v[r, y, x, t]
                            # insertion keeps earlier candidates ahead on ties
                            if filled < top_r:
                                pos = filled
                                filled += 1
                            elif acc > top_s[top_r - 1]:
                                pos = top_r - 1
                            else:
                                continue
                            while pos > 0 and acc > top_s[pos - 1]:
                                top_s[pos] = top_s[pos - 1]
                                top_l[pos] = top_l[pos - 1]
                                pos -= 1
                            top_s[pos] = acc
                            top_l[pos] = lab_v[r, y, x]
                for t in range(n_labels):
                    votes[t] = 0
                for t in range(filled):
                    votes[top_l[t]] += 1
                arg = 0
                most = -1
                for t in range(n_labels):
                    if votes[t] > most:
                        most = votes[t]
                        arg = t
                o_v[i, j] = arg
    return out


def kmeanspp_seed(x, Py_ssize_t k, Py_ssize_t first, uniforms):
    cdef double[:, ::1] x_v = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] u_v = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = x_v.shape[0], d = x_v.shape[1]
    chosen = np.empty(k, dtype=np.int64)
    best_arr = np.empty(n, dtype=np.float64)
    dist_arr = np.empty(n, dtype=np.float64)
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] ch = chosen
    cdef double[::1] best = best_arr
    cdef double[::1] dist = dist_arr
    cdef unsigned char[::1] taken = taken_arr
    cdef Py_ssize_t i, j, t, idx, n_free, pick, last_pos
    cdef double acc, total, target, sdot, gap
    with nogil:
        ch[0] = first
        taken[first] = 1
        for i in range(n):
            acc = 0.0
            for t in range(d):
                acc = acc + x_v[i, t] * x_v[first, t]
            best[i] = acc
        for j in range(1, k):
            total = 0.0
            last_pos = -1
            for i in range(n):
                gap = 1.0 - best[i]
                if gap < 0.0 or taken[i]:
                    gap = 0.0
                dist[i] = gap * gap
                total = total + dist[i]
                if dist[i] > 0.0:
                    last_pos = i
            if total <= 0.0:
                n_free = 0
                for i in range(n):
                    if not taken[i]:
                        n_free += 1
                pick = <Py_ssize_t>(u_v[j - 1] * n_free)
                if pick > n_free - 1:
                    pick = n_free - 1
                idx = -1
                for i in range(n):
                    if not taken[i]:
                        if pick == 0:
                            idx = i
                            break
                        pick -= 1
            else:
                target = u_v[j - 1] * total
                acc = 0.0
                idx = -1
                for i in range(n):
                    acc = acc + dist[i]
                    if acc > target:
                        idx = i
                        break
                if idx < 0:
                    idx = last_pos
            ch[j] = idx
            taken[idx] = 1
            for i in range(n):
                sdot = 0.0
                for t in range(d):
                    sdot = sdot + x_v[i, t] * x_v[idx, t]
                if sdot > best[i]:
                    best[i] = sdot
    return chosen
