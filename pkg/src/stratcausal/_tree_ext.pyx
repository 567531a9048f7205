# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled tree-growing kernels.

Mirrors ``_tree_py`` operation for operation; the two backends must produce
identical trees for identical inputs.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t
from libcpp.algorithm cimport sort as std_sort
from libcpp.vector cimport vector

cnp.import_array()

cdef enum:
    CRIT_VARIANCE = 0
    CRIT_CAUSAL_RATIO = 1
    CRIT_CAUSAL_GRADIENT = 2


cdef inline uint64_t _splitmix64(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef struct Split:
    int64_t feature
    int64_t pos          # last sorted position going left
    double crit
    double threshold


cdef void _grow(const int64_t[:, ::1] ranks, const double[:, ::1] X,
                const double[::1] a, const double[::1] b,
                int64_t[::1] work, int64_t[::1] keys, int64_t[::1] tmp,
                int64_t m, int64_t p, int64_t mtry, int64_t min_node,
                int64_t max_depth, int criterion, uint64_t seed,
                vector[int64_t]& feature, vector[double]& threshold,
                vector[int64_t]& left, vector[int64_t]& right,
                vector[int64_t]& n_node, vector[double]& gain) noexcept nogil:
    cdef uint64_t state = seed
    cdef vector[int64_t] st_node, st_start, st_end, st_depth
    cdef vector[int64_t] perm
    cdef vector[int64_t] chosen
    cdef int64_t node, start, end, depth, size, j, k, r, f, idx, jj, nl_i, nr_i
    cdef int64_t n_left, n_right, lo_rank, hi_rank, t
    cdef double tot_a, tot_b, sa, sb, nl, nr, crit, parent, tl, tr, tp, ra, rb
    cdef double x_lo, x_hi, thr
    cdef int64_t low_mask = 4294967295
    cdef Split best
    perm.resize(p)
    chosen.resize(mtry)

    feature.push_back(-1); threshold.push_back(0.0)
    left.push_back(-1); right.push_back(-1)
    n_node.push_back(m); gain.push_back(0.0)
    st_node.push_back(0); st_start.push_back(0); st_end.push_back(m)
    st_depth.push_back(0)

    while st_node.size() > 0:
        node = st_node.back(); st_node.pop_back()
        start = st_start.back(); st_start.pop_back()
        end = st_end.back(); st_end.pop_back()
        depth = st_depth.back(); st_depth.pop_back()
        size = end - start
        if size < 2 * min_node or (max_depth >= 0 and depth >= max_depth):
            continue

        # node totals in sample order
        tot_a = 0.0
        tot_b = 0.0
        for j in range(start, end):
            tot_a = tot_a + a[work[j]]
            tot_b = tot_b + b[work[j]]
        if criterion == CRIT_VARIANCE:
            parent = tot_a * tot_a / <double>size
        else:
            if not tot_b > 0.0:
                continue
            parent = 0.0
        tp = tot_a / tot_b if tot_b > 0.0 else 0.0

        # partial Fisher-Yates draw of mtry features, then ascending order
        for j in range(p):
            perm[j] = j
        for j in range(mtry):
            r = j + <int64_t>(_splitmix64(&state) % <uint64_t>(p - j))
            t = perm[j]; perm[j] = perm[r]; perm[r] = t
            chosen[j] = perm[j]
        std_sort(chosen.begin(), chosen.end())

        best.feature = -1
        best.crit = parent
        best.pos = -1
        best.threshold = 0.0
        for jj in range(mtry):
            f = chosen[jj]
            for j in range(start, end):
                idx = work[j]
                keys[j - start] = (ranks[idx, f] << 32) | idx
            std_sort(&keys[0], &keys[0] + size)
            sa = 0.0
            sb = 0.0
            for k in range(size - 1):
                idx = keys[k] & low_mask
                sa = sa + a[idx]
                sb = sb + b[idx]
                nl_i = k + 1
                nr_i = size - nl_i
                if nl_i < min_node or nr_i < min_node:
                    continue
                lo_rank = keys[k] >> 32
                hi_rank = keys[k + 1] >> 32
                if lo_rank == hi_rank:
                    continue
                nl = <double>nl_i
                nr = <double>nr_i
                ra = tot_a - sa
                if criterion == CRIT_VARIANCE:
                    crit = sa * sa / nl + ra * ra / nr
                else:
                    rb = tot_b - sb
                    if not (sb > 0.0 and rb > 0.0):
                        continue
                    if criterion == CRIT_CAUSAL_RATIO:
                        tl = sa / sb
                        tr = ra / rb
                        crit = nl * ((tl - tp) * (tl - tp)) + nr * ((tr - tp) * (tr - tp))
                    else:
                        tl = sa - tp * sb
                        tr = ra - tp * rb
                        crit = tl * tl / nl + tr * tr / nr
                if crit > best.crit:
                    best.crit = crit
                    best.feature = f
                    best.pos = k
                    x_lo = X[keys[k] & low_mask, f]
                    x_hi = X[keys[k + 1] & low_mask, f]
                    thr = (x_lo + x_hi) / 2.0
                    if thr >= x_hi:
                        thr = x_lo
                    best.threshold = thr

        if best.feature < 0:
            continue

        # stable partition by x <= threshold
        f = best.feature
        n_left = 0
        n_right = 0
        for j in range(start, end):
            idx = work[j]
            if X[idx, f] <= best.threshold:
                work[start + n_left] = idx
                n_left += 1
            else:
                tmp[n_right] = idx
                n_right += 1
        for j in range(n_right):
            work[start + n_left + j] = tmp[j]

        feature[node] = f
        threshold[node] = best.threshold
        gain[node] = best.crit - parent
        left[node] = <int64_t>feature.size()
        right[node] = left[node] + 1
        for j in range(2):
            feature.push_back(-1); threshold.push_back(0.0)
            left.push_back(-1); right.push_back(-1); gain.push_back(0.0)
        n_node.push_back(n_left)
        n_node.push_back(n_right)
        st_node.push_back(right[node]); st_start.push_back(start + n_left)
        st_end.push_back(end); st_depth.push_back(depth + 1)
        st_node.push_back(left[node]); st_start.push_back(start)
        st_end.push_back(start + n_left); st_depth.push_back(depth + 1)


def grow_tree(const int64_t[:, ::1] ranks, const double[:, ::1] X,
              const double[::1] a, const double[::1] b,
              const int64_t[::1] samples, int64_t mtry, int64_t min_node,
              int64_t max_depth, int criterion, uint64_t seed):
    cdef int64_t m = samples.shape[0]
    cdef int64_t p = X.shape[1]
    cdef vector[int64_t] feature, left, right, n_node
    cdef vector[double] threshold, gain
    work = np.array(samples, dtype=np.int64, copy=True)
    keys = np.empty(max(m, 1), dtype=np.int64)
    tmp = np.empty(max(m, 1), dtype=np.int64)
    cdef int64_t[::1] work_v = work
    cdef int64_t[::1] keys_v = keys
    cdef int64_t[::1] tmp_v = tmp
    with nogil:
        _grow(ranks, X, a, b, work_v, keys_v, tmp_v, m, p, mtry, min_node,
              max_depth, criterion, seed, feature, threshold, left, right,
              n_node, gain)
    return (np.asarray(<int64_t[:feature.size()]>feature.data()).copy(),
            np.asarray(<double[:threshold.size()]>threshold.data()).copy(),
            np.asarray(<int64_t[:left.size()]>left.data()).copy(),
            np.asarray(<int64_t[:right.size()]>right.data()).copy(),
            np.asarray(<int64_t[:n_node.size()]>n_node.data()).copy(),
            np.asarray(<double[:gain.size()]>gain.data()).copy())


def apply_tree(const int64_t[::1] feature, const double[::1] threshold,
               const int64_t[::1] left, const int64_t[::1] right,
               const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out_v = out
    cdef Py_ssize_t i
    cdef int64_t node
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out_v[i] = node
    return out
