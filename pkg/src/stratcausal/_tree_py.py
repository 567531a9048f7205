"""Pure-numpy tree-growing kernels.

Reproduces ``_tree_ext`` exactly: same node order, same random feature
draws, same floating-point operation order on the split scans. Used when the
compiled extension is unavailable and as a reference in the test suite.
"""
import numpy as np

CRIT_VARIANCE = 0
CRIT_CAUSAL_RATIO = 1
CRIT_CAUSAL_GRADIENT = 2

_MASK = (1 << 64) - 1


class _SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def _sequential_sum(v):
    # left-to-right accumulation, matching the compiled loop
    if v.size == 0:
        return 0.0
    return float(np.cumsum(v)[-1])


def grow_tree(ranks, X, a, b, samples, mtry, min_node, max_depth, criterion, seed):
    p = X.shape[1]
    m = samples.shape[0]
    rng = _SplitMix64(seed)
    work = np.array(samples, dtype=np.int64, copy=True)

    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    n_node = [m]
    gain = [0.0]
    stack = [(0, 0, m, 0)]

    while stack:
        node, start, end, depth = stack.pop()
        size = end - start
        if size < 2 * min_node or (max_depth >= 0 and depth >= max_depth):
            continue
        members = work[start:end]
        a_node = a[members]
        b_node = b[members]
        tot_a = _sequential_sum(a_node)
        tot_b = _sequential_sum(b_node)
        if criterion == CRIT_VARIANCE:
            parent = tot_a * tot_a / float(size)
        else:
            if not tot_b > 0.0:
                continue
            parent = 0.0
        tp = tot_a / tot_b if tot_b > 0.0 else 0.0

        perm = list(range(p))
        chosen = []
        for j in range(mtry):
            r = j + rng.next() % (p - j)
            perm[j], perm[r] = perm[r], perm[j]
            chosen.append(perm[j])
        chosen.sort()

        best_crit = parent
        best_feature = -1
        best_threshold = 0.0
        nl = np.arange(1, size, dtype=np.float64)
        nr = float(size) - nl
        size_ok = (nl >= min_node) & (nr >= min_node)
        for f in chosen:
            keys = (ranks[members, f] << 32) | members
            keys.sort()
            order = keys & 0xFFFFFFFF
            rk = keys >> 32
            sa = np.cumsum(a[order])[:-1]
            sb = np.cumsum(b[order])[:-1]
            valid = size_ok & (rk[:-1] != rk[1:])
            ra = tot_a - sa
            with np.errstate(divide="ignore", invalid="ignore"):
                if criterion == CRIT_VARIANCE:
                    crit = sa * sa / nl + ra * ra / nr
                else:
                    rb = tot_b - sb
                    valid &= (sb > 0.0) & (rb > 0.0)
                    if criterion == CRIT_CAUSAL_RATIO:
                        tl = sa / sb
                        tr = ra / rb
                        crit = nl * ((tl - tp) * (tl - tp)) + nr * ((tr - tp) * (tr - tp))
                    else:
                        tl = sa - tp * sb
                        tr = ra - tp * rb
                        crit = tl * tl / nl + tr * tr / nr
            if not valid.any():
                continue
            cand = np.flatnonzero(valid)
            vals = crit[cand]
            k = int(cand[int(np.argmax(vals))])
            if crit[k] > best_crit:
                best_crit = float(crit[k])
                best_feature = f
                x_lo = X[order[k], f]
                x_hi = X[order[k + 1], f]
                thr = (x_lo + x_hi) / 2.0
                if thr >= x_hi:
                    thr = x_lo
                best_threshold = float(thr)

        if best_feature < 0:
            continue

        goes_left = X[members, best_feature] <= best_threshold
        left_part = members[goes_left]
        right_part = members[~goes_left]
        n_left = left_part.size
        work[start:start + n_left] = left_part
        work[start + n_left:end] = right_part

        feature[node] = best_feature
        threshold[node] = best_threshold
        gain[node] = best_crit - parent
        left[node] = len(feature)
        right[node] = len(feature) + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            gain.append(0.0)
        n_node.append(n_left)
        n_node.append(size - n_left)
        stack.append((right[node], start + n_left, end, depth + 1))
        stack.append((left[node], start, start + n_left, depth + 1))

    return (np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(n_node, dtype=np.int64),
            np.asarray(gain, dtype=np.float64))


def apply_tree(feature, threshold, left, right, X):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        cur = node[active]
        f = feature[cur]
        go_left = X[active, f] <= threshold[cur]
        node[active] = np.where(go_left, left[cur], right[cur])
        active = active[feature[node[active]] >= 0]
    return node
