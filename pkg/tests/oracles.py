"""Independent reference implementations used as test oracles.

Everything here is written the dumb, obvious way (explicit loops, exhaustive
enumeration, rasterized areas) so a disagreement with the library points at
the library. None of these functions import from xmcat.
"""

from fractions import Fraction

import numpy as np


# Mini-network seeds screened so every relu pre-activation and maxpool window
# gap sits > 3e-3 from its kink: central differences with h=1e-3 are only a
# valid derivative estimate when the loss is smooth across [x-h, x+h].
GRADCHECK_SEEDS = (
    4, 13, 44, 53, 69, 91, 110, 118, 163, 190,
    226, 315, 327, 363, 384, 391, 433, 447, 458, 550,
)


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation over NCHW input."""
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    batch, in_ch, h, w_in = x.shape
    out_ch, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w_in + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, out_ch, oh, ow), dtype=x.dtype)
    for n in range(batch):
        for o in range(out_ch):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for ci in range(in_ch):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                    out[n, o, i, j] = acc
    return out


def numeric_gradient(f, x, h=1e-3):
    """Central finite differences of a scalar function of the array x.

    Perturbs x in place (restoring each entry) so f may close over the very
    buffer a model holds; f's argument is ignored.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(np.zeros(x.shape), flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * h)
        it.iternext()
    return grad


def max_relative_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale).max())


def enumerate_3cluster_tables(max_count=3):
    """Every (count_cluster, count_joint) pair over 3 clusters with counts in
    [0, max_count] and joint <= cluster count."""
    tables = []
    options = []
    for n in range(max_count + 1):
        options += [(n, j) for j in range(n + 1)]
    for a in options:
        for b in options:
            for c in options:
                cluster = (a[0], b[0], c[0])
                joint = (a[1], b[1], c[1])
                tables.append((cluster, joint))
    return tables


def brute_posterior(cluster_counts, joint_counts):
    """Exact P(c|w) from raw counts: normalized per-cluster ratios."""
    ratios = [
        Fraction(j, n) if n else Fraction(0)
        for n, j in zip(cluster_counts, joint_counts)
    ]
    total = sum(ratios)
    if total == 0:
        return ratios
    return [r / total for r in ratios]


def brute_assign(cluster_counts, joint_counts, threshold_fraction):
    """(cluster | None, max posterior) under argmax with smallest-index ties."""
    posterior = brute_posterior(cluster_counts, joint_counts)
    best = max(posterior)
    cluster = posterior.index(best)
    if best >= threshold_fraction:
        return cluster, best
    return None, best


def brute_fscore(gold, clustering):
    """Size-weighted best-F clustering score, computed the long way."""
    classes = {}
    for w, cls in gold.items():
        classes.setdefault(cls, set()).add(w)
    clusters = {}
    for w in gold:
        clusters.setdefault(clustering[w], set()).add(w)
    total = sum(len(ws) for ws in classes.values())
    score = 0.0
    for ws in classes.values():
        best = 0.0
        for members in clusters.values():
            tp = len(ws & members)
            if tp == 0:
                continue
            p = tp / len(members)
            r = tp / len(ws)
            best = max(best, 2 * p * r / (p + r))
        score += len(ws) / total * best
    return score


def brute_mas(clustering, association, words):
    strengths = []
    for w1 in words:
        for w2 in words:
            if w1 == w2:
                continue
            if clustering[w1] == clustering[w2] and (w1, w2) in association:
                strengths.append(association[(w1, w2)])
    if not strengths:
        return None
    return sum(strengths) / len(strengths)


def brute_pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return float(np.corrcoef(xs, ys)[0, 1])


def raster_iou(a, b, grid=64):
    """IoU by filling boolean pixel masks, no area arithmetic."""
    ma = np.zeros((grid, grid), dtype=bool)
    mb = np.zeros((grid, grid), dtype=bool)
    ma[a[1] : a[3], a[0] : a[2]] = True
    mb[b[1] : b[3], b[0] : b[2]] = True
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else 0.0


def brute_multilabel(predictions, golds):
    """Micro P/R/F from per-image predicted and gold class sets."""
    tp = fp = fn = 0
    for pred, gold in zip(predictions, golds):
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def brute_match(predicted, gold, threshold=0.5, grid=64):
    """Greedy IoU matching with single use, rasterized IoU values."""
    pairs = []
    for pi, p in enumerate(predicted):
        for gi, g in enumerate(gold):
            v = raster_iou(p, g, grid)
            if v > threshold:
                pairs.append((-v, pi, gi))
    pairs.sort()
    used_p, used_g = set(), set()
    tp = 0
    for _v, pi, gi in pairs:
        if pi not in used_p and gi not in used_g:
            used_p.add(pi)
            used_g.add(gi)
            tp += 1
    return tp, len(predicted) - tp, len(gold) - tp
