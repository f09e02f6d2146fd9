"""Slow, loop-based reference implementations used as independent oracles."""
import numpy as np

from tadkit.core import Interval, tiou


def _t(a, b):
    return tiou(Interval(*a), Interval(*b))


def nms_oracle(bounds, scores, thr):
    """Kept indices: repeatedly take the top remaining detection (score desc,
    start asc, index asc) and drop everything overlapping it by >= thr."""
    remaining = list(range(len(scores)))
    keep = []
    while remaining:
        top = min(remaining, key=lambda i: (-scores[i], bounds[i][0], i))
        keep.append(top)
        remaining = [i for i in remaining if i != top and _t(bounds[i], bounds[top]) < thr]
    return keep


def ab_assign_oracle(anchors, gts, classes, hi=0.6, lo=0.4, force_best=True):
    """Per-anchor label (class id, -1 negative, -2 ignored) and matched gt index."""
    n = len(anchors)
    labels, match = [-1] * n, [-1] * n
    for i in range(n):
        best, bj = -1.0, -1
        for j in range(len(gts)):
            v = _t(anchors[i], gts[j])
            if v > best:
                best, bj = v, j
        if bj < 0:
            continue
        if best >= hi:
            labels[i], match[i] = int(classes[bj]), bj
        elif best >= lo:
            labels[i] = -2
    if force_best:
        for j in range(len(gts)):
            best, bi = 0.0, -1
            for i in range(n):
                v = _t(anchors[i], gts[j])
                if v > best:
                    best, bi = v, i
            if bi >= 0:
                labels[bi], match[bi] = int(classes[j]), j
    return labels, match


def ap_oracle(dets, gts, thr):
    """AP for one class from first principles.

    ``dets``: list of (video, start, end, score); ``gts``: {video: [(s, e), ...]}.
    Ranks detections, marks each as TP if it can take an unmatched gt with
    tIoU >= thr (greedy, best remaining tIoU), then integrates the
    precision envelope over every recall step.
    """
    n_gt = sum(len(v) for v in gts.values())
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i][3], dets[i][1], i))
    used = {v: [False] * len(g) for v, g in gts.items()}
    flags = []
    for i in ranked:
        vid, s, e, _ = dets[i]
        best, bj = -1.0, -1
        for j, g in enumerate(gts.get(vid, [])):
            if used[vid][j]:
                continue
            v = _t((s, e), g)
            if v > best:
                best, bj = v, j
        if bj >= 0 and best >= thr:
            used[vid][bj] = True
            flags.append(1)
        else:
            flags.append(0)
    points = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / n_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            # precision envelope: best precision at this recall or beyond
            p = max(pp for rr, pp in points[k:])
            ap += (r - prev_r) * p
            prev_r = r
    return ap



# random instances on coarse grids, so exact ties occur ------------------------------------

def random_nms_instance(seed, n_max=10):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    s = rng.integers(0, 20, n).astype(float)
    b = np.stack([s, s + rng.integers(1, 10, n)], 1)
    scores = rng.integers(1, 6, n) / 5.0
    return b, scores


def random_ab_instance(seed, n_anchors=50, n_gts=5):
    rng = np.random.default_rng(seed)
    n_a = int(rng.integers(1, n_anchors + 1))
    n_g = int(rng.integers(0, n_gts + 1))
    a_s = rng.integers(0, 40, n_a).astype(float)
    anchors = np.stack([a_s, a_s + rng.integers(1, 12, n_a)], axis=1)
    g_s = rng.integers(0, 40, n_g).astype(float)
    gts = np.stack([g_s, g_s + rng.integers(1, 12, n_g)], axis=1).reshape(-1, 2)
    return anchors, gts, rng.integers(0, 4, n_g)


def random_ap_instance(seed, n_max=6):
    """(dets, gts) with up to ``n_max`` detections and gts spread over two videos."""
    rng = np.random.default_rng(seed)
    vids = ["a", "b"]
    n_g = int(rng.integers(1, n_max + 1))
    gts = {}
    for _ in range(n_g):
        v = vids[int(rng.integers(0, 2))]
        s = float(rng.integers(0, 20))
        gts.setdefault(v, []).append((s, s + float(rng.integers(1, 8))))
    dets = []
    for _ in range(int(rng.integers(0, n_max + 1))):
        v = vids[int(rng.integers(0, 2))]
        s = float(rng.integers(0, 20))
        dets.append((v, s, s + float(rng.integers(1, 8)), float(rng.integers(1, 5)) / 4))
    return dets, gts
