"""Slow reference implementations, used only by tests and ``codaf check``.

Everything here runs on float64 numpy arrays with explicit loops so the code
can be read against the formulas line by line.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv(x, w, b=None, padding=None):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    assert Ci == C
    if padding is None:
        padding = (k - 1) // 2
    Ho = H + 2 * padding - k + 1
    Wo = W + 2 * padding - k + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                yy = i + u - padding
                                xx = j + v - padding
                                if 0 <= yy < H and 0 <= xx < W:
                                    acc += w[o, c, u, v] * x[n, c, yy, xx]
                    out[n, o, i, j] = acc
    return out


def _bilinear_point(plane, y, x):
    H, W = plane.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    total = 0.0
    for yy, xx, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        if 0 <= yy < H and 0 <= xx < W:
            total += wgt * plane[yy, xx]
    return total


def naive_deformable_sample(x, w, b, base, residual, modulation):
    """Direct evaluation of the modulated deformable sum at every pixel."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    modulation = np.asarray(modulation, dtype=np.float64)
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    r = (k - 1) // 2
    out = np.zeros((B, Co, H, W))
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for o in range(Co):
                    acc = 0.0 if b is None else float(b[o])
                    kk = 0
                    for u in range(-r, r + 1):
                        for v in range(-r, r + 1):
                            sy = i + base[n, 0, i, j] + u + residual[n, 2 * kk, i, j]
                            sx = j + base[n, 1, i, j] + v + residual[n, 2 * kk + 1, i, j]
                            m = modulation[n, kk, i, j]
                            for c in range(C):
                                val = _bilinear_point(x[n, c], sy, sx)
                                acc += w[o, c, u + r, v + r] * val * m
                            kk += 1
                    out[n, o, i, j] = acc
    return out


def naive_ssim(x, y, window=7, c1=None, c2=None):
    """Mean SSIM over valid uniform windows, channels and batch.

    The window shrinks to ``min(window, H, W)`` for small maps. When ``c1``/``c2``
    are omitted they follow the dynamic-range rule used by the loss.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    B, C, H, W = x.shape
    win = min(window, H, W)
    if c1 is None or c2 is None:
        L = max(x.max() - x.min(), y.max() - y.min(), 1e-3)
        c1 = (0.01 * L) ** 2
        c2 = (0.03 * L) ** 2
    vals = []
    for n in range(B):
        for c in range(C):
            for i in range(H - win + 1):
                for j in range(W - win + 1):
                    px = [x[n, c, i + u, j + v] for u in range(win) for v in range(win)]
                    py = [y[n, c, i + u, j + v] for u in range(win) for v in range(win)]
                    cnt = len(px)
                    mx = sum(px) / cnt
                    my = sum(py) / cnt
                    vx = sum(a * a for a in px) / cnt - mx * mx
                    vy = sum(a * a for a in py) / cnt - my * my
                    cov = sum(a * b for a, b in zip(px, py)) / cnt - mx * my
                    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                    vals.append(s)
    return sum(vals) / len(vals)


def naive_info_nce(v, ir, tau):
    v = np.asarray(v, dtype=np.float64)
    ir = np.asarray(ir, dtype=np.float64)
    N = v.shape[0]
    total = 0.0
    for i in range(N):
        pos = math.exp(sum(v[i, d] * ir[i, d] for d in range(v.shape[1])) / tau)
        denom = 0.0
        for j in range(N):
            denom += math.exp(sum(v[i, d] * ir[j, d] for d in range(v.shape[1])) / tau)
        total += math.log(pos / denom)
    return -total / N


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def naive_ap(dets, gts, iou=0.5):
    """All-points AP for one class.

    ``dets``: list of ``(image_id, score, box)``; ``gts``: list of
    ``(image_id, box)``. For every prefix of the score-ranked detections the
    matching is recomputed from scratch, giving one precision/recall point per
    rank; the precision envelope is then integrated over recall.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    ranked = [dets[i] for i in order]
    points = []
    for r in range(1, len(ranked) + 1):
        used = [False] * n_gt
        tp = 0
        for img, _, box in ranked[:r]:
            best, best_g = -1.0, -1
            for g, (gimg, gbox) in enumerate(gts):
                if gimg != img or used[g]:
                    continue
                o = _iou(box, gbox)
                if o >= iou and o > best:
                    best, best_g = o, g
            if best_g >= 0:
                used[best_g] = True
                tp += 1
        points.append((tp / n_gt, tp / r))
    ap = 0.0
    prev_recall = 0.0
    for idx, (rec, _) in enumerate(points):
        if rec > prev_recall:
            envelope = max(p for _, p in points[idx:])
            ap += (rec - prev_recall) * envelope
            prev_recall = rec
    return ap
