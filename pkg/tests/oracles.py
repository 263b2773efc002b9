"""Slow, independent reference implementations used to pin the fast code.

Everything here is written as plainly as possible: explicit Python loops,
double precision throughout, no shared helpers with the package under test.
Tests freeze behavior by comparing package outputs against these.
"""

import math

import numpy as np


def sigmoid_ref(x):
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def distance_score_ref(d, w1, w2):
    return sigmoid_ref(w2 * max(0.0, w1 * float(d)))


def distance_ref(h, w, p, q):
    pr, pc = divmod(p, w)
    qr, qc = divmod(q, w)
    return math.hypot(pr - qr, pc - qc)


def chebyshev_ref(h, w, p, q):
    pr, pc = divmod(p, w)
    qr, qc = divmod(q, w)
    return max(abs(pr - qr), abs(pc - qc))


def similarity_ref(template, query):
    """Triple loop over (template position, query position, channel)."""
    c, mh, mw = template.shape
    _, qh, qw = query.shape
    t = np.asarray(template, dtype=np.float64).reshape(c, mh * mw)
    x = np.asarray(query, dtype=np.float64).reshape(c, qh * qw)
    out = np.zeros((mh * mw, qh * qw))
    for p in range(mh * mw):
        for q in range(qh * qw):
            acc = 0.0
            for k in range(c):
                acc += t[k, p] * x[k, q]
            out[p, q] = min(1.0, max(-1.0, acc))
    return out


def query_max_ref(sim, h, w):
    p_n, q_n = sim.shape
    out = np.zeros(q_n)
    for q in range(q_n):
        best = -math.inf
        for p in range(p_n):
            if sim[p, q] > best:
                best = sim[p, q]
        out[q] = best
    return out.reshape(h, w)


def local_match_ref(t_bg, t_fg, query, w1, w2):
    """Distance-scored fine matching per class, all loops explicit."""
    _, mh, mw = t_bg.shape
    _, qh, qw = query.shape
    maps = []
    for tpl in (t_bg, t_fg):
        sim = similarity_ref(tpl, query)
        for p in range(mh * mw):
            for q in range(qh * qw):
                sim[p, q] *= distance_score_ref(distance_ref(qh, qw, p, q), w1, w2)
        maps.append(query_max_ref(sim, qh, qw))
    return maps


def hard_window_ref(t_bg, t_fg, query, radius):
    _, mh, mw = t_bg.shape
    _, qh, qw = query.shape
    maps = []
    for tpl in (t_bg, t_fg):
        sim = similarity_ref(tpl, query)
        for p in range(mh * mw):
            for q in range(qh * qw):
                if chebyshev_ref(qh, qw, p, q) > radius:
                    sim[p, q] = -1.0
        maps.append(query_max_ref(sim, qh, qw))
    return maps


def coarse_match_ref(vec, query):
    c, qh, qw = query.shape
    x = np.asarray(query, dtype=np.float64).reshape(c, qh * qw)
    v = np.asarray(vec, dtype=np.float64)
    out = np.zeros(qh * qw)
    for q in range(qh * qw):
        acc = 0.0
        for k in range(c):
            acc += v[k] * x[k, q]
        out[q] = min(1.0, max(-1.0, acc))
    return out.reshape(qh, qw)


def normalize_columns_ref(grid):
    c, h, w = grid.shape
    out = np.array(grid, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            n = math.sqrt(sum(out[k, i, j] ** 2 for k in range(c)))
            for k in range(c):
                out[k, i, j] = 0.0 if n < 1e-12 else out[k, i, j] / n
    return out


def compress_ref(t_class):
    c = t_class.shape[0]
    v = np.zeros(c)
    for k in range(c):
        v[k] = float(np.sum(np.asarray(t_class[k], dtype=np.float64)))
    n = math.sqrt(float(np.dot(v, v)))
    return v * 0.0 if n < 1e-12 else v / n


def iou_ref(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return inter / union


def block_mean_ref(arr, stride):
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    oh = (h + stride - 1) // stride
    ow = (w + stride - 1) // stride
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for di in range(stride):
                for dj in range(stride):
                    si = min(i * stride + di, h - 1)
                    sj = min(j * stride + dj, w - 1)
                    acc += arr[si, sj]
            out[i, j] = acc / (stride * stride)
    return out


def cross_entropy_ref(pred_fg_frames, gt_frames):
    """Mean -log p_true over frames 1.. and all pixels, clamp [1e-7, 1-1e-7]."""
    total = 0.0
    count = 0
    for fg, gt in zip(pred_fg_frames[1:], gt_frames[1:]):
        fg = np.asarray(fg, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        for i in range(fg.shape[0]):
            for j in range(fg.shape[1]):
                p_true = gt[i, j] * fg[i, j] + (1.0 - gt[i, j]) * (1.0 - fg[i, j])
                p_true = min(1.0 - 1e-7, max(1e-7, p_true))
                total += -math.log(p_true)
                count += 1
    return total / count
