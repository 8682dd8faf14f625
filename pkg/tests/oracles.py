"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops (or math-module
scalars) so that it shares no code path with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0, groups=1):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            g = oc // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ci in range(cg):
                        for a in range(kh):
                            for bb in range(kw):
                                r = y * sh + a - ph
                                s = xx * sw + bb - pw
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[i, g * cg + ci, r, s]) * float(w[oc, ci, a, bb])
                    out[i, oc, y, xx] = acc
    return out


def pool2d_loops(x, window, stride, mode, pad=0):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    vals = []
                    for a in range(window):
                        for b in range(window):
                            r = y * stride + a - pad
                            s = xx * stride + b - pad
                            if 0 <= r < h and 0 <= s < w:
                                vals.append(float(x[i, ch, r, s]))
                    out[i, ch, y, xx] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return out


def softmax_exact(row):
    top = max(row)
    e = [math.exp(v - top) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def gelu_exact(x: float) -> float:
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def attention_loops(x, wq, wk, wv, w0, heads, dwk=None, dwv=None, bias=None):
    """Per-head loop attention on one (d, H, W) map with 1x1 projections
    given as (d, d) matrices and biases folded to zero."""
    d, h, w = x.shape
    tokens = [[float(x[c, i, j]) for c in range(d)] for i in range(h) for j in range(w)]

    def project(mat, toks):
        return [[sum(mat[o][c] * t[c] for c in range(d)) for o in range(d)] for t in toks]

    q = project(wq, tokens)
    k_map = np.array(project(wk, tokens)).T.reshape(d, h, w)
    v_map = np.array(project(wv, tokens)).T.reshape(d, h, w)
    if dwk is not None:
        k_map = conv2d_loops(k_map[None], dwk, None, 2, 1, d)[0]
        v_map = conv2d_loops(v_map[None], dwv, None, 2, 1, d)[0]
    kd, kh, kw = k_map.shape
    k = [[float(k_map[c, i, j]) for c in range(d)] for i in range(kh) for j in range(kw)]
    v = [[float(v_map[c, i, j]) for c in range(d)] for i in range(kh) for j in range(kw)]
    dk = d // heads
    concat = [[0.0] * d for _ in range(len(q))]
    all_weights = []
    for hd in range(heads):
        sl = range(hd * dk, (hd + 1) * dk)
        rows = []
        for qi, qt in enumerate(q):
            logits = [sum(qt[c] * kt[c] for c in sl) / math.sqrt(dk) for kt in k]
            if bias is not None:
                logits = [lv + float(bias[hd, qi, j]) for j, lv in enumerate(logits)]
            a = softmax_exact(logits)
            rows.append(a)
            for c in sl:
                concat[qi][c] = sum(a[j] * v[j][c] for j in range(len(v)))
        all_weights.append(rows)
    out = project(w0, concat)
    return np.array(out).T.reshape(d, h, w), np.array(all_weights)


def confusion_tally(preds, labels, k=5):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(preds, labels):
        cm[int(t)][int(p)] += 1
    return np.array(cm)


def mann_whitney_auc(scores, positive):
    """P(score_pos > score_neg) + 0.5 P(tie), by exhaustive pair counting."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    u = 0.0
    for a in pos:
        for b in neg:
            u += 1.0 if a > b else 0.5 if a == b else 0.0
    return u / (len(pos) * len(neg))


def jacobi_eigh(a, sweeps=100, tol=1e-15):
    """Cyclic Jacobi eigensolver for a symmetric matrix; eigenvalues
    descending with matching column eigenvectors."""
    a = [list(map(float, row)) for row in a]
    n = len(a)
    v = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for _ in range(sweeps):
        off = math.fsum(a[i][j] ** 2 for i in range(n) for j in range(n) if i != j)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p][q]) < 1e-300:
                    continue
                theta = (a[q][q] - a[p][p]) / (2 * a[p][q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k][p], v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    vals = [a[i][i] for i in range(n)]
    order = sorted(range(n), key=lambda i: -vals[i])
    return np.array([vals[i] for i in order]), np.array([[v[r][i] for i in order] for r in range(n)])


def histogram_features(images, bins=16, lo=-1.0, hi=1.0):
    """Per-channel normalized histograms via ``np.histogram`` edges."""
    edges = np.linspace(lo, hi, bins + 1)
    feats = []
    for img in images:
        f = []
        for ch in img:
            counts, _ = np.histogram(np.clip(ch.ravel(), lo, hi), bins=edges)
            f.extend(counts / ch.size)
        feats.append(f)
    return np.array(feats)


def nearest_centroid_loops(train_x, train_y, test_x, test_y):
    classes = sorted(set(int(c) for c in train_y))
    cents = {c: np.mean([f for f, y in zip(train_x, train_y) if y == c], axis=0) for c in classes}
    hits = 0
    for f, y in zip(test_x, test_y):
        best = min(classes, key=lambda c: math.fsum((f - cents[c]) ** 2))
        hits += best == int(y)
    return hits / len(test_y)
