"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over pixels, taps and
thresholds, sharing no code with the library, so an agreement is evidence
rather than a tautology.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# tensor operations

def conv2d_loop(x, k, b=None, stride=1, replicate=False):
    """Same-size padded cross-correlation, seven nested loops."""
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    p = kh // 2
    oh = (h + stride - 1) // stride
    ow = (w + stride - 1) // stride
    out = np.zeros((n, co, oh, ow))

    def sample(bi, c, r, s):
        if replicate:
            r = min(max(r, 0), h - 1)
            s = min(max(s, 0), w - 1)
        elif not (0 <= r < h and 0 <= s < w):
            return 0.0
        return x[bi, c, r, s]

    for bi in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += k[o, c, u, v] * sample(bi, c, i * stride + u - p, j * stride + v - p)
                    out[bi, o, i, j] = acc
    return out


def conv_transpose_loop(x, k, b=None, stride=2):
    n, ci, h, w = x.shape
    _, co, kh, kw = k.shape
    out = np.zeros((n, co, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for bi in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(w):
                    for o in range(co):
                        for u in range(kh):
                            for v in range(kw):
                                out[bi, o, i * stride + u, j * stride + v] += x[bi, c, i, j] * k[c, o, u, v]
    if b is not None:
        for o in range(co):
            out[:, o] += b[o]
    return out


def bmm_loop(a, b):
    n, r, kk = a.shape
    c = b.shape[2]
    out = np.zeros((n, r, c))
    for bi in range(n):
        for i in range(r):
            for j in range(c):
                out[bi, i, j] = sum(a[bi, i, t] * b[bi, t, j] for t in range(kk))
    return out


def fc_loop(x, wt, b):
    n = x.shape[0]
    co, ci = wt.shape
    out = np.zeros((n, co, 1, 1))
    for bi in range(n):
        for o in range(co):
            out[bi, o, 0, 0] = b[o] + sum(wt[o, c] * x[bi, c, 0, 0] for c in range(ci))
    return out


def channel_max_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, 1, h, w))
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                out[bi, 0, i, j] = max(x[bi, ch, i, j] for ch in range(c))
    return out


def gap_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for bi in range(n):
        for ch in range(c):
            out[bi, ch, 0, 0] = math.fsum(x[bi, ch].ravel().tolist()) / (h * w)
    return out


def _source_coord(i, n_in, n_out):
    s = (i + 0.5) * n_in / n_out - 0.5
    return min(max(s, 0.0), n_in - 1.0)


def bilinear_loop(x, oh, ow):
    """Half-pixel-centre bilinear resampling, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        sy = _source_coord(i, h, oh)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = _source_coord(j, w, ow)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = ((1 - fy) * ((1 - fx) * x[:, :, y0, x0] + fx * x[:, :, y0, x1])
                               + fy * ((1 - fx) * x[:, :, y1, x0] + fx * x[:, :, y1, x1]))
    return out


SOBEL_X = ((1, 0, -1), (2, 0, -2), (1, 0, -1))
SOBEL_Y = ((1, 2, 1), (0, 0, 0), (-1, -2, -1))


def sobel_loop(x):
    """Depthwise 3x3 Sobel magnitude with clamped (replicated) borders."""
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for bi in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    gx = gy = 0.0
                    for u in range(3):
                        for v in range(3):
                            r = min(max(i + u - 1, 0), h - 1)
                            s = min(max(j + v - 1, 0), w - 1)
                            gx += SOBEL_X[u][v] * x[bi, ch, r, s]
                            gy += SOBEL_Y[u][v] * x[bi, ch, r, s]
                    out[bi, ch, i, j] = math.hypot(gx, gy)
    return out


def batchnorm_two_pass(x, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        vals = x[:, ch].ravel().tolist()
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        out[:, ch] = gamma[ch] * (x[:, ch] - mean) / math.sqrt(var + eps) + beta[ch]
    return out


def bce_loop(p, t, eps=1e-7):
    terms = []
    for pi, ti in zip(np.ravel(p).tolist(), np.ravel(t).tolist()):
        q = min(max(pi, eps), 1 - eps)
        terms.append(-(ti * math.log(q) + (1 - ti) * math.log(1 - q)))
    return math.fsum(terms) / len(terms)


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


# ---------------------------------------------------------------------------
# saliency metrics, straight from the definitions

def _mean(vals):
    return math.fsum(vals) / len(vals)


def _sample_std(vals):
    if len(vals) < 2:
        return 0.0
    m = _mean(vals)
    return math.sqrt(math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1))


def object_score(vals, lam=0.5):
    if not vals:
        return 0.0
    m = _mean(vals)
    return 2 * m / (m * m + 1 + 2 * lam * _sample_std(vals) + np.finfo(float).eps)


def ssim_block(xs, ys):
    n = len(xs)
    if n == 0:
        return 0.0
    mx, my = _mean(xs), _mean(ys)
    d = max(n - 1, 1)
    vx = math.fsum((a - mx) ** 2 for a in xs) / d
    vy = math.fsum((b - my) ** 2 for b in ys) / d
    cxy = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys)) / d
    num = 4 * mx * my * cxy
    den = (mx * mx + my * my) * (vx + vy)
    if num != 0:
        return num / den
    return 1.0 if den == 0 else 0.0


def _closest_boundaries(coords, n):
    """All boundaries 0..n at minimal distance from the exact centroid line."""
    line = Fraction(sum(coords), len(coords)) + Fraction(1, 2)
    dist = [abs(k - line) for k in range(n + 1)]
    return [k for k in range(n + 1) if dist[k] == min(dist)]


def s_measure_oracle(s, g, alpha=0.5):
    h, w = g.shape
    flat_s = s.ravel().tolist()
    flat_g = g.ravel().astype(bool).tolist()
    mu = sum(flat_g) / len(flat_g)
    if mu == 0:
        return 1 - _mean(flat_s)
    if mu == 1:
        return _mean(flat_s)
    fg = [v for v, m in zip(flat_s, flat_g) if m]
    bg = [1 - v for v, m in zip(flat_s, flat_g) if not m]
    so = mu * object_score(fg) + (1 - mu) * object_score(bg)
    rows = [i for i in range(h) for j in range(w) if g[i, j]]
    cols = [j for i in range(h) for j in range(w) if g[i, j]]
    scores = []
    for r in _closest_boundaries(rows, h):
        for c in _closest_boundaries(cols, w):
            sr = 0.0
            for r0, r1 in ((0, r), (r, h)):
                for c0, c1 in ((0, c), (c, w)):
                    xs = [s[i, j] for i in range(r0, r1) for j in range(c0, c1)]
                    ys = [float(g[i, j]) for i in range(r0, r1) for j in range(c0, c1)]
                    if xs:
                        sr += len(xs) / (h * w) * ssim_block(xs, ys)
            scores.append(sr)
    sr = _mean(scores)
    return min(max(alpha * so + (1 - alpha) * sr, 0.0), 1.0)


def threshold_counts(s, g, tau):
    tp = fp = fn = 0
    for v, m in zip(s.ravel().tolist(), g.ravel().astype(bool).tolist()):
        pos = v >= tau
        tp += pos and m
        fp += pos and not m
        fn += (not pos) and m
    return tp, fp, fn


def f_value(tp, fp, fn, beta2=0.3):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    den = beta2 * p + r
    return p, r, ((1 + beta2) * p * r / den if den else 0.0)


def e_value(fm, g, eps=1e-8):
    fm = [float(v) for v in fm.ravel().tolist()]
    gt = [float(v) for v in g.ravel().astype(bool).tolist()]
    n = len(gt)
    if sum(gt) == 0:
        return _mean([1 - v for v in fm])
    if sum(gt) == n:
        return _mean(fm)
    mf, mg = _mean(fm), _mean(gt)
    vals = []
    for a, b in zip(fm, gt):
        xf, xg = a - mf, b - mg
        phi = 2 * xg * xf / (xg * xg + xf * xf + eps)
        vals.append((phi + 1) ** 2 / 4)
    return _mean(vals)


def curves_oracle(s, g, beta2=0.3):
    """Rows (threshold, precision, recall, f, e) for t = 0..255."""
    rows = []
    for t in range(256):
        tau = t / 255
        p, r, f = f_value(*threshold_counts(s, g, tau), beta2)
        rows.append((tau, p, r, f, e_value(s >= tau, g)))
    return np.array(rows)


def metric_vector_oracle(s, g, alpha=0.5, beta2=0.3):
    """(mae, s_alpha, f_max, f_mean, f_adp, e_max, e_mean, e_adp)."""
    cur = curves_oracle(s, g, beta2)
    f, e = cur[1:, 3], cur[1:, 4]
    tau = min(2 * _mean(s.ravel().tolist()), 1.0)
    _, _, f_adp = f_value(*threshold_counts(s, g, tau), beta2)
    e_adp = e_value(s >= tau, g)
    m = _mean([abs(a - float(b)) for a, b in zip(s.ravel().tolist(), g.ravel().tolist())])
    return np.array([m, s_measure_oracle(s, g, alpha), max(f), _mean(f.tolist()), f_adp,
                     max(e), _mean(e.tolist()), e_adp])
