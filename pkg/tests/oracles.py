"""Straight-line reference implementations used as test oracles.

Deliberately slow and loop-based; they share no code with the package.
"""

import cmath
import colorsys
import itertools
import math
import statistics


def luma(img):
    h, w = len(img), len(img[0])
    return [[0.299 * img[i][j][0] + 0.587 * img[i][j][1] + 0.114 * img[i][j][2] for j in range(w)]
            for i in range(h)]


def dft2_power(plane):
    """|F(u, v)|^2 by the definition of the 2-D DFT (O(N^4))."""
    h, w = len(plane), len(plane[0])
    out = [[0.0] * w for _ in range(h)]
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += plane[m][n] * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
            out[u][v] = abs(acc) ** 2
    return out


def hf_ratio(img, cutoff_frac=0.5):
    y = luma(img)
    h, w = len(y), len(y[0])
    power = dft2_power(y)
    r_max = math.sqrt(0.5 ** 2 + 0.5 ** 2)
    total = high = 0.0
    for u in range(h):
        for v in range(w):
            if u == 0 and v == 0:
                continue
            total += power[u][v]
            r = math.sqrt((min(u, h - u) / h) ** 2 + (min(v, w - v) / w) ** 2)
            if r > cutoff_frac * r_max:
                high += power[u][v]
    return 0.0 if total == 0 else high / total


def entropy_std(img, win, bins):
    y = luma(img)
    h, w = len(y), len(y[0])
    entropies = []
    for ti in range(h // win):
        for tj in range(w // win):
            counts = {}
            for i in range(ti * win, (ti + 1) * win):
                for j in range(tj * win, (tj + 1) * win):
                    b = min(int(y[i][j] * bins), bins - 1)
                    counts[b] = counts.get(b, 0) + 1
            n = win * win
            entropies.append(-sum(c / n * math.log2(c / n) for c in counts.values()))
    return statistics.pstdev(entropies)


def inverse_3x3(m):
    """Inverse through the adjugate (cofactor) formula."""
    (a, b, c), (d, e, f), (g, h, i) = m
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    adj = [
        [e * i - f * h, c * h - b * i, b * f - c * e],
        [f * g - d * i, a * i - c * g, c * d - a * f],
        [d * h - e * g, b * g - a * h, a * e - b * d],
    ]
    return [[adj[r][k] / det for k in range(3)] for r in range(3)]


def mahalanobis(x, mu, cov, eps):
    reg = [[cov[r][k] + (eps if r == k else 0.0) for k in range(3)] for r in range(3)]
    inv = inverse_3x3(reg)
    d = [x[k] - mu[k] for k in range(3)]
    q = sum(d[r] * inv[r][k] * d[k] for r in range(3) for k in range(3))
    return math.sqrt(q)


def hsv_feature(img):
    """Per-pixel loop: circular mean hue / 360, mean s, mean v."""
    sin_sum = cos_sum = s_sum = v_sum = 0.0
    n = 0
    for row in img:
        for px in row:
            h, s, v = colorsys.rgb_to_hsv(*px)
            if s == 0:
                h = 0.0
            sin_sum += math.sin(2 * math.pi * h)
            cos_sum += math.cos(2 * math.pi * h)
            s_sum += s
            v_sum += v
            n += 1
    angle = math.degrees(math.atan2(sin_sum / n, cos_sum / n)) % 360.0
    return [angle / 360.0, s_sum / n, v_sum / n]


def central_differences(loss, params, h=1e-5):
    """Numerical gradient of ``loss()`` w.r.t. every entry of the arrays in ``params``."""
    grads = {}
    for name, p in params.items():
        g = p.copy()
        for idx in itertools.product(*(range(n) for n in p.shape)):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads
