"""Slow, independent reference implementations used as test oracles.

Nothing here calls numpy.fft or the package; everything is direct summation
in float64 or plain Python floats.
"""
import cmath
import math

import numpy as np


def dft1(v):
    v = [complex(a) for a in v]
    n = len(v)
    return [sum(v[t] * cmath.exp(-2j * math.pi * k * t / n) for t in range(n)) for k in range(n)]


def dft2(x):
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    out = np.zeros((H, W), dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            acc = 0j
            for a in range(H):
                for b in range(W):
                    acc += x[a, b] * cmath.exp(-2j * math.pi * (u * a / H + v * b / W))
            out[u, v] = acc
    return out


def idft2(s):
    s = np.asarray(s, dtype=np.complex128)
    H, W = s.shape
    out = np.zeros((H, W), dtype=np.complex128)
    for a in range(H):
        for b in range(W):
            acc = 0j
            for u in range(H):
                for v in range(W):
                    acc += s[u, v] * cmath.exp(2j * math.pi * (u * a / H + v * b / W))
            out[a, b] = acc / (H * W)
    return out


def correlate2d(x, w, b, pad):
    """(N, C, H, W) * (O, C, k, k) cross-correlation by nested loops."""
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = float(b[o])
                    for c in range(C):
                        for p in range(k):
                            for q in range(k):
                                acc += xp[n, c, i + p, j + q] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


def centred_band(n, k):
    """Rows of a centred width-``k`` band of an ``n``-point axis."""
    start = n // 2 - k // 2
    return list(range(start, start + k))


def lpf_mask_unshifted(H, W, k):
    """Keep-mask of the low-pass filter, built from signed frequencies."""
    keep = np.zeros((H, W), dtype=bool)
    rows, cols = centred_band(H, k), centred_band(W, k)
    for u in range(H):
        for v in range(W):
            su = (u + H // 2) % H  # position after moving DC to the centre
            sv = (v + W // 2) % W
            keep[u, v] = su in rows and sv in cols
    return keep


def softmax_row(z):
    m = max(z)
    e = [math.exp(a - m) for a in z]
    s = sum(e)
    return [a / s for a in e]


def ce(logits, y):
    total = 0.0
    for z, t in zip(logits, y):
        p = softmax_row(list(z))
        total -= math.log(p[t])
    return total / len(y)


def kl_row(p_logits, q_logits):
    p, q = softmax_row(list(p_logits)), softmax_row(list(q_logits))
    return sum(a * (math.log(a) - math.log(b)) for a, b in zip(p, q))


def sar_l1(f1, f2):
    """Mean over rows of sum |Re dF| + sum |Im dF| using the direct DFT."""
    total = 0.0
    for r1, r2 in zip(f1, f2):
        d1, d2 = dft1(r1), dft1(r2)
        total += sum(abs(a.real - b.real) for a, b in zip(d1, d2))
        total += sum(abs(a.imag - b.imag) for a, b in zip(d1, d2))
    return total / len(f1)


def trades(nat, adv, y, lam):
    return ce(nat, y) + lam * sum(kl_row(a, b) for a, b in zip(nat, adv)) / len(y)


def mart(nat, adv, y, lam):
    total = 0.0
    for zn, za, t in zip(nat, adv, y):
        pa = softmax_row(list(za))
        pn = softmax_row(list(zn))
        other = max(p for c, p in enumerate(pa) if c != t)
        bce = -math.log(pa[t]) - math.log(1.0 - other)
        total += bce + lam * kl_row(zn, za) * (1.0 - pn[t])
    return total / len(y)
