"""Independent brute-force reference implementations shared by test modules.

These stay deliberately slow and obvious; they are the contract the fast
paths are checked against.
"""

import numpy as np


def conv2d_reference(x, k, stride=1, padding=0):
    """Direct six-loop cross-correlation."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out


def matmul_reference(a, w, bias):
    """Naive triple loop for linear(y = x W^T + b)."""
    n, d_in = a.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out), dtype=np.float64)
    for i in range(n):
        for j in range(d_out):
            s = 0.0
            for k in range(d_in):
                s += a[i, k] * w[j, k]
            out[i, j] = s + bias[j]
    return out


def ssim_reference(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=2.0):
    """Windowed SSIM by explicit per-pixel loops over valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape
    if h < window or w < window:
        # single global window
        return _ssim_window(a, b, np.ones(a.shape) / a.size, k1, k2, data_range)
    half = window // 2
    ax = np.arange(window) - half
    g1 = np.exp(-(ax**2) / (2 * sigma**2))
    kern = np.outer(g1, g1)
    kern /= kern.sum()
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            vals.append(_ssim_window(pa, pb, kern, k1, k2, data_range))
    return float(np.mean(vals))


def _ssim_window(pa, pb, kern, k1, k2, data_range):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = (kern * pa).sum()
    mu_b = (kern * pb).sum()
    var_a = (kern * pa * pa).sum() - mu_a**2
    var_b = (kern * pb * pb).sum() - mu_b**2
    cov = (kern * pa * pb).sum() - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den
