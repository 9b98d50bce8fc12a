"""Brute-force reference evaluators. Deliberately slow and loop-based; they
share no code with the package under test."""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[co])
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                r = i * stride + ki - padding
                                c = j * stride + kj - padding
                                if 0 <= r < h and 0 <= c < wd:
                                    acc += float(x[bi, ci, r, c]) * float(w[co, ci, ki, kj])
                    out[bi, co, i, j] = acc
    return out


def deconv2d_loops(x, w, b, stride, padding, output_padding):
    """Transposed convolution as the adjoint of ``conv2d_loops``: every input
    element scatters ``x * kernel`` into an uncropped canvas."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    full = np.zeros((n, cout, ho + 2 * padding, wo + 2 * padding))
    for bi in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    for co in range(cout):
                        for ki in range(k):
                            for kj in range(k):
                                full[bi, co, i * stride + ki, j * stride + kj] += (
                                    float(x[bi, ci, i, j]) * float(w[ci, co, ki, kj]))
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    return out + np.asarray(b, dtype=np.float64)[None, :, None, None]


def matmul_loops(a, b):
    n, f = a.shape
    _, o = b.shape
    out = np.zeros((n, o))
    for i in range(n):
        for j in range(o):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(f))
    return out


def cubic_kernel(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_pixel_sum(src, out_h, out_w):
    """Literal per-output-pixel kernel sum with clamp-replicated edges and a
    support stretched by the scale factor when shrinking."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))

    def taps(dst, in_n, out_n):
        sc = in_n / out_n
        stretch = max(sc, 1.0)
        centre = (dst + 0.5) * sc - 0.5
        lo = math.floor(centre - 2 * stretch)
        hi = math.ceil(centre + 2 * stretch)
        ws = []
        for s in range(lo, hi + 1):
            wgt = cubic_kernel((s - centre) / stretch)
            if wgt != 0.0:
                ws.append((min(max(s, 0), in_n - 1), wgt))
        total = sum(wgt for _, wgt in ws)
        return [(s, wgt / total) for s, wgt in ws]

    for y in range(out_h):
        ty = taps(y, in_h, out_h)
        for x in range(out_w):
            tx = taps(x, in_w, out_w)
            acc = 0.0
            for sy, wy in ty:
                for sx, wx in tx:
                    acc += wy * wx * float(src[sy, sx])
            out[y, x] = min(max(acc, 0.0), 1.0)
    return out


def sample_std_error(values):
    n = len(values)
    if n == 1:
        return 0.0
    mean = 0.0
    for v in values:
        mean += v
    mean /= n
    ss = 0.0
    for v in values:
        ss += (v - mean) ** 2
    return math.sqrt(ss / (n - 1)) / math.sqrt(n)


def walk_parameter_count(layers):
    """Count weights+biases and PReLU slopes from a textual layer listing of
    ("conv"|"deconv", k, out, in) and ("prelu", channels) tuples."""
    weights = 0
    slopes = 0
    for layer in layers:
        if layer[0] in ("conv", "deconv"):
            _, k, out, inp = layer
            weights += k * k * out * inp + out
        elif layer[0] == "linear":
            _, fin, fout = layer
            weights += fin * fout + fout
        elif layer[0] == "prelu":
            slopes += layer[1]
    return weights, slopes
