"""Plain-Python reference implementations used as independent test oracles.

Nothing here touches numpy linear algebra or the package's vectorized code.
"""

import math


def encode(w_enc, b_pre, b_enc, x):
    m, d = len(w_enc), len(b_pre)
    out = []
    for row in x:
        centered = [row[j] - b_pre[j] for j in range(d)]
        z = []
        for i in range(m):
            acc = b_enc[i]
            for j in range(d):
                acc += w_enc[i][j] * centered[j]
            z.append(acc if acc > 0 else 0.0)
        out.append(z)
    return out


def decode(w_dec, b_pre, z):
    d, m = len(w_dec), len(w_dec[0])
    out = []
    for code in z:
        row = []
        for j in range(d):
            acc = b_pre[j]
            for i in range(m):
                acc += w_dec[j][i] * code[i]
            row.append(acc)
        out.append(row)
    return out


def loss(w_enc, w_dec, b_pre, b_enc, x, l1):
    z = encode(w_enc, b_pre, b_enc, x)
    xh = decode(w_dec, b_pre, z)
    n = len(x)
    recon = sum(sum((a - b) ** 2 for a, b in zip(r, h)) for r, h in zip(x, xh)) / n
    sparsity = sum(sum(abs(v) for v in code) for code in z) / n
    return recon, sparsity, recon + l1 * sparsity


def adam(params, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam over a flat list of parameters and a sequence of gradient lists."""
    params = list(params)
    m = [0.0] * len(params)
    v = [0.0] * len(params)
    for t, grads in enumerate(grads_seq, start=1):
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            params[i] -= lr * mh / (math.sqrt(vh) + eps)
    return params


def l0_rate(z):
    n = len(z)
    return sum(sum(1 for v in row if v > 0) / len(row) for row in z) / n


def fve(x, xh):
    n, d = len(x), len(x[0])
    means = [sum(x[r][c] for r in range(n)) / n for c in range(d)]
    resid = total = 0.0
    for r in range(n):
        for c in range(d):
            resid += (x[r][c] - xh[r][c]) ** 2
            total += (x[r][c] - means[c]) ** 2
    return 1.0 - resid / total


def dead_fraction(z, threshold):
    m = len(z[0])
    dead = 0
    for c in range(m):
        if all(row[c] <= threshold for row in z):
            dead += 1
    return dead / m


def pearson(a, b):
    """Two-pass population Pearson; None when either side is constant."""
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    if all(v == a[0] for v in a) or all(v == b[0] for v in b):
        return None
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    va = sum((x - ma) ** 2 for x in a) / n
    vb = sum((y - mb) ** 2 for y in b) / n
    return cov / (math.sqrt(va) * math.sqrt(vb))


def entropy_bits(p):
    return -sum(v * math.log2(v) for v in p if v > 0)


def recovery(dictionary, w_dec):
    """Mean over dictionary columns of the best |cosine| against w_dec columns."""
    d, t, m = len(dictionary), len(dictionary[0]), len(w_dec[0])
    norms = [math.sqrt(sum(w_dec[r][c] ** 2 for r in range(d))) for c in range(m)]
    total = 0.0
    for f in range(t):
        best = 0.0
        for c in range(m):
            dot = sum(dictionary[r][f] * w_dec[r][c] for r in range(d))
            best = max(best, abs(dot) / norms[c])
        total += best
    return total / t
