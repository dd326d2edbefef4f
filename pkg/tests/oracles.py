"""Independent scalar reference implementations used as test oracles.

Everything here is plain Python over nested lists (mpmath where precision
matters) and shares no code with the package.
"""

import math

import mpmath as mp

mp.mp.dps = 40


def softmax_ce(logits, label):
    """-log softmax(logits)[label] at 40 digits; logits is a list over classes."""
    m = max(mp.mpf(v) for v in logits)
    lse = m + mp.log(sum(mp.e ** (mp.mpf(v) - m) for v in logits))
    return lse - mp.mpf(logits[label])


def sigmoid(x):
    return 1 / (1 + mp.e ** (-mp.mpf(x)))


def hl_objective(logits, D, labels, c, alpha, ignore_index=255):
    """Scalar L_s, L_h, L_f for one image.

    logits[k][i][j], D[i][j], labels[i][j].  Returns floats.
    """
    K = len(logits)
    h, w = len(labels), len(labels[0])
    cells = [(i, j) for i in range(h) for j in range(w) if labels[i][j] != ignore_index]
    L = {p: softmax_ce([logits[k][p[0]][p[1]] for k in range(K)], labels[p[0]][p[1]]) for p in cells}
    Z = {p: sigmoid(D[p[0]][p[1]]) + mp.mpf(c) for p in cells}
    total = sum(Z.values())
    H = {p: Z[p] / total for p in cells}
    L_s = sum(H[p] * L[p] for p in cells)
    L_h = -sum(H[p] * L[p] for p in cells)
    return float(L_s), float(L_h), float(L_s + mp.mpf(alpha) * L_h)


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Brute-force windowed SSIM on maps already in [0, 1]."""
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = k1 * k1, k2 * k2
    h, w = len(a), len(a[0])
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(size):
                for j in range(size):
                    wt = g[i] * g[j]
                    va, vb = a[y + i][x + j], b[y + i][x + j]
                    ma += wt * va
                    mb += wt * vb
                    saa += wt * va * va
                    sbb += wt * vb * vb
                    sab += wt * va * vb
            saa -= ma * ma
            sbb -= mb * mb
            sab -= ma * mb
            vals.append((2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2)))
    return sum(vals) / len(vals)
