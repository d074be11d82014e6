"""Independent reference implementations used only by the tests.

Each oracle is written from the defining formula with explicit loops and
shares no code with the package.
"""

from __future__ import annotations

import cmath
import math

import numpy as np


def info_nce_oracle(v, t, tau, margin):
    """Literal pair enumeration of the symmetric hard-negative InfoNCE.

    Returns ``(loss, n_positive_pairings, n_negative_pairings)``.
    """
    v = np.asarray(v, dtype=float)
    t = np.asarray(t, dtype=float)
    B = len(v)
    sim = [[sum(v[i][d] * t[j][d] for d in range(v.shape[1])) for j in range(B)] for i in range(B)]
    n_pos = n_neg = 0

    def direction(s):
        nonlocal n_pos, n_neg
        total = 0.0
        for i in range(B):
            negs = [s[i][j] for j in range(B) if j != i]
            hardest = max(negs) if negs else None
            logits = []
            for j in range(B):
                if j == i:
                    n_pos += 1
                    logits.append(s[i][j])
                else:
                    n_neg += 1
                    penalty = margin if s[i][j] < hardest - margin else 0.0
                    logits.append(s[i][j] - penalty)
            denom = sum(math.exp(l / tau) for l in logits)
            total += -(logits[i] / tau - math.log(denom))
        return total / B

    i2t = direction(sim)
    t2i = direction([[sim[j][i] for j in range(B)] for i in range(B)])
    return (i2t + t2i) / 2, n_pos, n_neg


def _cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def local_oracle(V, T):
    V = np.asarray(V, dtype=float).tolist()
    T = np.asarray(T, dtype=float).tolist()
    S = [[_cos(a, b) for b in T] for a in V]
    row = sum(max(r) for r in S) / len(V)
    col = sum(max(S[i][j] for i in range(len(V))) for j in range(len(T))) / len(T)
    return -(row + col) / 2


def cwt_oracle(x, n_scales, bandwidth=1.5, center=1.0):
    """Direct correlation with scaled complex Morlet kernels, zero padded, one output per shift."""
    x = np.asarray(x, dtype=float)
    L = len(x)
    n = np.arange(L)
    out = np.zeros((n_scales, L))
    for s in range(1, n_scales + 1):
        for b in range(L):
            u = (n - b) / s
            psi = np.exp(-(u**2) / bandwidth) * np.exp(2j * np.pi * center * u) / math.sqrt(math.pi * bandwidth)
            out[s - 1, b] = abs(np.sum(x * np.conj(psi / s)))
    return out


def cwt_oracle_fast(x, n_scales, bandwidth=1.5, center=1.0):
    """Same sums as :func:`cwt_oracle`, one Toeplitz matrix-vector product per scale."""
    x = np.asarray(x, dtype=float)
    L = len(x)
    lag = np.arange(L)[None, :] - np.arange(L)[:, None]  # [b, n] -> n - b
    out = np.zeros((n_scales, L))
    for s in range(1, n_scales + 1):
        u = lag / s
        psi = np.exp(-(u**2) / bandwidth) * np.exp(2j * np.pi * center * u) / math.sqrt(math.pi * bandwidth) / s
        out[s - 1] = np.abs(np.conj(psi) @ x)
    return out


def oracle_peak_scale(mags, center=1.0):
    """Largest mid-window mean response among scales whose pseudo-frequency is below Nyquist (s > 2c)."""
    L = mags.shape[1]
    best, best_s = -1.0, None
    for s in range(1, mags.shape[0] + 1):
        if s <= 2 * center:
            continue
        m = float(np.mean(mags[s - 1, L // 4 : L - L // 4]))
        if m > best:
            best, best_s = m, s
    return best_s


def lora_oracle(x, W0, A, B, r, alpha):
    x = np.asarray(x, dtype=float)
    d, k = np.shape(W0)
    out = []
    for i in range(d):
        base = sum(W0[i][j] * x[j] for j in range(k))
        low = sum(B[i][q] * sum(A[q][j] * x[j] for j in range(k)) for q in range(r))
        out.append(base + alpha / r * low)
    return np.array(out)


def gate_oracle(v, t, W, b):
    """``z = sigmoid([v; t] W + b)``; ``h = z v + (1 - z) t``, coordinate by coordinate."""
    cat = list(v) + list(t)
    h = []
    for d in range(len(v)):
        a = sum(cat[i] * W[i][d] for i in range(len(cat))) + b[d]
        z = 1 / (1 + math.exp(-a))
        h.append(z * v[d] + (1 - z) * t[d])
    return np.array(h)


def adamw_oracle(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar AdamW trajectory written out step by step."""
    m = v = 0.0
    traj = []
    for step, g in enumerate(grads, start=1):
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(w)
    return traj


def window_count(length, size, step):
    return (length - size) // step + 1 if length >= size else 0


def metrics_oracle(y_true, y_pred):
    """Macro precision/F1 via scikit-learn (zero_division=0) and plain accuracy."""
    from sklearn.metrics import accuracy_score, f1_score, precision_score

    return (accuracy_score(y_true, y_pred), precision_score(y_true, y_pred, average="macro", zero_division=0),
            f1_score(y_true, y_pred, average="macro", zero_division=0))


def crc32_oracle(data: bytes) -> int:
    """Bitwise reflected CRC-32 (polynomial 0xEDB88320)."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def softmax(xs):
    m = max(xs)
    e = [cmath.exp(x - m).real for x in xs]
    s = sum(e)
    return [x / s for x in e]


def ce_head_grad_oracle(W, b, h, y):
    """Closed-form ``d CE / d(W, b) = (p - onehot) [h; 1]``, flattened as W then b."""
    logits = [sum(W[c][d] * h[d] for d in range(len(h))) + b[c] for c in range(len(b))]
    p = softmax(logits)
    p[y] -= 1
    gW = [p[c] * h[d] for c in range(len(b)) for d in range(len(h))]
    return np.array(gW + p)
