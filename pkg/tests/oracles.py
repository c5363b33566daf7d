"""Loop-level transcriptions used as independent references in tests.

Nothing here touches the autograd kernel; every formula is spelled out with
plain Python loops over numpy scalars.
"""

import math

import numpy as np


def matmul(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(A[i, q] * B[q, j] for q in range(k))
    return out


def two_layer(X, W1, b1, W2, b2):
    hidden = matmul(X, W1) + b1
    hidden = np.where(hidden > 0, hidden, 0.0)
    return matmul(hidden, W2) + b2


def spatial_mix(H, G, W1, b1, W2, b2):
    N, D = H.shape
    g = G.shape[1]
    H_g = np.zeros((g, D))
    for j in range(g):
        for n in range(N):
            H_g[j] += G[n, j] * H[n]
    H_g_hat = two_layer(H_g, W1, b1, W2, b2)
    H_hat = np.zeros((N, D))
    for n in range(N):
        for j in range(g):
            H_hat[n] += G[n, j] * H_g_hat[j]
    return H + H_hat


def channel_moe(H_s, gate_W, gate_b, experts, residual=True):
    N, D = H_s.shape
    logits = matmul(H_s, gate_W) + gate_b
    outs = [two_layer(H_s, *e) for e in experts]
    H_c = np.zeros((N, D))
    for n in range(N):
        m = max(logits[n])
        ex = [math.exp(v - m) for v in logits[n]]
        z = sum(ex)
        for k, O in enumerate(outs):
            H_c[n] += (ex[k] / z) * O[n]
    return H_s + H_c if residual else H_c


def adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam, one scalar at a time."""
    theta = [float(v) for v in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, 1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            m_hat = m[i] / (1 - b1 ** t)
            v_hat = v[i] / (1 - b2 ** t)
            theta[i] = theta[i] - lr * m_hat / (math.sqrt(v_hat) + eps)
    return np.array(theta)


def metrics(pred, target, threshold=1.0):
    """MAE, RMSE, MAPE (percent) over every entry of equally shaped arrays."""
    abs_sum = sq_sum = ape_sum = 0.0
    n = n_ape = 0
    for p, y in zip(np.ravel(pred).tolist(), np.ravel(target).tolist()):
        e = p - y
        abs_sum += abs(e)
        sq_sum += e * e
        n += 1
        if abs(y) > threshold:
            ape_sum += abs(e) / abs(y)
            n_ape += 1
    return abs_sum / n, math.sqrt(sq_sum / n), 100.0 * ape_sum / n_ape if n_ape else float("nan")
