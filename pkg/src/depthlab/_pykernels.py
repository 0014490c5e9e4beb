"""Pure-numpy fallback for the compiled pair-expectation kernel.

Same signature and results as ``depthlab._ckernels.pair_means``.
"""

import numpy as np

CHUNK_ELEMENTS = 4_000_000


def _cholesky2(hxx, hxy, hyy):
    swap = hxx < hyy
    big = np.where(swap, hyy, hxx)
    small = np.where(swap, hxx, hyy)
    a = np.sqrt(np.maximum(big, 0.0))
    safe = np.where(a > 0.0, a, 1.0)
    b = np.where(a > 0.0, hxy / safe, 0.0)
    c = np.sqrt(np.maximum(small - b * b, 0.0))
    c = np.where(a > 0.0, c, 0.0)
    return a, b, c


def pair_means(kind, hxx, hyy, hxy, nodes, weights):
    hxx = np.asarray(hxx, dtype=np.float64)
    hyy = np.asarray(hyy, dtype=np.float64)
    hxy = np.asarray(hxy, dtype=np.float64)
    if kind == 0:
        return hxy.copy(), np.ones_like(hxy)
    if kind == 1:
        s = np.sqrt(hxx * hyy)
        ok = s > 0.0
        rho = np.clip(np.where(ok, hxy / np.where(ok, s, 1.0), 0.0), -1.0, 1.0)
        theta = np.pi - np.arccos(rho)
        phi = np.where(ok, s * (np.sqrt(1.0 - rho * rho) + rho * theta) / (2.0 * np.pi), 0.0)
        dphi = np.where(ok, theta / (2.0 * np.pi), 0.0)
        return phi, dphi
    a, b, c = _cholesky2(hxx, hxy, hyy)
    z = np.asarray(nodes)
    w = np.asarray(weights)
    phi = np.empty_like(hxy)
    dphi = np.empty_like(hxy)
    # bound the (chunk, m, m) temporaries to about 32 MB
    chunk = max(1, CHUNK_ELEMENTS // (z.size * z.size))
    for lo in range(0, hxy.size, chunk):
        s = slice(lo, lo + chunk)
        t1 = np.tanh(a[s, None] * z[None, :])                            # (n, m)
        t2 = np.tanh(b[s, None, None] * z[None, :, None] + c[s, None, None] * z[None, None, :])
        row = t2 @ w                                                     # (n, m)
        drow = (1.0 - t2 * t2) @ w
        phi[s] = (t1 * row) @ w
        dphi[s] = ((1.0 - t1 * t1) * drow) @ w
    return phi, dphi
