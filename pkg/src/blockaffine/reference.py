"""Slow pure-Python references used as oracles.

Nothing here touches the vectorized code paths: inputs are converted to
nested lists and every product is an explicit loop over Python floats.
"""
from __future__ import annotations

import numpy as np


def naive_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64).tolist(), np.asarray(b, dtype=np.float64).tolist()
    p, q, r = len(a), len(b), len(b[0])
    out = [[0.0] * r for _ in range(p)]
    for i in range(p):
        ai, oi = a[i], out[i]
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += ai[k] * b[k][j]
            oi[j] = s
    return np.array(out)


def _block_affine(W, b, pick, product):
    W = np.asarray(W, dtype=np.float64)
    n, m = W.shape
    Wl = W.tolist()
    out = [[0.0] * m for _ in range(n)]
    for r in range(n // b):
        for c in range(m // b):
            mult, addend = pick(r, c)
            for i in range(b):
                row = Wl[r * b + i]
                for j in range(b):
                    s = product(row, c * b, mult, i, j, b)
                    out[r * b + i][c * b + j] = s + addend[i][j]
    return np.array(out)


def _mm(row, off, mult, i, j, b):
    s = 0.0
    for k in range(b):
        s += row[off + k] * mult[k][j]
    return s


def _hd(row, off, mult, i, j, b):
    return row[off + j] * mult[i][j]


def naive_delta_w_col(W, bone) -> np.ndarray:
    blocks = np.asarray(bone, dtype=np.float64).tolist()
    b = len(blocks[0])
    return _block_affine(W, b, lambda r, c: (blocks[r], blocks[r]), _mm)


def naive_delta_w_row(W, bone) -> np.ndarray:
    blocks = np.asarray(bone, dtype=np.float64).tolist()
    b = len(blocks[0])
    return _block_affine(W, b, lambda r, c: (blocks[c], blocks[c]), _mm)


def naive_delta_w_grouped(W, bone, assignment) -> np.ndarray:
    blocks = np.asarray(bone, dtype=np.float64).tolist()
    b = len(blocks[0])
    cols = np.asarray(W).shape[1] // b
    assignment = [int(x) for x in assignment]
    def pick(r, c):
        k = blocks[assignment[r * cols + c]]
        return k, k
    return _block_affine(W, b, pick, _mm)


def naive_delta_w_unconstrained(W, A, B) -> np.ndarray:
    Al = np.asarray(A, dtype=np.float64).tolist()
    Bl = np.asarray(B, dtype=np.float64).tolist()
    b = len(Al[0])
    return _block_affine(W, b, lambda r, c: (Al[c], Bl[c]), _mm)


def naive_delta_w_hadamard(W, bone) -> np.ndarray:
    blocks = np.asarray(bone, dtype=np.float64).tolist()
    b = len(blocks[0])
    return _block_affine(W, b, lambda r, c: (blocks[c], blocks[c]), _hd)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
