"""Independent brute-force references used by the tests.

Everything here works on exact rationals (fractions.Fraction), so the
answers do not depend on floating-point cutoffs.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def exact(M) -> list[list[Fraction]]:
    return [[Fraction(v).limit_denominator(10**12) if isinstance(v, float) else Fraction(v) for v in row] for row in np.atleast_2d(M).tolist()]


def matmul(A, B):
    return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))] for i in range(len(A))]


def rank(M) -> int:
    """Row rank by Gaussian elimination over the rationals."""
    is_exact = isinstance(M, list) and len(M) > 0 and isinstance(M[0][0], Fraction)
    rows = [list(r) for r in (M if is_exact else exact(M))]
    if not rows or not rows[0]:
        return 0
    r, ncol = 0, len(rows[0])
    for c in range(ncol):
        piv = next((i for i in range(r, len(rows)) if rows[i][c] != 0), None)
        if piv is None:
            continue
        rows[r], rows[piv] = rows[piv], rows[r]
        for i in range(len(rows)):
            if i != r and rows[i][c] != 0:
                f = rows[i][c] / rows[r][c]
                rows[i] = [a - f * b for a, b in zip(rows[i], rows[r])]
        r += 1
        if r == len(rows):
            break
    return r


def reachable(A, B) -> bool:
    A, B = exact(A), exact(B)
    n = len(A)
    blocks, cur = [], B
    for _ in range(n):
        blocks.append(cur)
        cur = matmul(A, cur)
    K = [sum((blk[i] for blk in blocks), []) for i in range(n)]
    return rank(K) == n


def observable(A, C) -> bool:
    A, C = exact(A), exact(C)
    n = len(A)
    rows, cur = [], C
    for _ in range(n):
        rows.extend(cur)
        cur = matmul(cur, A)
    return rank(rows) == n


def intrinsic_delay(A, B, C) -> int | None:
    """Smallest i < n with C A^i B != 0, or None."""
    A, B, C = exact(A), exact(B), exact(C)
    cur = B
    for i in range(len(A)):
        if any(v != 0 for row in matmul(C, cur) for v in row):
            return i
        cur = matmul(A, cur)
    return None


def cantor_value(bits, lam: float, rate: float, t: int, gamma: float) -> float:
    """Scalar embedding value by the direct formula gamma lambda^t sum lambda^{-k/R} S(k)."""
    return gamma * sum(lam ** (t - k / rate) * b for k, b in enumerate(bits))


def bec_anytime_capacity(alpha: float, beta: float) -> float:
    """Closed form without any rearrangement."""
    return alpha / (alpha + math.log2((1 - beta) / (1 - beta * 2**alpha)))


def binary_divergence(p: float, q: float) -> float:
    return p * math.log2(p / q) + (1 - p) * math.log2((1 - p) / (1 - q))
