"""Small dense linear algebra: LU determinants and Jacobi singular values."""

from __future__ import annotations

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def lu_factor(a: np.ndarray):
    """Doolittle LU with partial pivoting.

    Returns ``(lu, perm, sign)`` where ``lu`` packs unit-lower L below the
    diagonal and U on/above it, ``perm`` is the row permutation and ``sign``
    its parity (+1/-1).
    """
    lu = np.array(a, dtype=np.float64)
    n, m = lu.shape
    if n != m:
        raise ValueError("lu_factor needs a square matrix")
    perm = np.arange(n)
    sign = 1.0
    scale = np.abs(lu).max(initial=0.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if lu[p, k] == 0.0 or abs(lu[p, k]) <= 1e-300 * max(scale, 1.0):
            raise SingularMatrixError(f"matrix is singular at column {k}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, perm, sign


def slogdet(a: np.ndarray):
    """(sign, log|det|) accumulated from the LU diagonal."""
    lu, _, sign = lu_factor(a)
    d = np.diag(lu)
    sign = sign * float(np.prod(np.sign(d)))
    return sign, float(np.sum(np.log(np.abs(d))))


def det(a: np.ndarray) -> float:
    sign, logabs = slogdet(a)
    return sign * float(np.exp(logabs))


def _round_robin(n: int):
    """Pairings of 0..n-1 (n even) where each round covers every index once."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def singular_values(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi (Hestenes) rotations.

    Column pairs are processed in round-robin order so each round rotates
    n/2 disjoint pairs at once.
    """
    u = np.array(a, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("singular_values needs a matrix")
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    if n == 0:
        return np.zeros(0)
    if n % 2:
        u = np.hstack([u, np.zeros((u.shape[0], 1))])
    rounds = _round_robin(u.shape[1])
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->j", u, u))[:n]
    return np.sort(sv)[::-1]
