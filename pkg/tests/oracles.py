"""Reference implementations the tests compare against.

These are written independently of the package code, favouring obvious
correctness over speed.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def jacobi_singular_values(A: np.ndarray, sweeps: int = 60, tol: float = 1e-15):
    """One-sided Jacobi SVD. Returns ``(U, s, V)`` with ``s`` descending.

    Rotates column pairs of ``A`` until all columns are mutually
    orthogonal; the column norms are then the singular values.
    """
    A = np.asarray(A, dtype=float)
    if A.shape[0] < A.shape[1]:
        Ut, s, Vt = jacobi_singular_values(A.T, sweeps, tol)
        return Vt, s, Ut
    U = A.copy()
    m, n = U.shape
    V = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = U[:, i] @ U[:, i]
                beta = U[:, j] @ U[:, j]
                gamma = U[:, i] @ U[:, j]
                if alpha == 0.0 or beta == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ui, uj = U[:, i].copy(), U[:, j].copy()
                U[:, i], U[:, j] = c * ui - s * uj, s * ui + c * uj
                vi, vj = V[:, i].copy(), V[:, j].copy()
                V[:, i], V[:, j] = c * vi - s * vj, s * vi + c * vj
        if off < tol:
            break
    s = np.linalg.norm(U, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    V = V[:, order]
    U = U[:, order]
    nz = s > 0
    U[:, nz] /= s[nz]
    return U, s, V


def forward_by_hand(params, x):
    """Scalar-loop forward pass of the three-layer ReLU network."""
    W1, b1, W2, b2, W3, b3 = params

    def dense(a, W, b, relu):
        out = []
        for j in range(len(b)):
            z = b[j] + sum(a[i] * W[i][j] for i in range(len(a)))
            out.append(max(z, 0.0) if relu else z)
        return out

    return dense(dense(dense(list(x), W1, b1, True), W2, b2, True), W3, b3, False)


def full_scan_top_k(ids, vectors, q, k, exclude=()):
    """Sort every candidate by (score desc, id asc) and cut at k."""
    pairs = [(float(np.dot(v, q)), a) for a, v in zip(ids, vectors) if a not in set(exclude)]
    pairs.sort(key=lambda p: (-p[0], p[1]))
    return [(a, s) for s, a in pairs[:k]]


def best_partition_cost(X: np.ndarray, k: int) -> float:
    """Minimum k-means objective over every assignment of points to k labels."""
    best = math.inf
    n = X.shape[0]
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k:
            continue
        lab = np.array(labels)
        cost = 0.0
        for c in range(k):
            pts = X[lab == c]
            cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


def gaussian_posterior(mu0: float, s0: float, rewards, obs_var: float):
    """Normal-normal posterior by completing the square, one reward at a time."""
    mu, s2 = mu0, s0
    for r in rewards:
        k = s2 / (s2 + obs_var)  # Kalman gain
        mu = mu + k * (r - mu)
        s2 = (1 - k) * s2
    return mu, s2


def cascade_rule(slate, click):
    """Spelled-out cascade attribution with three-deep examination on no click."""
    out = {}
    if click is None:
        for p, a in enumerate(slate, start=1):
            if p <= 3:
                out[a] = 0
        return out
    for p, a in enumerate(slate, start=1):
        if p < click:
            out[a] = 0
        elif p == click:
            out[a] = 1
    return out
