"""Brute-force active-set oracle for H^1 projections on tiny grids.

Enumerates every combination of active value and slope constraints, solves
the equality-constrained quadratic program with an independently assembled
Gram matrix, and keeps the best feasible candidate.
"""

from __future__ import annotations

import itertools

import numpy as np


def gram(N, dt):
    """H1 Gram matrix of the hat basis, assembled from polynomial integrals."""
    G = np.zeros((N, N))
    P = np.polynomial.Polynomial
    for i in range(N - 1):
        left, right = P([1.0, -1.0 / dt]), P([0.0, 1.0 / dt])
        basis = [left, right]
        for a in range(2):
            for b in range(2):
                val = (basis[a] * basis[b]).integ()(dt) + (basis[a].deriv() * basis[b].deriv()).integ()(dt)
                G[i + a, i + b] += val
    return G


def eq_qp(G, phi, A, b):
    N = len(phi)
    if not A:
        return phi.copy()
    A = np.array(A)
    K = np.block([[G, A.T], [A, np.zeros((len(A), len(A)))]])
    rhs = np.concatenate([G @ phi, b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    x = sol[:N]
    if np.max(np.abs(A @ x - b)) > 1e-9:
        return None
    return x


def brute_force(phi, dt, lo=None, hi=None, slope=None):
    """Best feasible candidate over all active sets (value and slope constraints)."""
    N = len(phi)
    G = gram(N, dt)
    node_opts = [0, -1, 1] if lo is not None else [0]
    best, best_val = None, np.inf
    for nodes in itertools.product(node_opts, repeat=N):
        for cells in itertools.product([0, -1, 1], repeat=N - 1):
            A, b = [], []
            for i, s in enumerate(nodes):
                if s:
                    row = np.zeros(N)
                    row[i] = 1.0
                    A.append(row)
                    b.append(lo if s < 0 else hi)
            for i, s in enumerate(cells):
                if s:
                    row = np.zeros(N)
                    row[i], row[i + 1] = -1.0 / dt, 1.0 / dt
                    A.append(row)
                    b.append(s * slope)
            x = eq_qp(G, phi, A, np.array(b))
            if x is None:
                continue
            ok = np.all(np.abs(np.diff(x)) / dt <= slope + 1e-12)
            if lo is not None:
                ok = ok and np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12)
            if not ok:
                continue
            val = (x - phi) @ G @ (x - phi)
            if val < best_val:
                best, best_val = x, val
    return best
