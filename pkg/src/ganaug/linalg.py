"""Symmetric eigendecomposition by cyclic Jacobi rotations, and PSD square roots.

The sweep uses a round-robin ordering so that each round rotates ``n // 2``
disjoint index pairs at once. Disjoint Givens rotations commute, so applying a
whole round as one vectorised update is the same as applying its rotations one
after another.
"""

from __future__ import annotations

import numpy as np


class NotPSDError(ValueError):
    """Matrix has an eigenvalue below the negative tolerance."""


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            arr = np.array(pairs, dtype=np.intp)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(
    a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60, vectors: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Eigenvalues (ascending) and eigenvectors of a symmetric matrix.

    Iterates sweeps until the off-diagonal Frobenius norm falls below
    ``tol * ||A||_F``. Raises ``RuntimeError`` if that takes more than
    ``max_sweeps`` sweeps.
    """
    A = np.array(a, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    V = np.eye(n) if vectors else None
    if n == 1:
        return A.diagonal().copy(), V
    A = 0.5 * (A + A.T)
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(n), V
    rounds = _round_robin(n)
    # rotations are applied to contiguous rows only: R A R^T = (R (R A)^T)^T,
    # and V is kept transposed so its update is a row update too
    Vt = V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300 * norm
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (A[q, q] - A[p, p]) / (2.0 * apq)
            # |tau| > 1e150 would overflow tau**2; sqrt(1 + tau**2) ~ |tau| there
            big = np.abs(tau) > 1e150
            small = np.where(big, 0.0, tau)
            root = np.where(big, 2.0 * np.abs(tau), np.abs(tau) + np.sqrt(1.0 + small * small))
            t = np.where(tau >= 0, 1.0, -1.0) / root
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c2, s2 = c[:, None], s[:, None]
            A = _rotate_rows(A, p, q, c2, s2).T.copy()
            A = _rotate_rows(A, p, q, c2, s2)
            A[p, q] = 0.0
            A[q, p] = 0.0
            if Vt is not None:
                Vt = _rotate_rows(Vt, p, q, c2, s2)
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = A.diagonal().copy()
    order = np.argsort(w)
    return w[order], (Vt.T[:, order] if Vt is not None else None)


def _rotate_rows(M: np.ndarray, p, q, c, s) -> np.ndarray:
    rp, rq = M[p], M[q]
    M[p] = c * rp - s * rq
    M[q] = s * rp + c * rq
    return M


def _symmetrize(a: np.ndarray, sym_tol: float) -> np.ndarray:
    A = np.asarray(a, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if np.max(np.abs(A - A.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (A + A.T)


def _check_eigs(w: np.ndarray, neg_tol: float) -> np.ndarray:
    limit = neg_tol * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w.size and w.min() < -limit:
        raise NotPSDError(f"eigenvalue {w.min():.3e} is below -{limit:.1e}")
    return np.clip(w, 0.0, None)


def matrix_sqrt_psd(a: np.ndarray, sym_tol: float = 1e-8, neg_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root of a PSD matrix, clamping tiny negative eigenvalues."""
    A = _symmetrize(a, sym_tol)
    w, V = jacobi_eigh(A)
    w = _check_eigs(w, neg_tol)
    return (V * np.sqrt(w)) @ V.T


def trace_sqrt_product(s1: np.ndarray, s2: np.ndarray, neg_tol: float = 1e-8) -> float:
    """Tr((S1 S2)^{1/2}) via the symmetric form sqrt(S1^{1/2} S2 S1^{1/2})."""
    r1 = matrix_sqrt_psd(s1, neg_tol=neg_tol)
    m = r1 @ _symmetrize(s2, 1e-8) @ r1
    w, _ = jacobi_eigh(0.5 * (m + m.T), vectors=False)
    return float(np.sum(np.sqrt(_check_eigs(w, neg_tol))))
