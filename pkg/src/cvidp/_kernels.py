"""Compiled sequential recursions.

Everything here is a plain loop over time steps operating on small dense
blocks. The public modules wrap these kernels, validate inputs and turn
status codes into exceptions.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def cholesky(a):
    """Lower Cholesky factor and a success flag (no exception on failure)."""
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True)
def factor_with_jitter(a, jitter_rel):
    """Cholesky with a single jittered retry of size jitter_rel * mean(diag)."""
    L, ok = cholesky(a)
    if ok or jitter_rel <= 0.0:
        return L, ok
    n = a.shape[0]
    mean_diag = 0.0
    for i in range(n):
        mean_diag += a[i, i]
    mean_diag /= n
    if not mean_diag > 0.0:
        return L, False
    b = a.copy()
    for i in range(n):
        b[i, i] += jitter_rel * mean_diag
    return cholesky(b)


@njit(cache=True)
def inverse_from_cholesky(L):
    n = L.shape[0]
    Linv = np.zeros_like(L)
    for i in range(n):
        Linv[i, i] = 1.0 / L[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Linv[k, j]
            Linv[i, j] = s / L[i, i]
    return Linv.T @ Linv


@njit(cache=True)
def _sym(a):
    return 0.5 * (a + a.T)


@njit(cache=True)
def btd_eliminate(h, Jd, Jo, jitter_rel):
    """Forward block elimination of a block-tridiagonal Gaussian.

    ``Jo[i]`` is the precision block coupling state ``i+1`` to state ``i``.
    Returns the inverted Schur complements ``P``, the eliminated linear terms
    ``ht``, ``log det J``, ``h^T J^{-1} h`` and the index of the failing block
    (-1 when every block factorized).
    """
    N, d = h.shape
    P = np.zeros((N, d, d))
    ht = np.zeros((N, d))
    logdet = 0.0
    quad = 0.0
    for i in range(N):
        if i == 0:
            D = Jd[0].copy()
            hh = h[0].copy()
        else:
            K = Jo[i - 1] @ P[i - 1]
            D = Jd[i] - K @ Jo[i - 1].T
            hh = h[i] - K @ ht[i - 1]
        D = _sym(D)
        L, ok = factor_with_jitter(D, jitter_rel)
        if not ok:
            return P, ht, logdet, quad, i
        Pi = _sym(inverse_from_cholesky(L))
        P[i] = Pi
        ht[i] = hh
        for j in range(d):
            logdet += 2.0 * math.log(L[j, j])
        quad += hh @ (Pi @ hh)
    return P, ht, logdet, quad, -1


@njit(cache=True)
def btd_backward(Jo, P, ht):
    """Backward pass turning eliminated blocks into marginal moments."""
    N, d = ht.shape
    m = np.zeros((N, d))
    S = np.zeros((N, d, d))
    C = np.zeros((max(N - 1, 0), d, d))
    m[N - 1] = P[N - 1] @ ht[N - 1]
    S[N - 1] = P[N - 1]
    for i in range(N - 2, -1, -1):
        G = -P[i] @ Jo[i].T
        m[i] = G @ m[i + 1] + P[i] @ ht[i]
        S[i] = _sym(P[i] + G @ S[i + 1] @ G.T)
        C[i] = S[i + 1] @ G.T
    return m, S, C


@njit(cache=True)
def btd_tangent(Jo, P, ht, m, S, dh, dJd, dJo):
    """Directional derivative of the smoother output along (dh, dJd, dJo)."""
    N, d = ht.shape
    dP = np.zeros((N, d, d))
    dht = np.zeros((N, d))
    dP[0] = -P[0] @ dJd[0] @ P[0]
    dht[0] = dh[0]
    for i in range(1, N):
        K = Jo[i - 1] @ P[i - 1]
        dK = dJo[i - 1] @ P[i - 1] + Jo[i - 1] @ dP[i - 1]
        dD = dJd[i] - dK @ Jo[i - 1].T - K @ dJo[i - 1].T
        dht[i] = dh[i] - dK @ ht[i - 1] - K @ dht[i - 1]
        dP[i] = _sym(-P[i] @ dD @ P[i])
    dm = np.zeros((N, d))
    dS = np.zeros((N, d, d))
    dC = np.zeros((max(N - 1, 0), d, d))
    dm[N - 1] = dP[N - 1] @ ht[N - 1] + P[N - 1] @ dht[N - 1]
    dS[N - 1] = dP[N - 1]
    for i in range(N - 2, -1, -1):
        G = -P[i] @ Jo[i].T
        dG = -dP[i] @ Jo[i].T - P[i] @ dJo[i].T
        dm[i] = dG @ m[i + 1] + G @ dm[i + 1] + dP[i] @ ht[i] + P[i] @ dht[i]
        GSdG = G @ S[i + 1] @ dG.T
        dS[i] = _sym(dP[i] + GSdG + GSdG.T + G @ dS[i + 1] @ G.T)
        dC[i] = dS[i + 1] @ G.T + S[i + 1] @ dG.T
    return dm, dS, dC


@njit(cache=True)
def chain_moments(A, b, Q, m0, S0):
    """Marginal moments of x_{i+1} = A_i x_i + b_i + N(0, Q_i).

    Returns the failing state index (-1 if every covariance stayed PD).
    """
    M = A.shape[0]
    d = m0.shape[0]
    m = np.zeros((M + 1, d))
    S = np.zeros((M + 1, d, d))
    C = np.zeros((M, d, d))
    m[0] = m0
    S[0] = _sym(S0)
    for i in range(M):
        AS = A[i] @ S[i]
        C[i] = AS
        m[i + 1] = A[i] @ m[i] + b[i]
        S[i + 1] = _sym(AS @ A[i].T + Q[i])
        _, ok = cholesky(S[i + 1])
        if not ok:
            return m, S, C, i + 1
    return m, S, C, -1


@njit(cache=True)
def costate_recursion(A, grad_m, grad_S):
    """Backward adjoint recursion lam_k = A_k^T lam_{k+1} + grad_m[k].

    The matrix adjoint follows Psi_k = A_k^T Psi_{k+1} A_k + grad_S[k].
    """
    N, d = grad_m.shape
    lam = np.zeros((N, d))
    Psi = np.zeros((N, d, d))
    lam[N - 1] = grad_m[N - 1]
    Psi[N - 1] = grad_S[N - 1]
    for k in range(N - 2, -1, -1):
        lam[k] = A[k].T @ lam[k + 1] + grad_m[k]
        Psi[k] = _sym(A[k].T @ Psi[k + 1] @ A[k] + grad_S[k])
    return lam, Psi
