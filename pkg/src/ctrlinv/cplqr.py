"""Consensus-preserving LQR.

The open-loop matrix has a simple zero eigenvalue (the angular consensus
mode).  Shifting that eigenvalue to ``-eps`` along its biorthonormal
eigenpair gives a Hurwitz ``A_eps`` whose ARE is well posed; the stabilizing
solution annihilates the consensus direction, so ``K = R^{-1} B^T X`` keeps
the zero mode in closed loop and the gain does not depend on ``eps``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import ConsensusError, ParameterError, RiccatiError
from .sysmodel import consensus_spectrum, zero_tolerance

__all__ = [
    "ConsensusEigenpair",
    "LqrWeights",
    "RiccatiSolution",
    "PBHReport",
    "consensus_pair",
    "shift_consensus",
    "default_weights",
    "hamiltonian",
    "solve_are",
    "solve_cplqr",
    "pbh_check",
    "riccati_to_dict",
]


@dataclass(frozen=True)
class ConsensusEigenpair:
    """Right/left null vectors of ``A`` with ``w0 @ v0 == 1``."""

    v0: np.ndarray
    w0: np.ndarray


def consensus_pair(A, check=True, v0_hint=None):
    """Null vectors of ``A`` by shifted inverse iteration.

    The right vector is oriented so that its largest-magnitude entry is
    positive and scaled to unit norm; the left vector is scaled so that
    ``w0 @ v0 == 1``.  With ``check`` the zero eigenvalue is verified to be
    simple by a dense eigensolve.
    """
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    if check:
        n_zero, _, _ = consensus_spectrum(A)
        if n_zero != 1:
            raise ConsensusError(f"expected a simple zero eigenvalue, found {n_zero} near zero")
    shift = 1e-10 * max(1.0, np.linalg.norm(A, 1))
    lu = la.lu_factor(A - shift * np.eye(N), check_finite=False)
    v = np.ones(N) if v0_hint is None else np.asarray(v0_hint, dtype=float)
    w = np.ones(N)
    for _ in range(3):
        v = la.lu_solve(lu, v, check_finite=False)
        v /= np.linalg.norm(v)
        w = la.lu_solve(lu, w, trans=1, check_finite=False)
        w /= np.linalg.norm(w)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    s = w @ v
    if abs(s) < 1e-12:
        raise ConsensusError("left and right null vectors are orthogonal; zero eigenvalue is not simple")
    w = w / s
    tol = 1e-8 * max(1.0, np.linalg.norm(A, "fro"))
    if np.linalg.norm(A @ v) > tol or np.linalg.norm(A.T @ w) > tol * np.linalg.norm(w):
        raise ConsensusError("inverse iteration did not converge to a null vector")
    return ConsensusEigenpair(v0=v, w0=w)


def shift_consensus(A, pair: ConsensusEigenpair, eps):
    """``A - eps * v0 w0^T``: moves the zero eigenvalue to ``-eps``."""
    if not eps > 0:
        raise ParameterError(f"shift eps must be positive, got {eps}")
    return np.asarray(A, dtype=float) - eps * np.outer(pair.v0, pair.w0)


@dataclass(frozen=True)
class LqrWeights:
    Q: np.ndarray
    R: np.ndarray

    def validate(self, v0=None):
        Q, R = self.Q, self.R
        if not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ParameterError("Q must be symmetric")
        if not np.allclose(R, R.T, atol=1e-12 * max(1.0, np.abs(R).max())):
            raise ParameterError("R must be symmetric")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ParameterError("R must be positive definite")
        qn = np.linalg.norm(Q, 2)
        if np.linalg.eigvalsh(Q).min() < -1e-10 * max(qn, 1.0):
            raise ParameterError("Q must be positive semidefinite")
        if v0 is not None and np.linalg.norm(Q @ v0) > 1e-9 * max(qn, 1.0):
            raise ParameterError("Q must annihilate the consensus direction v0")
        return self


def default_weights(model):
    """Angle-difference and state penalty used for the reference design.

    ``Q = (I_4 kron M^{1/2})^{-1} diag(I - 11^T/n, I, I, I) (I_4 kron M^{1/2})^{-1}``
    and ``R = I``.
    """
    n = model.n
    s = np.tile(1.0 / np.sqrt(model.M), 4)
    core = np.eye(4 * n)
    core[:n, :n] -= 1.0 / n
    Q = s[:, None] * core * s[None, :]
    return LqrWeights(Q=0.5 * (Q + Q.T), R=np.eye(n))


def hamiltonian(A, G, Q):
    return np.block([[A, -G], [-Q, -A.T]])


def _are_residual(A, G, Q, X):
    return A.T @ X + X @ A + Q - X @ G @ X


def solve_are(A, B, Q, R, *, rtol=1e-8):
    """Stabilizing solution of ``A^T X + X A + Q - X G X = 0``.

    Uses the ordered real Schur form of the Hamiltonian; the stable invariant
    subspace ``[U1; U2]`` gives ``X = U2 U1^{-1}``.  One Newton step is taken
    when the scaled residual
    ``||res||_F / (||Q||_F + 2 ||A^T X||_F + ||X G X||_F)`` exceeds ``rtol``.

    Returns ``(X, residual_norm)`` with the unscaled Frobenius residual.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.asarray(Q, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    N = A.shape[0]
    G = B @ la.solve(R, B.T, assume_a="pos")
    G = 0.5 * (G + G.T)
    H = hamiltonian(A, G, Q)
    T, U, sdim = la.schur(H, output="real", sort="lhp")
    ev = np.diag(T)
    hnorm = max(1.0, np.linalg.norm(H, 1))
    # standardized 2x2 Schur blocks carry the real part on the diagonal
    if np.any(np.abs(ev) < 1e-10 * hnorm):
        raise RiccatiError("Hamiltonian has eigenvalues on the imaginary axis; ARE is ill posed")
    if sdim != N:
        raise RiccatiError(f"stable invariant subspace has dimension {sdim}, expected {N}")
    U1, U2 = U[:N, :N], U[N:, :N]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu = la.lu_factor(U1)
    if np.abs(np.diag(lu[0])).min() < 1e-14:
        raise RiccatiError("stable subspace is not a graph subspace (U1 singular)")
    X = la.lu_solve(lu, U2.T, trans=1).T
    X = 0.5 * (X + X.T)
    def scale(X):
        s = np.linalg.norm(Q, "fro") + 2 * np.linalg.norm(A.T @ X, "fro") + np.linalg.norm(X @ G @ X, "fro")
        return max(s, np.finfo(float).tiny)

    res = np.linalg.norm(_are_residual(A, G, Q, X), "fro")
    if res > rtol * scale(X):
        Acl = A - G @ X
        dX = la.solve_continuous_lyapunov(Acl.T, -_are_residual(A, G, Q, X))
        X = X + 0.5 * (dX + dX.T)
        res = np.linalg.norm(_are_residual(A, G, Q, X), "fro")
        if res > rtol * scale(X):
            raise RiccatiError(f"scaled ARE residual {res / scale(X):.3e} exceeds {rtol:.0e} after refinement", residual=res)
    return X, res


@dataclass(frozen=True)
class RiccatiSolution:
    X: np.ndarray
    K: np.ndarray
    epsilon: float
    residual: float
    pair: ConsensusEigenpair
    G: np.ndarray
    A_eps: np.ndarray

    @property
    def closed_loop_shifted(self):
        """``A_eps - G X``: Hurwitz realization of the reference closed loop."""
        return self.A_eps - self.G @ self.X


def solve_cplqr(A, B, Q, R, eps=1.0, pair=None, check_pair=True):
    """Consensus-preserving LQR gain.

    Solves the ARE for ``A_eps = A - eps v0 w0^T`` and returns a
    :class:`RiccatiSolution` whose gain ``K = R^{-1} B^T X`` satisfies
    ``(A - B K) v0 = 0``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if pair is None:
        pair = consensus_pair(A, check=check_pair)
    LqrWeights(np.asarray(Q, dtype=float), R).validate(pair.v0)
    A_eps = shift_consensus(A, pair, eps)
    X, res = solve_are(A_eps, B, Q, R)
    xn = max(np.linalg.norm(X, 2), np.finfo(float).tiny)
    if np.linalg.norm(X @ pair.v0) > 1e-8 * xn:
        raise RiccatiError("solution does not annihilate the consensus direction", residual=res)
    K = la.solve(R, B.T @ X, assume_a="pos")
    G = B @ la.solve(R, B.T, assume_a="pos")
    return RiccatiSolution(X=X, K=K, epsilon=float(eps), residual=float(res), pair=pair, G=0.5 * (G + G.T), A_eps=A_eps)


def closed_loop_verdict(A_cl):
    """Consensus-stability verdict for a closed-loop matrix.

    Returns a dict with the zero-eigenvalue count, the largest real part among
    the remaining eigenvalues, the eigenvalues and ``consensus_stable``.
    """
    n_zero, max_re, eigs = consensus_spectrum(A_cl)
    return {
        "n_zero": n_zero,
        "max_real_nonzero": max_re,
        "eigs": eigs,
        "consensus_stable": bool(n_zero == 1 and max_re < -1e-10),
    }


@dataclass(frozen=True)
class PBHReport:
    eigenvalues: np.ndarray
    min_singular_values: np.ndarray
    threshold: float

    @property
    def controllable(self):
        return bool(np.all(self.min_singular_values > self.threshold))

    @property
    def worst(self):
        return float(self.min_singular_values.min()) if self.min_singular_values.size else np.inf


def pbh_check(A, B):
    """PBH rank test: smallest singular value of ``[A - lam I, B]`` per eigenvalue."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    N = A.shape[0]
    eigs = la.eigvals(A)
    thr = 1e-8 * np.linalg.norm(np.hstack([A, B]), "fro")
    smin = np.empty(eigs.size)
    for k, lam in enumerate(eigs):
        smin[k] = la.svdvals(np.hstack([A - lam * np.eye(N), B]))[-1]
    return PBHReport(eigenvalues=eigs, min_singular_values=smin, threshold=thr)


def riccati_to_dict(sol: RiccatiSolution, A, B):
    eigs = la.eigvals(np.asarray(A) - np.asarray(B) @ sol.K)
    return {
        "X": sol.X.tolist(),
        "K": sol.K.tolist(),
        "epsilon": sol.epsilon,
        "residual": sol.residual,
        "closed_loop_eigs": [[float(e.real), float(e.imag)] for e in eigs],
    }


__all__ += ["closed_loop_verdict", "zero_tolerance"]
