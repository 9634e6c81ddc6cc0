"""Frequency-limited controllability Gramians.

For a Hurwitz ``A`` and band ``[-w, w]`` the Gramian

    Phi = (1/2pi) int_{-w}^{w} (i v I - A)^{-1} Bd Bd^T (i v I - A)^{-*} dv

solves ``A Phi + Phi A^T + S Bd Bd^T + Bd Bd^T S^T = 0`` with

    S(w) = -(i/2pi) log[(i w I - A)(-i w I - A)^{-1}].

When ``A = A_eps - G X`` is the closed loop of an ARE, its eigenvectors are
the top halves of the stable eigenvectors of the Hamiltonian, and ``Phi``
has the Cauchy-like representation ``Z C Z^*`` evaluated here in
:func:`cauchy_gramian`.  Truncating ``Z`` to the modes of smallest magnitude
gives the low-rank factor used for clustering.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as sla

from .errors import ParameterError, SpectrumError, StabilityError, TruncationError
from .cplqr import hamiltonian

__all__ = [
    "FreqBand",
    "HamiltonianSpectrum",
    "LowRankGramian",
    "s_scalars",
    "s_matrix",
    "gramian_lyap",
    "gramian_infinite",
    "theta_c",
    "cauchy_coefficients",
    "hamiltonian_spectrum",
    "cauchy_gramian",
    "lowrank_gramian",
    "truncation_bound",
    "save_gramian",
]

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class FreqBand:
    """Symmetric band ``[-omega, omega]`` in rad/s."""

    omega: float = 2.0

    def __post_init__(self):
        w = float(self.omega)
        if not (np.isfinite(w) and w > 0):
            raise ParameterError(f"band edge must be positive and finite, got {self.omega}")
        object.__setattr__(self, "omega", w)


def _omega(band):
    return band.omega if isinstance(band, FreqBand) else FreqBand(band).omega


def s_scalars(lam, band):
    """``s(lam) = -(i/2pi) log((i w - lam) / (-i w - lam))`` elementwise."""
    w = _omega(band)
    lam = np.asarray(lam, dtype=complex)
    return -1j / _TWO_PI * np.log((1j * w - lam) / (-1j * w - lam))


def _eig_hurwitz(A):
    lam, V = la.eig(A)
    if np.any(lam.real >= 0):
        raise StabilityError("matrix is not Hurwitz; use the shifted realization", eigenvalues=lam)
    return lam, V


def s_matrix(A_cl, band, *, method="eig", imag_tol=1e-9):
    """Real matrix ``S(w)``.

    ``method="eig"`` applies the scalar formula on the eigendecomposition;
    ``"schur"`` uses a Schur-based matrix logarithm, which stays accurate
    for defective or nearly defective matrices.
    """
    A_cl = np.asarray(A_cl, dtype=float)
    lam, V = _eig_hurwitz(A_cl)
    if method == "eig":
        s = s_scalars(lam, band)
        S = la.solve(V.T, (V * s).T).T
    elif method == "schur":
        w = _omega(band)
        eye = np.eye(A_cl.shape[0])
        Mob = la.solve((-1j * w * eye - A_cl).T, (1j * w * eye - A_cl).T).T
        S = -1j / _TWO_PI * la.logm(Mob)
    else:
        raise ParameterError(f"unknown method {method!r}")
    scale = max(np.abs(S).max(), np.finfo(float).tiny)
    if np.abs(S.imag).max() > imag_tol * max(scale, 1.0):
        raise SpectrumError("S(w) has a non-negligible imaginary part; eigenbasis is ill conditioned")
    return S.real


def gramian_lyap(A_cl, Bd, band):
    """Band-limited Gramian from the Lyapunov equation with the ``S`` term."""
    A_cl = np.asarray(A_cl, dtype=float)
    Bd = np.asarray(Bd, dtype=float).reshape(A_cl.shape[0], -1)
    S = s_matrix(A_cl, band)
    W = Bd @ Bd.T
    rhs = S @ W
    rhs = rhs + rhs.T
    Phi = la.solve_continuous_lyapunov(A_cl, -rhs)
    return 0.5 * (Phi + Phi.T)


def gramian_infinite(A_cl, Bd):
    """Ordinary controllability Gramian ``A P + P A^T + Bd Bd^T = 0``."""
    A_cl = np.asarray(A_cl, dtype=float)
    Bd = np.asarray(Bd, dtype=float).reshape(A_cl.shape[0], -1)
    _eig_hurwitz(A_cl)
    P = la.solve_continuous_lyapunov(A_cl, -Bd @ Bd.T)
    return 0.5 * (P + P.T)


def theta_c(lam, band):
    """Angle ``arctan((b - w)/a) - arctan((b + w)/a)`` for ``lam = a + i b``."""
    w = _omega(band)
    lam = np.asarray(lam, dtype=complex)
    a, b = lam.real, lam.imag
    return np.arctan((b - w) / a) - np.arctan((b + w) / a)


def cauchy_coefficients(lam, band):
    """Coefficients ``c_i`` of the Cauchy representation.

    ``c = (theta_c - (i/2) ln[(a^2 + (b-w)^2) / (a^2 + (b+w)^2)]) / 2pi``,
    which coincides with :func:`s_scalars` on the open left half plane.
    """
    w = _omega(band)
    lam = np.asarray(lam, dtype=complex)
    a, b = lam.real, lam.imag
    ratio = (a**2 + (b - w) ** 2) / (a**2 + (b + w) ** 2)
    return (theta_c(lam, band) - 0.5j * np.log(ratio)) / _TWO_PI


# ---------------------------------------------------------------------------
# Hamiltonian spectrum


@dataclass(frozen=True)
class HamiltonianSpectrum:
    """Stable Hamiltonian eigenpairs in ascending-magnitude order.

    Attributes
    ----------
    eigvals : (k,) complex
        Stable eigenvalues, conjugate pairs adjacent (negative imaginary part
        first).
    Z : (N, k) complex
        Top halves of the eigenvectors, unit columns; eigenvectors of the
        closed loop ``A_eps - G X``.
    Zinv : (k, N) complex
        Matching rows of ``Z^{-1}`` (exact on the dense path, pseudo-inverse
        rows on the iterative path).
    Y : (N, k) complex
        Bottom halves, scaled consistently with ``Z`` (``X Z = Y``).
    full : bool
        True when all ``N`` stable eigenpairs are present.
    eta : float
        Condition number of the unit-column eigenvector matrix used in the
        truncation bound.
    backend : str
        ``"dense"`` or ``"arnoldi"``.
    """

    eigvals: np.ndarray
    Z: np.ndarray
    Zinv: np.ndarray
    Y: np.ndarray
    full: bool
    eta: float
    backend: str

    @property
    def size(self):
        return self.eigvals.size

    def riccati_solution(self):
        """``X = Y Z^{-1}`` (requires the full spectrum)."""
        if not self.full:
            raise SpectrumError("X can only be recovered from the full stable subspace")
        X = (self.Y @ self.Zinv).real
        return 0.5 * (X + X.T)

    def without_direction(self, v, tol=1e-6):
        """Copy without the mode whose eigenvector is parallel to ``v``.

        Used to drop the consensus mode: its eigenvector lies in the kernel of
        every clustering residual, so it only takes a slot away from the
        modes that matter.  Returns ``(spectrum, index)`` with ``index`` the
        position of the removed mode, or ``None`` if no mode matches.
        """
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        cos = np.abs(v @ self.Z)
        i = int(np.argmax(cos))
        if cos[i] < 1.0 - tol or abs(self.eigvals[i].imag) > 0:
            return self, None
        keep = np.arange(self.size) != i
        out = replace(self, eigvals=self.eigvals[keep], Z=self.Z[:, keep], Zinv=self.Zinv[keep], Y=self.Y[:, keep])
        return out, i

    def closure(self, kappa):
        """Smallest count ``>= kappa`` that does not split a conjugate pair."""
        if not 1 <= kappa <= self.size:
            raise ParameterError(f"kappa must lie in 1..{self.size}, got {kappa}")
        k = kappa
        if k < self.size and _is_pair_start(self.eigvals, k - 1):
            k += 1
        return k


def _is_pair_start(lam, i):
    """True if ``lam[i]`` and ``lam[i+1]`` form a conjugate pair starting at i."""
    if i + 1 >= lam.size or lam[i].imag == 0:
        return False
    # pairs are stored (conj, positive); a pair starts at i when lam[i] has
    # negative imaginary part
    return lam[i].imag < 0


def _order_pairs(lam, vecs, tol):
    """Sort by magnitude with exact conjugate pairing.

    Complex eigenvalues with positive imaginary part are kept and their
    partners are regenerated by conjugation; this fixes round-off asymmetry
    from iterative solvers.
    """
    groups = []
    for i, l in enumerate(lam):
        if abs(l.imag) <= tol * max(1.0, abs(l)):
            v = vecs[:, i]
            k = np.argmax(np.abs(v))
            v = (v * np.conj(v[k]) / abs(v[k])).real  # strip the arbitrary phase
            groups.append((abs(l), [(complex(l.real, 0.0), v.astype(complex))]))
        elif l.imag > 0:
            v = vecs[:, i]
            groups.append((abs(l), [(np.conj(l), np.conj(v)), (l, v)]))
    groups.sort(key=lambda g: (g[0], g[1][0][0].imag))
    out_l = [p[0] for _, g in groups for p in g]
    out_v = [p[1] for _, g in groups for p in g]
    return np.array(out_l, dtype=complex), np.column_stack(out_v) if out_v else np.zeros((vecs.shape[0], 0), complex)


def _normalize_halves(W, N):
    Z, Y = W[:N], W[N:]
    nz = np.linalg.norm(Z, axis=0)
    if np.any(nz == 0):
        raise SpectrumError("stable eigenvector with vanishing top half; closed loop is not diagonalizable")
    return Z / nz, Y / nz


def _dense_spectrum(H, N, pair_tol):
    lam, W = la.eig(H)
    stable = lam.real < 0
    if stable.sum() != N:
        raise SpectrumError(f"Hamiltonian has {stable.sum()} stable eigenvalues, expected {N}")
    lam, W = _order_pairs(lam[stable], W[:, stable], pair_tol)
    if lam.size != N:
        raise SpectrumError("stable spectrum is not closed under conjugation")
    Z, Y = _normalize_halves(W, N)
    Zinv = la.inv(Z)
    eta = float(np.linalg.cond(Z))
    return lam, Z, Zinv, Y, eta


def _structured_inverse(A_eps, G, Q):
    """``LinearOperator`` applying ``H^{-1}`` through two ``N x N`` LU factors.

    With ``H = [[A, -G], [-Q, -A^T]]``: ``y2 = -S^{-1}(b2 + Q A^{-1} b1)``,
    ``y1 = A^{-1}(b1 + G y2)``, where ``S = A^T + Q A^{-1} G``.
    """
    N = A_eps.shape[0]
    lu_a = la.lu_factor(A_eps)
    cols = np.flatnonzero(np.any(G != 0, axis=0))
    AiG = np.zeros((N, N))
    if cols.size:
        AiG[:, cols] = la.lu_solve(lu_a, G[:, cols])
    lu_s = la.lu_factor(A_eps.T + Q @ AiG)

    def matvec(b):
        b = np.asarray(b).ravel()
        b1, b2 = b[:N], b[N:]
        dt = np.result_type(b.dtype, float)
        y2 = -la.lu_solve(lu_s, b2 + Q @ la.lu_solve(lu_a, b1)).astype(dt)
        y1 = la.lu_solve(lu_a, b1 + G @ y2)
        return np.concatenate([y1, y2])

    return sla.LinearOperator((2 * N, 2 * N), matvec=matvec, dtype=float)


def _arnoldi_spectrum(H, A_eps, G, Q, N, kappa, pair_tol, seed):
    # eigenvalues of H come in +/- pairs; request both halves plus slack so
    # that a conjugate partner at the window edge is not cut off
    k = min(2 * N - 2, 2 * kappa + 6)
    OPinv = _structured_inverse(A_eps, G, Q)
    v0 = np.random.default_rng(seed).standard_normal(2 * N)
    try:
        lam, W = sla.eigs(H, k=k, sigma=0.0, OPinv=OPinv, which="LM", v0=v0, maxiter=20 * k * 10)
    except sla.ArpackNoConvergence as exc:
        raise SpectrumError(f"Arnoldi did not converge ({len(exc.eigenvalues)} of {k} pairs)") from exc
    stable = lam.real < 0
    lam, W = _order_pairs(lam[stable], W[:, stable], pair_tol)
    if lam.size == 0:
        raise SpectrumError("Arnoldi returned no stable eigenvalues")
    Z, Y = _normalize_halves(W, N)
    Zinv = np.linalg.pinv(Z)
    eta = float(np.linalg.cond(Z))
    return lam, Z, Zinv, Y, eta


def hamiltonian_spectrum(A_eps, G, Q, kappa=None, *, backend="dense", seed=0, pair_tol=1e-10):
    """Stable eigenstructure of the Hamiltonian of ``(A_eps, G, Q)``.

    Parameters
    ----------
    kappa : int, optional
        Number of leading modes required.  The dense backend always returns
        all ``N``; the Arnoldi backend returns at least the conjugate-closed
        ``kappa`` leading modes.
    backend : {"dense", "arnoldi"}
    """
    A_eps = np.asarray(A_eps, dtype=float)
    G = np.asarray(G, dtype=float)
    Q = np.asarray(Q, dtype=float)
    N = A_eps.shape[0]
    H = hamiltonian(A_eps, G, Q)
    if backend == "dense" or kappa is None or 2 * kappa + 6 >= 2 * N - 2:
        lam, Z, Zinv, Y, eta = _dense_spectrum(H, N, pair_tol)
        return HamiltonianSpectrum(lam, Z, Zinv, Y, True, eta, "dense")
    if backend != "arnoldi":
        raise ParameterError(f"unknown spectrum backend {backend!r}")
    lam, Z, Zinv, Y, eta = _arnoldi_spectrum(H, A_eps, G, Q, N, kappa, pair_tol, seed)
    if lam.size < kappa:
        raise SpectrumError(f"Arnoldi produced {lam.size} stable modes, fewer than kappa={kappa}")
    return HamiltonianSpectrum(lam, Z, Zinv, Y, lam.size == N, eta, "arnoldi")


# ---------------------------------------------------------------------------
# Cauchy representation and truncation


def _cauchy_block(lam, Zinv_rows, Bd, band):
    lam = np.asarray(lam)
    c = cauchy_coefficients(lam, band)
    Bh = Zinv_rows @ np.asarray(Bd, dtype=float)
    num = Bh @ Bh.conj().T
    den = lam[:, None] + lam[None, :].conj()
    if np.abs(den).min() < 1e-14 * max(1.0, np.abs(lam).max()):
        raise SpectrumError("Cauchy denominator vanishes (eigenvalue on the imaginary axis)")
    C = -num * (c[:, None] + c[None, :].conj()) / den
    return 0.5 * (C + C.conj().T)


def cauchy_gramian(spec: HamiltonianSpectrum, Bd, band, *, imag_tol=1e-9):
    """Exact ``Phi = Z C Z^*`` from the full stable spectrum."""
    if not spec.full:
        raise SpectrumError("the exact Cauchy Gramian needs the full spectrum")
    C = _cauchy_block(spec.eigvals, spec.Zinv, Bd, band)
    Phi = spec.Z @ C @ spec.Z.conj().T
    scale = max(np.abs(Phi).max(), np.finfo(float).tiny)
    if np.abs(Phi.imag).max() > imag_tol * scale:
        raise SpectrumError("Cauchy Gramian has a non-negligible imaginary part")
    Phi = Phi.real
    return 0.5 * (Phi + Phi.T)


@dataclass(frozen=True)
class LowRankGramian:
    """Real factor ``F`` with ``F F^T = Phi_kappa``.

    Attributes
    ----------
    factor : (N, kappa') real
    eigvals : retained eigenvalues (conjugate closed)
    kappa : requested rank
    bound : truncation error bound, ``nan`` if the tail is unavailable
    eta : eigenvector condition estimate
    """

    factor: np.ndarray
    eigvals: np.ndarray
    kappa: int
    bound: float
    eta: float
    backend: str

    @property
    def rank(self):
        return self.factor.shape[1]

    def gramian(self):
        return self.factor @ self.factor.T


def _psd_sqrt(C, rtol=1e-12, where=""):
    ev, U = la.eigh(C)
    top = max(ev.max(), 0.0)
    if ev.min() < -max(1e-9 * top, 1e-300):
        raise TruncationError(f"leading Cauchy block is indefinite (min eig {ev.min():.3e}){where}")
    ev = np.clip(ev, 0.0, None)
    ev[ev < rtol * top] = 0.0
    return U * np.sqrt(ev)


def _realify(Fc, k):
    """Real ``N x k`` factor with the same Gram matrix as the complex ``Fc``."""
    Fr = np.hstack([Fc.real, Fc.imag])
    U, s, _ = la.svd(Fr, full_matrices=False)
    return U[:, :k] * s[:k]


def lowrank_gramian(spec: HamiltonianSpectrum, Bd, band, kappa, *, bd_norms=None, skip=None):
    """Rank-``kappa'`` factor from the leading ``kappa'`` Hamiltonian modes.

    ``kappa'`` is ``kappa`` or ``kappa + 1`` so that no conjugate pair is
    split.  The error bound uses the tail of the spectrum when available.

    ``skip`` is an optional direction (the consensus vector) whose mode is
    left out of the selection; see
    :meth:`HamiltonianSpectrum.without_direction`.
    """
    if skip is not None:
        spec, _ = spec.without_direction(skip)
    k = spec.closure(kappa)
    lam = spec.eigvals[:k]
    Zinv = spec.Zinv[:k]
    if skip is not None and not spec.full:
        # pseudo-inverse over exactly the skipped direction and the selected
        # columns, so that whichever extra modes the iterative solver found
        # do not leak into the rows
        v = np.asarray(skip, dtype=float)
        Zinv = np.linalg.pinv(np.column_stack([v / np.linalg.norm(v), spec.Z[:, :k]]))[1:]
    C = _cauchy_block(lam, Zinv, Bd, band)
    window = f" over modes |lam| in [{abs(lam[0]):.3g}, {abs(lam[-1]):.3g}]"
    Fc = spec.Z[:, :k] @ _psd_sqrt(C, where=window)
    Bd = np.asarray(Bd, dtype=float)
    if spec.full:
        mass = float(np.sum(Bd**2)) if bd_norms is None else float(np.sum(np.square(bd_norms)))
        e = truncation_bound(spec.eigvals[k:], spec.eta, mass, band)
    else:
        e = float("nan")
    return LowRankGramian(_realify(Fc, k), lam, int(kappa), e, spec.eta, spec.backend)


def truncation_bound(tail, eta, n_d, band):
    """``e = sqrt(eta^2 n_d sum_tail -theta_c / (2 pi a))``.

    ``n_d`` may be replaced by the total squared column norm of ``Bd`` when
    its columns are not unit length.
    """
    tail = np.asarray(tail, dtype=complex)
    if tail.size == 0:
        return 0.0
    a = tail.real
    if np.any(a >= 0):
        raise StabilityError("tail contains non-stable eigenvalues", eigenvalues=tail)
    terms = -theta_c(tail, band) / (_TWO_PI * a)
    return float(np.sqrt(eta**2 * n_d * np.sum(terms)))


# ---------------------------------------------------------------------------
# export


def save_gramian(gram: LowRankGramian, json_path, csv_path, band):
    w = _omega(band)
    with open(json_path, "w") as fh:
        json.dump(
            {
                "factor": gram.factor.tolist(),
                "kappa": gram.kappa,
                "rank": gram.rank,
                "bound": None if np.isnan(gram.bound) else gram.bound,
                "eta": gram.eta,
                "omega": w,
                "backend": gram.backend,
            },
            fh,
        )
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["a", "b", "abs", "theta_c"])
        for lam in gram.eigvals:
            wr.writerow([repr(float(lam.real)), repr(float(lam.imag)), repr(float(abs(lam))), repr(float(theta_c(lam, w)))])
