"""Closed-loop evaluation, diagnostics, simulation and benchmarks."""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.optimize import minimize_scalar

from . import fgram
from .cplqr import closed_loop_verdict, consensus_pair, default_weights, shift_consensus, solve_cplqr
from .errors import ParameterError, StabilityError
from .inversion import design_pipeline, reference_data
from .sysmodel import OutputSpec, build_output

__all__ = [
    "ClosedLoopSystem",
    "h2w_norm",
    "h2w_quadrature",
    "matching_error",
    "error_realization",
    "cascade_h2w",
    "gamma_estimate",
    "stability_condition",
    "FXiBound",
    "f_xi_bound",
    "simulate_impulse",
    "sweep_r",
    "bench_scaling",
    "write_csv",
    "loglog_slope",
    "evaluate_design",
]


@dataclass(frozen=True)
class ClosedLoopSystem:
    A: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    tag: str = ""

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        N = A.shape[0]
        Bd = np.asarray(self.Bd, dtype=float).reshape(N, -1)
        C = np.asarray(self.C, dtype=float).reshape(-1, N)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Bd", Bd)
        object.__setattr__(self, "C", C)

    def require_hurwitz(self):
        ev = la.eigvals(self.A)
        if np.any(ev.real >= 0):
            raise StabilityError(
                f"{self.tag or 'system'} is not Hurwitz; evaluate the shifted realization A - eps v0 w0^T instead",
                eigenvalues=ev,
            )
        return ev

    def freqresp(self, omegas):
        """``C (i w I - A)^{-1} Bd`` for each ``w`` (stacked on axis 0)."""
        omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
        N = self.A.shape[0]
        # Hessenberg form makes each shifted solve cheaper and keeps accuracy
        Hh, U = la.hessenberg(self.A, calc_q=True)
        Bh = U.T @ self.Bd
        Ch = self.C @ U
        out = np.empty((omegas.size, self.C.shape[0], self.Bd.shape[1]), dtype=complex)
        eye = np.eye(N)
        for k, w in enumerate(omegas):
            out[k] = Ch @ la.solve(1j * w * eye - Hh, Bh)
        return out


def h2w_norm(sys: ClosedLoopSystem, band, method="gramian", **kw):
    """Band-limited H2 norm ``sqrt((1/2pi) int_{-w}^{w} tr h^* h)``.

    ``method="gramian"`` uses the Lyapunov Gramian; ``"quad"`` integrates
    the frequency response with adaptive Simpson.
    """
    sys.require_hurwitz()
    if method == "gramian":
        Phi = fgram.gramian_lyap(sys.A, sys.Bd, band)
        return float(np.sqrt(max(np.trace(sys.C @ Phi @ sys.C.T), 0.0)))
    if method == "quad":
        return float(np.sqrt(h2w_quadrature(sys, band, **kw)))
    raise ParameterError(f"unknown method {method!r}")


def _simpson_adaptive(f, a, b, rtol, max_evals):
    """Vectorised adaptive Simpson; ``f`` maps an array of nodes to values."""
    fa, fm, fb = f(np.array([a, 0.5 * (a + b), b]))
    evals = 3
    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    intervals = [(a, b, fa, fm, fb, whole)]
    done = 0.0
    total_est = abs(whole)
    converged = True
    while intervals:
        if evals + 2 * len(intervals) > max_evals:
            converged = False
            done += sum(iv[5] for iv in intervals)
            break
        mids = np.array([[0.5 * (iv[0] + 0.5 * (iv[0] + iv[1])), 0.5 * (0.5 * (iv[0] + iv[1]) + iv[1])] for iv in intervals])
        vals = f(mids.ravel()).reshape(-1, 2)
        evals += mids.size
        nxt = []
        for (lo, hi, flo, fmid, fhi, est), (fl, fr) in zip(intervals, vals):
            m = 0.5 * (lo + hi)
            left = (m - lo) / 6 * (flo + 4 * fl + fmid)
            right = (hi - m) / 6 * (fmid + 4 * fr + fhi)
            diff = left + right - est
            tol = rtol * max(total_est, 1e-300) * (hi - lo) / (b - a)
            if abs(diff) <= 15 * tol:
                done += left + right + diff / 15
            else:
                nxt.append((lo, m, flo, fl, fmid, left))
                nxt.append((m, hi, fmid, fr, fhi, right))
        intervals = nxt
        total_est = abs(done + sum(iv[5] for iv in intervals))
    return done, evals, converged


def h2w_quadrature(sys: ClosedLoopSystem, band, rtol=1e-8, max_evals=2**14):
    """Squared band-limited H2 norm by adaptive Simpson quadrature."""
    w = fgram.FreqBand(band).omega

    def f(om):
        H = sys.freqresp(om)
        return np.sum(np.abs(H) ** 2, axis=(1, 2))

    # the integrand is even for real systems
    val, _, ok = _simpson_adaptive(f, 0.0, w, rtol, max_evals)
    if not ok:
        warnings.warn("quadrature hit its evaluation cap", RuntimeWarning, stacklevel=2)
    return 2.0 * val / (2.0 * np.pi)


def error_realization(A1, A2, Bd, C, D12=None):
    """Realization of ``C (sI-A1)^{-1} Bd - C (sI-A2)^{-1} Bd``.

    With ``D12 = A1 - A2`` supplied, the cascade form
    ``C (sI-A2)^{-1} D12 (sI-A1)^{-1} Bd`` is returned; it vanishes exactly
    when the two loops coincide.
    """
    N = A1.shape[0]
    A = np.zeros((2 * N, 2 * N))
    A[:N, :N], A[N:, N:] = A1, A2
    if D12 is None:
        return ClosedLoopSystem(A, np.vstack([Bd, Bd]), np.hstack([C, -C]), tag="error")
    A[N:, :N] = D12
    return ClosedLoopSystem(A, np.vstack([Bd, np.zeros_like(Bd)]), np.hstack([np.zeros_like(C), C]), tag="error")


def cascade_h2w(A1, A2, D12, Bd, C, band):
    """Band-limited H2 norm of ``C (sI-A2)^{-1} D12 (sI-A1)^{-1} Bd``.

    The Gramian of the block-triangular realization is solved block by
    block, so the output block, which is quadratic in ``D12``, keeps its
    relative accuracy when ``D12`` is tiny.
    """
    N = A1.shape[0]
    sysr = error_realization(A1, A2, Bd, C, D12)
    sysr.require_hurwitz()
    S = fgram.s_matrix(sysr.A, band, method="schur")
    S1, S21 = S[:N, :N], S[N:, :N]
    BB = Bd @ Bd.T
    W11 = S1 @ BB
    P11 = la.solve_continuous_lyapunov(A1, -(W11 + W11.T))
    P21 = la.solve_sylvester(A2, A1.T, -(D12 @ P11 + S21 @ BB))
    W22 = D12 @ P21.T
    P22 = la.solve_continuous_lyapunov(A2, -(W22 + W22.T))
    return float(np.sqrt(max(np.trace(C @ P22 @ C.T), 0.0)))


def _default_C(model):
    return build_output(OutputSpec.reference_to_first(model.n), model.M)


def matching_error(model, K, K_hat, Bd=None, C=None, band=2.0, eps=1.0, pair=None, normalized=True):
    """Normalized band-limited matching error ``||g_eps - g^_eps|| / ||g_eps||``.

    With ``normalized=False`` the absolute error is returned.  Both loops are evaluated in the shifted realization ``A_eps - B K``;
    a candidate whose nonzero closed-loop spectrum is not strictly stable
    raises :class:`StabilityError` carrying the eigenvalues.
    """
    A, B = model.A, model.B
    Bd = model.Bd if Bd is None else np.asarray(Bd, dtype=float)
    C = _default_C(model) if C is None else np.asarray(C, dtype=float)
    pair = consensus_pair(A, check=False, v0_hint=model.v0) if pair is None else pair
    A_eps = shift_consensus(A, pair, eps)
    A1 = A_eps - B @ K
    A2 = A_eps - B @ K_hat
    ev2 = la.eigvals(A2)
    if np.any(ev2.real >= 0):
        raise StabilityError("candidate closed loop is not consensus stable; matching error undefined", eigenvalues=ev2)
    err = cascade_h2w(A1, A2, B @ (K_hat - K), Bd, C, band)
    if not normalized:
        return err
    return err / h2w_norm(ClosedLoopSystem(A1, Bd, C, "reference"), band)


def gamma_estimate(A_hat_cl, G, C, band, grid_points=64, max_points=2**14, rtol=1e-3):
    """Gridded band-limited H-infinity norm of ``C (sI - A_hat_cl)^{-1} G``.

    The grid on ``[0, w]`` is doubled until the maximum changes by less than
    ``rtol``; the best grid point is then polished by a bounded scalar
    search.  Returns ``(gamma, converged)``.
    """
    w = fgram.FreqBand(band).omega
    sys = ClosedLoopSystem(A_hat_cl, G, C)
    sys.require_hurwitz()

    def sig(om):
        return np.array([la.svdvals(h)[0] for h in sys.freqresp(om)])

    m = max(int(grid_points), 2)
    grid = np.linspace(0.0, w, m)
    vals = sig(grid)
    best = vals.max()
    converged = False
    while 2 * m - 1 <= max_points:
        new = 0.5 * (grid[:-1] + grid[1:])
        nv = sig(new)
        m = 2 * m - 1
        grid = np.linspace(0.0, w, m)
        merged = np.empty(m)
        merged[::2], merged[1::2] = vals, nv
        vals = merged
        nb = max(best, nv.max())
        if nb - best <= rtol * nb:
            best = nb
            converged = True
            break
        best = nb
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        opt = minimize_scalar(lambda x: -sig([x])[0], bounds=(lo, hi), method="bounded", options={"xatol": 1e-10 * max(w, 1.0)})
        best = max(best, -opt.fun)
    if not converged:
        warnings.warn("gamma grid refinement reached its cap", RuntimeWarning, stacklevel=2)
    return float(best), converged


def stability_condition(E, Phi_half, G, Bd):
    """``(lhs, rhs, lhs < rhs)`` of the sufficient stability test."""
    s = lambda M: la.svdvals(M)  # noqa: E731
    lhs = s(E @ Phi_half)[0] * s(G)[0] * s(Phi_half)[0]
    BBt = Bd @ Bd.T
    sv = s(BBt)
    rhs = float(sv[-1]) if sv.size == BBt.shape[0] else 0.0
    if rhs < 1e-14 * max(sv[0], 1e-300):
        rhs = 0.0
    return float(lhs), rhs, bool(lhs < rhs)


@dataclass(frozen=True)
class FXiBound:
    value: float
    eps1: float
    eps2: float
    eps3: float
    beta: float
    available: bool


def _sym_sqrt(Phi):
    ev, U = la.eigh(0.5 * (Phi + Phi.T))
    ev = np.clip(ev, 0.0, None)
    return (U * np.sqrt(ev)) @ U.T, ev, U


def f_xi_bound(xi, A_eps, G, X, Phi, Q, beta, cond_cap=1e14):
    """``f(xi) = eps1 sigma(Q) xi^2 + 2 eps1 eps2 xi`` with its constants.

    ``Phi`` is the exact band-limited Gramian of ``A_eps - G X``; its
    symmetric square root is used throughout.  When ``Phi`` is numerically
    singular the bound is reported as unavailable (``value = inf``).
    """
    half, ev, U = _sym_sqrt(Phi)
    top = ev.max()
    if ev.min() <= top / cond_cap:
        return FXiBound(np.inf, np.inf, np.nan, np.nan, float(beta), False)
    ihalf = (U / np.sqrt(ev)) @ U.T
    Acl = A_eps - G @ X
    smax = lambda M: la.svdvals(M)[0]  # noqa: E731
    eps1 = smax(ihalf) / la.svdvals(ihalf @ Acl @ half)[-1]
    eps2 = beta * smax(A_eps) * smax(half) + smax(Q @ half)
    eps3 = (beta**2 + 1.0) * smax(Phi)
    val = eps1 * smax(Q) * xi**2 + 2.0 * eps1 * eps2 * xi
    return FXiBound(float(val), float(eps1), float(eps2), float(eps3), float(beta), True)


def simulate_impulse(sys: ClosedLoopSystem, horizon_s, dt_s, *, check_times=10):
    """Impulse response by fixed-step RK4 from ``x(0) = Bd``.

    Returns ``(t, Y, info)`` with ``Y`` of shape ``(len(t), p * n_d)``
    ordered output-major within each disturbance column, and ``info``
    holding the deviation from the matrix exponential at ``check_times``
    sample times (relative to the peak output) and the stability/step-size flags.
    """
    A, Bd, C = sys.A, sys.Bd, sys.C
    N = A.shape[0]
    steps = int(round(horizon_s / dt_s))
    if steps < 1:
        raise ParameterError("horizon must cover at least one step")
    ev = la.eigvals(A)
    fastest = np.abs(ev).max()
    info = {
        "unstable": bool(np.any(ev.real > 1e-10 * max(1.0, fastest))),
        "dt_warning": bool(fastest > 0 and dt_s > 1e-2 / fastest),
    }
    if info["unstable"]:
        warnings.warn("simulating an unstable system", RuntimeWarning, stacklevel=2)
    h = dt_s
    # RK4 amplification on each eigenvalue; sub-step until the stable modes stay damped
    sub = 1
    while True:
        z = ev * h / sub
        amp = np.abs(1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24)
        if info["unstable"] or np.all(amp[ev.real < 0] <= 1.0) or sub >= 2**20:
            break
        sub *= 2
    info["substeps"] = sub
    hA = (h / sub) * A
    # one RK4 step of a linear system is multiplication by this polynomial
    step = np.eye(N) + hA @ (np.eye(N) + hA @ (np.eye(N) / 2 + hA @ (np.eye(N) / 6 + hA / 24)))
    if sub > 1:
        step = np.linalg.matrix_power(step, sub)
    X = Bd.copy()
    t = np.arange(steps + 1) * h
    Y = np.empty((steps + 1, C.shape[0] * Bd.shape[1]))
    states = {}
    idx_check = np.unique(np.linspace(0, steps, check_times).round().astype(int))
    for k in range(steps + 1):
        Y[k] = (C @ X).T.ravel()
        if k in idx_check:
            states[k] = X.copy()
        X = step @ X
    dev = 0.0
    scale = max(float(np.abs(Y).max()), np.finfo(float).tiny)
    for k, Xk in states.items():
        Xe = la.expm(A * t[k]) @ Bd
        dev = max(dev, float(np.abs(C @ Xk - C @ Xe).max()) / scale)
    info["expm_deviation"] = float(dev)
    return t, Y, info


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def evaluate_design(model, ctrl, report, reference, Q, Bd=None, C=None, exact=True, beta=None, gamma_grid=64):
    """Fill the evaluation fields of a :class:`DesignReport`.

    Requires a dense reference (``reference.solution`` set).  With ``exact``
    the full band-limited Gramian is used for ``xi``, the stability test and
    ``f(xi)``.
    """
    from .cluster import xi_full

    sol = reference.solution
    Bd = model.Bd if Bd is None else np.asarray(Bd, dtype=float)
    C = _default_C(model) if C is None else C
    Acl = sol.closed_loop_shifted
    Ahat = reference.A_eps - reference.G @ ctrl.X_hat
    stable = not np.any(la.eigvals(Ahat).real >= 0)
    report.consensus_stable = stable if report.consensus_stable is None else report.consensus_stable
    if stable:
        abs_err = matching_error(model, sol.K, ctrl.K_hat, Bd, C, report.omega, sol.epsilon, sol.pair, normalized=False)
        ref_norm = h2w_norm(ClosedLoopSystem(Acl, Bd, C, "reference"), report.omega)
        report.error = abs_err / ref_norm
        report.extra["error_abs"], report.extra["ref_norm"] = abs_err, ref_norm
        report.gamma, _ = gamma_estimate(Ahat, reference.G, C, report.omega, gamma_grid)
    if exact:
        Phi = fgram.gramian_lyap(Acl, Bd, report.omega)
        half, _, _ = _sym_sqrt(Phi)
        report.xi = xi_full(ctrl.plan, half)
        E = sol.X - ctrl.X_hat
        report.stab_lhs, report.stab_rhs, _ = stability_condition(E, half, reference.G, Bd)
        b = 2.0 * la.svdvals(ctrl.X_tilde)[0] if beta is None else beta
        fb = f_xi_bound(report.xi, reference.A_eps, reference.G, sol.X, Phi, Q, b)
        report.f_xi = fb.value if fb.available else None
        report.extra["E_phi_half_fro"] = float(np.linalg.norm(E @ half))
        report.extra["eps1"], report.extra["eps2"], report.extra["eps3"] = fb.eps1, fb.eps2, fb.eps3
        report.extra["beta"] = fb.beta
    return report


def _sweep_row(args):
    model, Q, R, ref, C, r, band, kappa, eps, seed, restarts, max_iter = args
    t0 = time.perf_counter()
    ctrl, rep = design_pipeline(model, Q, R, band=band, kappa=kappa, r=r, eps=eps, seed=seed, restarts=restarts, max_iter=max_iter, reference=ref)
    elapsed = 1e3 * (time.perf_counter() - t0)
    try:
        err = matching_error(model, ref.solution.K, ctrl.K_hat, model.Bd, C, band, eps, ref.pair)
    except StabilityError:
        err = float("nan")
    return (int(r), rep.xi_kappa, err, bool(rep.consensus_stable), elapsed)


def sweep_r(model, r_list, Q=None, R=None, band=2.0, kappa=4, eps=1.0, seed=0, restarts=10, max_iter=100, C=None, workers=1):
    """Design and evaluate one controller per ``r``.

    Returns rows ``(r, xi_kappa, error, consensus, time_ms)`` in the order
    of ``r_list``; ``error`` is ``nan`` when the candidate loop is not
    consensus stable.  Rows are independent and run in a process pool when
    ``workers > 1``.
    """
    if Q is None or R is None:
        W = default_weights(model)
        Q = W.Q if Q is None else Q
        R = W.R if R is None else R
    ref = reference_data(model, Q, R, eps)
    C = _default_C(model) if C is None else C
    jobs = [(model, Q, R, ref, C, int(r), band, kappa, eps, seed, restarts, max_iter) for r in r_list]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_row, jobs))
    return [_sweep_row(j) for j in jobs]


def loglog_slope(x, y):
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def bench_scaling(n_list, r=4, kappa=4, seed=0, repeats=3, band=2.0, eps=1.0, backend="arnoldi", n_d=None):
    """Wall-clock medians of the reference CPLQR and the clustered design.

    Returns ``(rows, slopes)`` where each row is
    ``(n, t_ref_ms, t_hat_total_ms, {stage: ms})`` and ``slopes`` holds the
    log-log slopes of both totals and of the slowest design stage.
    """
    from .sysmodel import synth_random_model

    n_list = list(n_list)
    if n_list != sorted(n_list):
        raise ParameterError("sizes must be sorted ascending")
    rows = []
    for n in n_list:
        model = synth_random_model(n, n_d=n_d, seed=seed)
        W = default_weights(model)
        t_ref, t_hat, stages = [], [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            solve_cplqr(model.A, model.B, W.Q, W.R, eps)
            t_ref.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            _, rep = design_pipeline(model, W.Q, W.R, band=band, kappa=kappa, r=min(r, n), eps=eps, seed=seed, backend=backend, classify=False)
            t_hat.append(time.perf_counter() - t0)
            stages.append(rep.timings_ms)
        med = {k: float(np.median([s[k] for s in stages])) for k in stages[0]}
        rows.append((n, 1e3 * float(np.median(t_ref)), 1e3 * float(np.median(t_hat)), med))
    ns = [row[0] for row in rows]
    slopes = {}
    if len(rows) >= 2:
        slopes["ref"] = loglog_slope(ns, [row[1] for row in rows])
        slopes["hat"] = loglog_slope(ns, [row[2] for row in rows])
        dom = max(rows[-1][3], key=rows[-1][3].get)
        slopes["dominant_stage"] = dom
        slopes["dominant"] = loglog_slope(ns, [row[3][dom] for row in rows])
    return rows, slopes


def closed_loop_summary(A_cl):
    return closed_loop_verdict(A_cl)
