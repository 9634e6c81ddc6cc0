"""Acceptance criteria 1-10.

Each test records a PASS/FAIL (or SKIPPED-NO-DATA) line that is printed in
the terminal summary.  Criterion 10 needs an exported model: set
``CTRLINV_NPCC_MODEL`` to a model JSON file (``ctrlinv model`` format).
"""

import functools
import os
import time

import numpy as np
import pytest
import scipy.linalg as la

from conftest import ACCEPTANCE
from ctrlinv import cluster as cl
from ctrlinv import evalsim as ev
from ctrlinv import fgram
from ctrlinv import hiersim as hs
from ctrlinv import sysmodel as sm
from ctrlinv.cplqr import default_weights, solve_cplqr
from ctrlinv.inversion import design_pipeline, reference_data


def _record(k, verdict, detail):
    """Merge results of parametrized runs; any failure wins."""
    if k in ACCEPTANCE:
        prev, text = ACCEPTANCE[k]
        verdict = "FAIL" if "FAIL" in (prev, verdict) else verdict
        detail = f"{text}; {detail}"
    ACCEPTANCE[k] = (verdict, detail)


def criterion(k):
    def deco(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            try:
                detail = fn(*a, **kw)
            except pytest.skip.Exception:
                _record(k, "SKIPPED-NO-DATA", "")
                raise
            except BaseException as exc:
                _record(k, "FAIL", str(exc).splitlines()[0][:200] if str(exc) else type(exc).__name__)
                raise
            _record(k, "PASS", detail or "")

        return run

    return deco


def _closed_loop_suite():
    """Ten consensus-stable synthetic models with 4n <= 80, as reference closed loops."""
    out = []
    for i, n in enumerate([2, 3, 4, 5, 6, 8, 10, 12, 16, 20]):
        m = sm.synth_random_model(n, seed=100 + i)
        W = default_weights(m)
        ref = reference_data(m, W.Q, W.R, 1.0)
        out.append((m, ref))
    return out


@pytest.fixture(scope="module")
def suite():
    return _closed_loop_suite()


@criterion(1)
@pytest.mark.parametrize("n", [5, 10, 20])
def test_c01_identity_recovery(n):
    t0 = time.perf_counter()
    m = sm.synth_random_model(n, seed=n)
    W = default_weights(m)
    ref = reference_data(m, W.Q, W.R, 1.0)
    ctrl, _ = design_pipeline(m, W.Q, W.R, r=n, reference=ref)
    K = ref.solution.K
    rel = np.linalg.norm(ctrl.K_hat - K) / np.linalg.norm(K)
    err = ev.matching_error(m, K, ctrl.K_hat, pair=ref.pair)
    elapsed = time.perf_counter() - t0
    assert rel < 1e-7, f"gain mismatch {rel:.3e}"
    assert err < 1e-6, f"matching error {err:.3e}"
    assert elapsed < 10.0, f"runtime {elapsed:.1f}s"
    return f"n={n}: |K^-K|/|K|={rel:.1e}, error={err:.1e}, {elapsed:.2f}s"


@criterion(2)
def test_c02_gramian_routes(suite):
    t0 = time.perf_counter()
    worst = 0.0
    for m, ref in suite:
        Acl = ref.solution.closed_loop_shifted
        Phi_l = fgram.gramian_lyap(Acl, m.Bd, 2.0)
        Phi_c = fgram.cauchy_gramian(ref.spectrum, m.Bd, 2.0)
        worst = max(worst, np.linalg.norm(Phi_c - Phi_l) / np.linalg.norm(Phi_l))
    scalar = fgram.gramian_lyap(np.array([[-1.0]]), np.array([[1.0]]), 1.0)[0, 0]
    elapsed = time.perf_counter() - t0
    assert worst < 1e-6, f"Cauchy vs Lyapunov {worst:.3e}"
    assert abs(scalar - np.arctan(1.0) / np.pi) < 1e-12, f"scalar {scalar!r}"
    assert elapsed < 30.0
    return f"{len(suite)} systems, worst rel diff {worst:.1e}, scalar err {abs(scalar - 0.25):.1e}"


@criterion(3)
def test_c03_norm_coherence(suite):
    worst = 0.0
    for m, ref in suite:
        sys = ev.ClosedLoopSystem(ref.solution.closed_loop_shifted, m.Bd, ev._default_C(m))
        a = ev.h2w_norm(sys, 2.0)
        b = ev.h2w_norm(sys, 2.0, method="quad")
        worst = max(worst, abs(a - b) / a)
    s = ev.ClosedLoopSystem(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    sq = ev.h2w_norm(s, 1.0, method="quad") ** 2
    assert worst < 1e-4, f"gramian vs quadrature {worst:.3e}"
    assert abs(sq - 0.25) < 1e-6
    return f"worst rel diff {worst:.1e}, scalar norm^2 {sq:.10f}"


@criterion(4)
def test_c04_consensus_suite():
    count = 0
    worst_inv = 0.0
    for n, seed in [(6, 0), (8, 1), (10, 2)]:
        m = sm.synth_random_model(n, seed=seed)
        W = default_weights(m)
        A = m.A
        tol = 1e-8 * np.linalg.norm(A, 2)
        refs = {e: reference_data(m, W.Q, W.R, e) for e in (0.5, 1.0, 2.0)}
        for r in range(1, n + 1):
            for dseed in (0, 1):
                gains = {}
                for e, ref in refs.items():
                    ctrl, _ = design_pipeline(m, W.Q, W.R, r=r, eps=e, seed=dseed, reference=ref, classify=False)
                    ev_ = la.eigvals(A - m.B @ ctrl.K_hat)
                    small = np.abs(ev_) < tol
                    assert small.sum() == 1, f"n={n} r={r} eps={e}: {small.sum()} eigenvalues below {tol:.1e}"
                    assert ev_[~small].real.max() < 0, f"n={n} r={r} eps={e}: unstable"
                    gains[e] = ctrl.K_hat
                    count += 1
                K1 = gains[1.0]
                for e in (0.5, 2.0):
                    d = np.linalg.norm(gains[e] - K1) / np.linalg.norm(K1)
                    worst_inv = max(worst_inv, d)
                    assert d < 1e-7, f"n={n} r={r}: eps={e} changes the gain by {d:.3e}"
    return f"{count} designs consensus stable, worst eps variation {worst_inv:.1e}"


def _gap_system(n, seed, fast=50.0):
    """Hurwitz closed loop with four slow modes and the rest near ``-fast``."""
    rng = np.random.default_rng(seed)
    N = 4 * n
    D = np.zeros((N, N))
    D[0:2, 0:2] = [[-0.2, 1.0], [-1.0, -0.2]]
    D[2, 2], D[3, 3] = -0.4, -0.7
    k = 4
    while k < N:
        if k + 1 < N and rng.random() < 0.5:
            a, b = -fast * (1 + rng.random()), fast * rng.random()
            D[k : k + 2, k : k + 2] = [[a, b], [-b, a]]
            k += 2
        else:
            D[k, k] = -fast * (1 + rng.random())
            k += 1
    V = np.eye(N) + 0.2 * rng.standard_normal((N, N)) / np.sqrt(N)
    A = V @ D @ np.linalg.inv(V)
    B = 1e-3 * rng.standard_normal((N, n))
    return A, B @ B.T, 1e-6 * np.eye(N), rng.standard_normal((N, 2)), cl.clustering_weight(rng.uniform(1, 5, n))


@criterion(5)
def test_c05_truncation_bound():
    rows = []
    n = 6
    for seed in range(6):
        A, G, Q, Bd, w = _gap_system(n, seed)
        spec = fgram.hamiltonian_spectrum(A, G, Q)
        X = spec.riccati_solution()
        Phi = fgram.gramian_lyap(A - G @ X, Bd, 2.0)
        half, _, _ = ev._sym_sqrt(Phi)
        g = fgram.lowrank_gramian(spec, Bd, 2.0, 4)
        for r in (2, 3):
            _, full = cl.brute_force_partition(cl.build_psi(half, w).Psi, w, r)
            _, trunc = cl.brute_force_partition(cl.build_psi(g.factor, w).Psi, w, r)
            gap = np.sqrt(full) - np.sqrt(trunc)
            rows.append((gap, g.bound))
            assert gap <= g.bound, f"seed={seed} r={r}: gap {gap:.3e} > e {g.bound:.3e}"
    worst = max(gp / b for gp, b in rows)
    return f"{len(rows)} instances on 6 gap systems, max gap/e = {worst:.2e}"


@criterion(6)
def test_c06_appendix_bounds():
    b1 = fx = stab_true = 0
    fx_unavailable = 0
    for n, seed in [(5, 0), (5, 1), (8, 0)]:
        m0 = sm.synth_random_model(n, seed=seed)
        for Bd in (None, np.eye(4 * n)):
            m = m0 if Bd is None else m0.with_disturbance(Bd)
            W = default_weights(m)
            ref = reference_data(m, W.Q, W.R, 1.0)
            for r in range(1, n + 1):
                ctrl, rep = design_pipeline(m, W.Q, W.R, r=r, reference=ref)
                ev.evaluate_design(m, ctrl, rep, ref, W.Q)
                Ahat = ref.A_eps - ref.G @ ctrl.X_hat
                stable = not np.any(la.eigvals(Ahat).real >= 0)
                if rep.stab_lhs < rep.stab_rhs:
                    stab_true += 1
                    assert stable, f"n={n} r={r}: stability test passed but the loop is unstable"
                if not stable:
                    continue
                Ephi = rep.extra["E_phi_half_fro"]
                lhs = rep.extra["error_abs"]
                assert lhs <= rep.gamma * Ephi * (1 + 1e-8) + 1e-14, f"n={n} r={r}: {lhs:.3e} > {rep.gamma * Ephi:.3e}"
                b1 += 1
                if rep.f_xi is None:
                    fx_unavailable += 1
                else:
                    # at r = n both sides vanish; allow round-off in X - X^
                    half = la.sqrtm(fgram.gramian_lyap(ref.solution.closed_loop_shifted, m.Bd, 2.0)).real
                    atol = 1e-10 * np.linalg.norm(ref.solution.X, 2) * np.linalg.norm(half, 2)
                    assert Ephi <= rep.f_xi * (1 + 1e-8) + atol, f"n={n} r={r}: |E Phi^1/2| {Ephi:.3e} > f {rep.f_xi:.3e}"
                    fx += 1
    return f"error bound on {b1} designs, f(xi) on {fx} ({fx_unavailable} unavailable), stability test true on {stab_true}"


@criterion(7)
def test_c07_clustering_identities():
    rng = np.random.default_rng(7)
    worst = 0.0
    for seed in range(10):
        m = sm.synth_random_model(int(rng.integers(3, 9)), seed=seed)
        W = default_weights(m)
        ref = reference_data(m, W.Q, W.R, 1.0)
        g = fgram.lowrank_gramian(ref.spectrum, m.Bd, 2.0, 4, skip=ref.pair.v0)
        w = cl.clustering_weight(m.M)
        psi = cl.build_psi(g.factor, w)
        for r in range(1, m.n + 1):
            labels = np.concatenate([np.arange(r), rng.integers(0, r, m.n - r)])
            rng.shuffle(labels)
            plan = cl.build_projection(cl.labels_to_clusters(labels, r), w)
            lhs = cl.xi_full(plan, g.factor) ** 2
            rhs = cl.kmeans_objective(psi.Psi, w, labels, r)
            worst = max(worst, abs(lhs - rhs))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, lhs)
    hits = 0
    for i in range(50):
        n, r = int(rng.integers(4, 9)), int(rng.integers(2, 4))
        m = sm.synth_random_model(n, seed=1000 + i)
        W = default_weights(m)
        ref = reference_data(m, W.Q, W.R, 1.0)
        g = fgram.lowrank_gramian(ref.spectrum, m.Bd, 2.0, 4, skip=ref.pair.v0)
        w = cl.clustering_weight(m.M)
        psi = cl.build_psi(g.factor, w)
        res = cl.lloyd_cluster(psi, w, r, seed=i, restarts=10)
        assert np.all(np.diff(res.trace) <= 1e-12 * max(res.trace[0], 1e-300)), "Lloyd trace increased"
        _, best = cl.brute_force_partition(psi.Psi, w, r)
        assert res.objective >= best * (1 - 1e-10) - 1e-15, "Lloyd beat the exhaustive optimum"
        hits += res.objective <= best * (1 + 1e-9) + 1e-15
    assert hits >= 40, f"global optimum in {hits}/50"
    return f"identity worst abs diff {worst:.1e}; Lloyd optimal in {hits}/50"


@criterion(8)
def test_c08_hierarchy():
    m = sm.synth_random_model(12, seed=8)
    ctrl, _ = design_pipeline(m, r=4)
    rng = np.random.default_rng(8)
    rep = hs.hierarchy_report(ctrl, rng.standard_normal((100, 4 * m.n)))
    assert rep["max_relative_deviation"] < 1e-12
    assert hs.link_budget(48, 11) == (103, 1128)
    return f"max deviation {rep['max_relative_deviation']:.1e}, (48, 11) -> (103, 1128)"


@criterion(9)
def test_c09_scaling_trend():
    t0 = time.perf_counter()
    rows, slopes = ev.bench_scaling([50, 100, 200, 400], r=4, kappa=4, seed=0, repeats=3, backend="arnoldi")
    ratios = [th / tr for _, tr, th, _ in rows]
    elapsed = time.perf_counter() - t0
    text = ", ".join(f"n={n}: {q:.3f}" for (n, *_), q in zip(rows, ratios))
    assert all(b < a for a, b in zip(ratios, ratios[1:])), f"ratios not strictly decreasing: {text}"
    assert elapsed < 900
    return f"time ratio {text}; {elapsed:.0f}s"


@criterion(10)
def test_c10_reference_dataset():
    path = os.environ.get("CTRLINV_NPCC_MODEL")
    if not path:
        pytest.skip("SKIPPED-NO-DATA: set CTRLINV_NPCC_MODEL to an exported model JSON")
    m = sm.load_model(path, check=True)
    W = default_weights(m)
    ref = reference_data(m, W.Q, W.R, 1.0)
    got = {}
    for r, target in ((6, 0.128), (11, 0.023)):
        ctrl, _ = design_pipeline(m, W.Q, W.R, band=2.0, kappa=4, r=r, reference=ref)
        got[r] = ev.matching_error(m, ref.solution.K, ctrl.K_hat, band=2.0, pair=ref.pair)
        assert abs(got[r] - target) <= 0.03, f"r={r}: {100 * got[r]:.1f}% vs {100 * target:.1f}%"
    return f"r=6: {100 * got[6]:.1f}%, r=11: {100 * got[11]:.1f}%"
