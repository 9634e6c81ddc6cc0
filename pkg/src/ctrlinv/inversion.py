"""Control inversion: project, solve a small CPLQR, inverse-project.

Given a cluster plan with projection ``Pi = I_4 kron P`` the reduced model
``(Pi A Pi^T, Pi B, Pi Q Pi^T, R)`` is built block by block, its
consensus-preserving ARE is solved for ``X~``, and the full-order gain is

    K^ = R^{-1} B^T Pi^T X~ Pi = (R^{-1} B~^T) X~ Pi,

which never forms the ``4n x 4n`` matrix ``X^``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as la

from . import cluster as cl
from . import fgram
from .cplqr import (
    closed_loop_verdict,
    consensus_pair,
    default_weights,
    shift_consensus,
    solve_cplqr,
)
from .errors import CtrlInvError, PlanError, RiccatiError, StageError
from .sysmodel import LinearModel, block_state_matrix

__all__ = [
    "ReducedModel",
    "InvertedController",
    "DesignReport",
    "project_model",
    "reduced_cplqr",
    "invert",
    "design_pipeline",
    "controller_to_dict",
]


@dataclass(frozen=True)
class ReducedModel:
    A: np.ndarray
    B: np.ndarray
    Bd: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    v0: np.ndarray
    blocks: dict
    plan: cl.ClusterPlan


def _proj_block(P, X):
    return P @ X @ P.T


def project_model(model: LinearModel, plan: cl.ClusterPlan, Q, R, *, weight_tol=1e-9):
    """Reduced model with the block structure of the full one.

    The plan weight must equal the consensus vector of the model; otherwise
    the projected state matrix loses its zero eigenvalue.
    """
    if plan.n != model.n:
        raise PlanError(f"plan covers {plan.n} generators, model has {model.n}")
    if np.linalg.norm(plan.w - model.vbar) > weight_tol:
        raise PlanError("plan weight differs from the consensus vector; the projected loop would not keep the consensus mode")
    P = plan.P
    blocks = {name: _proj_block(P, getattr(model, name)) for name in ("L1m", "L2m", "L3m", "Dm", "F1m", "F2m", "F3m", "T3", "T4")}
    blocks["B1"] = P @ model.B1
    A = block_state_matrix(*(blocks[k] for k in ("L1m", "L2m", "L3m", "Dm", "F1m", "F2m", "F3m", "T3", "T4")))
    r = plan.r
    B = np.zeros((4 * r, model.n))
    B[3 * r :] = blocks["B1"]
    Qr = plan.apply(plan.apply(np.asarray(Q, dtype=float)).T)
    Qr = 0.5 * (Qr + Qr.T)
    return ReducedModel(
        A=A,
        B=B,
        Bd=plan.apply(model.Bd),
        Q=Qr,
        R=np.atleast_2d(np.asarray(R, dtype=float)),
        v0=plan.apply(model.v0),
        blocks=blocks,
        plan=plan,
    )


def reduced_cplqr(rm: ReducedModel, eps=1.0):
    """Consensus-preserving ARE in reduced coordinates.

    The reduced consensus pair is recomputed from ``A~`` and checked to be
    parallel to ``Pi v0``.
    """
    pair = consensus_pair(rm.A, check=False, v0_hint=rm.v0)
    cosang = abs(pair.v0 @ rm.v0) / np.linalg.norm(rm.v0)
    if abs(cosang - 1.0) > 1e-9:
        raise RiccatiError(f"reduced null vector is not parallel to Pi v0 (cos = {cosang:.12f})")
    return solve_cplqr(rm.A, rm.B, rm.Q, rm.R, eps, pair=pair)


@dataclass(frozen=True)
class InvertedController:
    """``K^ = L X~ Pi`` with ``L = R^{-1} B~^T``.

    Attributes
    ----------
    X_tilde : (4r, 4r)
    L : (n, 4r)
        ``R^{-1} B^T Pi^T``.
    K_hat : (n, 4n)
    plan : ClusterPlan
    epsilon : float
    """

    X_tilde: np.ndarray
    L: np.ndarray
    K_hat: np.ndarray
    plan: cl.ClusterPlan
    epsilon: float
    verdict: dict | None = None

    @cached_property
    def X_hat(self):
        return self.plan.apply_T(self.plan.apply_T(self.X_tilde).T)


def invert(X_tilde, plan: cl.ClusterPlan, B, R, eps=1.0, A=None):
    """Inverse projection of ``X~`` to the full-order gain ``K^``.

    With ``A`` given, the closed-loop spectrum of ``A - B K^`` is classified
    and stored as :attr:`InvertedController.verdict` (no exception when the
    loop is not consensus stable).
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Bt = plan.apply(np.asarray(B, dtype=float))
    L = la.solve(R, Bt.T, assume_a="pos")
    K_hat = plan.apply_T((L @ X_tilde).T).T
    verdict = None
    if A is not None:
        verdict = closed_loop_verdict(np.asarray(A) - np.asarray(B) @ K_hat)
    return InvertedController(np.asarray(X_tilde), L, K_hat, plan, float(eps), verdict)


@dataclass
class DesignReport:
    """Summary of one design run; evaluation fields are filled by evalsim."""

    n: int
    r: int
    kappa: int
    kappa_eff: int
    omega: float
    epsilon: float
    seed: int
    backend: str
    xi_kappa: float
    bound: float
    eta: float
    objective_trace: tuple
    clusters: tuple
    timings_ms: dict
    xi: float | None = None
    error: float | None = None
    gamma: float | None = None
    stab_lhs: float | None = None
    stab_rhs: float | None = None
    f_xi: float | None = None
    consensus_stable: bool | None = None
    closed_loop_eigs: np.ndarray | None = None
    links: tuple | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                v = [[float(z.real), float(z.imag)] for z in v] if np.iscomplexobj(v) else v.tolist()
            elif isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            elif isinstance(v, float) and not np.isfinite(v):
                v = None
            d[k] = v
        return d


@dataclass(frozen=True)
class Reference:
    """Reference design data shared between pipeline runs."""

    pair: object
    A_eps: np.ndarray
    G: np.ndarray
    solution: object | None
    spectrum: fgram.HamiltonianSpectrum


def reference_data(model, Q, R, eps=1.0, kappa=None, backend="dense", seed=0):
    """Consensus pair, shifted matrix and Hamiltonian spectrum of the reference.

    The dense backend also solves the full CPLQR; the Arnoldi backend only
    computes the ``kappa`` leading Hamiltonian modes plus the consensus mode.
    """
    A, B = model.A, model.B
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if backend == "dense":
        sol = solve_cplqr(A, B, Q, R, eps)
        spec = fgram.hamiltonian_spectrum(sol.A_eps, sol.G, Q)
        return Reference(sol.pair, sol.A_eps, sol.G, sol, spec)
    pair = consensus_pair(A, check=False, v0_hint=model.v0)
    A_eps = shift_consensus(A, pair, eps)
    G = B @ la.solve(R, B.T, assume_a="pos")
    k = None if kappa is None else kappa + 1
    spec = fgram.hamiltonian_spectrum(A_eps, G, Q, k, backend=backend, seed=seed)
    return Reference(pair, A_eps, G, None, spec)


def stage_seeds(seed):
    """Independent integer seeds for the random stages of one design.

    Derived from ``seed`` with :class:`numpy.random.SeedSequence`: child 0
    drives clustering, child 1 the Arnoldi start vector.
    """
    kids = np.random.SeedSequence(int(seed)).spawn(2)
    return {"cluster": int(kids[0].generate_state(1)[0]), "arnoldi": int(kids[1].generate_state(1)[0])}


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except CtrlInvError as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = 1e3 * (time.perf_counter() - t0)
        return out


def design_pipeline(
    model: LinearModel,
    Q=None,
    R=None,
    Bd=None,
    band=2.0,
    kappa=4,
    r=None,
    eps=1.0,
    seed=0,
    *,
    restarts=10,
    max_iter=100,
    init="kmeans++",
    backend="dense",
    reference=None,
    classify=True,
):
    """End-to-end design of the clustered controller.

    Parameters
    ----------
    model : LinearModel
    Q, R : weights; default to :func:`ctrlinv.cplqr.default_weights`.
    Bd : disturbance matrix; defaults to ``model.Bd``.
    band : band edge in rad/s.
    kappa : Gramian rank before conjugate closure; the consensus mode is
        not counted.
    r : number of clusters (default ``n``).
    backend : {"dense", "arnoldi"}
        Spectrum path for the clustering Gramian.
    reference : Reference, optional
        Precomputed :func:`reference_data` to reuse across runs.
    classify : bool
        Classify the closed-loop spectrum of ``A - B K^`` (dense eigensolve).

    Returns
    -------
    (InvertedController, DesignReport)
    """
    if Q is None or R is None:
        W = default_weights(model)
        Q = W.Q if Q is None else Q
        R = W.R if R is None else R
    Q = np.asarray(Q, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Bd = model.Bd if Bd is None else np.asarray(Bd, dtype=float)
    r = model.n if r is None else int(r)
    omega = fgram.FreqBand(band).omega
    if not 1 <= r <= model.n:
        raise StageError("input", PlanError(f"r must lie in 1..{model.n}, got {r}"))
    if not 1 <= kappa <= 4 * model.n - 1:
        raise StageError("input", PlanError(f"kappa must lie in 1..{4 * model.n - 1}, got {kappa}"))
    seeds = stage_seeds(seed)
    st = _Stages()
    w = st.run("weight", cl.clustering_weight, model.M)
    if reference is None:
        reference = st.run("reference", reference_data, model, Q, R, eps, kappa, backend, seeds["arnoldi"])
    gram = st.run("gramian", fgram.lowrank_gramian, reference.spectrum, Bd, omega, kappa, skip=reference.pair.v0)
    psi = st.run("psi", cl.build_psi, gram.factor, w)
    res = st.run("cluster", cl.lloyd_cluster, psi, w, r, seeds["cluster"], max_iter, restarts, init)
    plan = st.run("projection", cl.build_projection, res.clusters, w)
    rm = st.run("project", project_model, model, plan, Q, R)
    rsol = st.run("reduced_cplqr", reduced_cplqr, rm, eps)
    ctrl = st.run("invert", invert, rsol.X, plan, model.B, R, eps, model.A if classify else None)
    report = DesignReport(
        n=model.n,
        r=r,
        kappa=int(kappa),
        kappa_eff=gram.rank,
        omega=omega,
        epsilon=float(eps),
        seed=int(seed),
        backend=reference.spectrum.backend,
        xi_kappa=cl.xi_kappa(plan, psi),
        bound=gram.bound,
        eta=gram.eta,
        objective_trace=res.trace,
        clusters=plan.clusters,
        timings_ms=st.timings,
    )
    if ctrl.verdict is not None:
        report.consensus_stable = ctrl.verdict["consensus_stable"]
        report.closed_loop_eigs = ctrl.verdict["eigs"]
    return ctrl, report


def controller_to_dict(ctrl: InvertedController, report: DesignReport | None = None):
    d = {
        "K_hat": ctrl.K_hat.tolist(),
        "X_tilde": ctrl.X_tilde.tolist(),
        "plan": cl.plan_to_dict(ctrl.plan),
        "epsilon": ctrl.epsilon,
        "closed_loop_eigs": None,
        "stage_timings_ms": None,
    }
    if ctrl.verdict is not None:
        d["closed_loop_eigs"] = [[float(e.real), float(e.imag)] for e in ctrl.verdict["eigs"]]
    if report is not None:
        d["stage_timings_ms"] = report.timings_ms
    return d


__all__ += ["Reference", "reference_data", "stage_seeds"]
