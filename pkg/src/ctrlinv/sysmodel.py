"""Linearized multi-machine power-system model.

Flux-decay generator model with a fast exciter, linearized about a given
equilibrium, Kron-reduced to the generator buses and mass-scaled so that the
state is ``x = (I_4 kron M^{1/2}) [d_delta, d_Omega, d_Eq', d_Efd]``.

The state matrix has the block form::

    [ 0     I     0     0   ]
    [ L1m  -Dm    F1m   0   ]
    [ L2m   0     F2m   T3  ]
    [ L3m   0     F3m  -T4  ]

with ``T3 = T'_do^{-1}`` and ``T4 = T_A^{-1}`` (both diagonal; they commute
with the mass scaling) and input matrix ``B = [0; 0; 0; B1]``,
``B1 = M^{1/2} T_A^{-1}``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as la

from .errors import (
    ConsensusError,
    ModelFileError,
    OutputSpecError,
    ParameterError,
    ReductionError,
    SynthesisError,
)

__all__ = [
    "GeneratorParams",
    "NetworkAdmittance",
    "LinearModel",
    "OutputSpec",
    "kron_reduce",
    "linearize",
    "assemble",
    "unscaled_state_matrix",
    "synth_random_model",
    "synth_network",
    "build_output",
    "block_state_matrix",
    "zero_tolerance",
    "consensus_spectrum",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

BLOCK_NAMES = ("L1m", "L2m", "L3m", "Dm", "F1m", "F2m", "F3m", "T3", "T4", "B1")


@dataclass(frozen=True)
class GeneratorParams:
    """Parameters and equilibrium of one flux-decay machine."""

    M: float
    D: float
    Tdo: float
    TA: float
    KA: float
    xd: float
    xdp: float
    delta0: float
    Eq0: float

    def validate(self, index=None):
        tag = "" if index is None else f"generator {index + 1}: "
        if not self.M > 0:
            raise ParameterError(f"{tag}inertia M must be positive, got {self.M}")
        if not self.Tdo > 0:
            raise ParameterError(f"{tag}T'do must be positive, got {self.Tdo}")
        if not self.TA > 0:
            raise ParameterError(f"{tag}T_A must be positive, got {self.TA}")
        if not (self.xd >= self.xdp > 0):
            raise ParameterError(f"{tag}need xd >= x'd > 0, got xd={self.xd}, x'd={self.xdp}")
        return self


def _stack_params(params: Sequence[GeneratorParams]):
    if len(params) == 0:
        raise ParameterError("at least one generator is required")
    for i, p in enumerate(params):
        p.validate(i)
    names = GeneratorParams.__dataclass_fields__.keys()
    return {k: np.array([getattr(p, k) for p in params], dtype=float) for k in names}


@dataclass(frozen=True)
class NetworkAdmittance:
    """Bus admittance matrix; buses ``0..n-1`` are generator buses."""

    Y: np.ndarray
    n: int

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=complex)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
            raise ParameterError("admittance matrix must be square")
        if not 1 <= self.n <= Y.shape[0]:
            raise ParameterError(f"generator count {self.n} out of range for {Y.shape[0]} buses")
        if not np.allclose(Y, Y.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(Y).max())):
            raise ParameterError("admittance matrix must be symmetric")
        object.__setattr__(self, "Y", Y)

    @property
    def n_load(self):
        return self.Y.shape[0] - self.n


def kron_reduce(adm: NetworkAdmittance, xd_prime):
    """Eliminate load buses and attach the transient reactances.

    Returns ``(Y_alpha, Y_beta)`` with ``Y_alpha = Y11 - Y12 Y22^{-1} Y21`` and
    ``Y_beta = (Y_alpha + diag(1j * x'_d))^{-1}``.
    """
    n = adm.n
    xd_prime = np.asarray(xd_prime, dtype=float)
    if xd_prime.shape != (n,):
        raise ParameterError(f"expected {n} transient reactances, got shape {xd_prime.shape}")
    Y = adm.Y
    Y11 = Y[:n, :n]
    if adm.n_load == 0:
        Y_alpha = Y11.copy()
    else:
        Y12, Y21, Y22 = Y[:n, n:], Y[n:, :n], Y[n:, n:]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", la.LinAlgWarning)
                lu = la.lu_factor(Y22, check_finite=True)
        except (la.LinAlgError, ValueError) as exc:
            raise ReductionError(f"load block Y22 is singular: {exc}") from exc
        if _lu_singular(lu):
            raise ReductionError("load block Y22 is singular")
        Y_alpha = Y11 - Y12 @ la.lu_solve(lu, Y21)
    T = Y_alpha + np.diag(1j * xd_prime)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu = la.lu_factor(T)
    if _lu_singular(lu):
        raise ReductionError("Y_alpha + diag(1j*x'd) is singular")
    Y_beta = la.lu_solve(lu, np.eye(n, dtype=complex))
    return Y_alpha, Y_beta


def _lu_singular(lu, rtol=1e-13):
    d = np.abs(np.diag(lu[0]))
    return d.size > 0 and d.min() <= rtol * max(d.max(), np.finfo(float).tiny)


def linearize(params: Sequence[GeneratorParams], Y_alpha, Y_beta):
    """Small-signal blocks ``L1, L2, L3, F1, F2, F3`` of the unscaled model.

    Admittance entries are used in polar form ``|Y| exp(1j*angle)``.  The
    Laplacian diagonals are the negated off-diagonal row sums, so every row of
    ``L1``, ``L2`` and ``L3`` sums to exactly zero.
    """
    p = _stack_params(params)
    n = p["M"].size
    Ya = np.asarray(Y_alpha, dtype=complex)
    Yb = np.asarray(Y_beta, dtype=complex)
    if Ya.shape != (n, n) or Yb.shape != (n, n):
        raise ParameterError("Kron-reduced matrices do not match the generator count")

    E = p["Eq0"]
    dlt = p["delta0"][:, None] - p["delta0"][None, :]
    ya, alpha = np.abs(Ya), np.angle(Ya)
    yb, beta = np.abs(Yb), np.angle(Yb)
    kx = ((p["xd"] - p["xdp"]) / p["xdp"])[:, None]
    KA = p["KA"][:, None]
    off = ~np.eye(n, dtype=bool)

    # Electrical power P_i = sum_j E_i E_j |Ya_ij| cos(d_ij - alpha_ij).
    L1 = -E[:, None] * E[None, :] * ya * np.sin(dlt - alpha)
    L2 = -kx * E[None, :] * yb * np.sin(dlt - beta)

    # V_R, V_I are per-generator (row) sums.
    VR = (yb * E[None, :] * np.cos(dlt - beta)).sum(axis=1)[:, None]
    VI = (yb * E[None, :] * np.sin(dlt - beta)).sum(axis=1)[:, None]
    V = np.sqrt(VR**2 + VI**2)
    L3 = -KA * yb * E[None, :] * (VR * np.sin(dlt - beta) - VI * np.cos(dlt - beta)) / V

    for L in (L1, L2, L3):
        L[~off] = 0.0
        L[~off] = -L.sum(axis=1)

    F1 = -E[:, None] * ya * np.cos(dlt - alpha)
    F1[~off] = -E * np.diag(ya) * np.cos(np.diag(alpha)) - (E[None, :] * ya * np.cos(dlt - alpha)).sum(axis=1)
    F2 = -kx * yb * np.cos(dlt - beta)
    F2[~off] = -p["xd"] / p["xdp"] - kx[:, 0] * np.diag(yb) * np.cos(np.diag(beta))
    F3 = -KA * yb * (VR * np.cos(dlt - beta) + VI * np.sin(dlt - beta)) / V
    F3[~off] = -p["KA"] * np.diag(yb) * (VR[:, 0] * np.cos(np.diag(beta)) - VI[:, 0] * np.sin(np.diag(beta))) / V[:, 0]

    s = la.svdvals(F1)
    if s[-1] <= 1e-10 * max(s[0], 1.0):
        warnings.warn("F1 is numerically singular; (A, B) may be uncontrollable", RuntimeWarning, stacklevel=2)
    return {"L1": L1, "L2": L2, "L3": L3, "F1": F1, "F2": F2, "F3": F3}


def diagonally_dominant(F):
    """Rows where ``|F_ii| >= sum_{j != i} |F_ij|``."""
    F = np.asarray(F)
    d = np.abs(np.diag(F))
    return d >= np.abs(F).sum(axis=1) - d


def block_state_matrix(L1, L2, L3, Dm, F1, F2, F3, T3, T4):
    """Assemble the ``4k x 4k`` state matrix from its nine nonzero blocks."""
    k = L1.shape[0]
    Z = np.zeros((k, k))
    I = np.eye(k)
    return np.block(
        [
            [Z, I, Z, Z],
            [L1, -Dm, F1, Z],
            [L2, Z, F2, T3],
            [L3, Z, F3, -T4],
        ]
    )


def zero_tolerance(A):
    """Magnitude below which an eigenvalue of ``A`` counts as zero."""
    A = np.asarray(A)
    return 1e-8 * max(1.0, np.linalg.norm(A, "fro") / A.shape[0])


def consensus_spectrum(A, eigs=None):
    """Classify the spectrum of ``A``.

    Returns ``(n_zero, max_real_nonzero, eigs)`` where ``n_zero`` counts the
    eigenvalues with magnitude below :func:`zero_tolerance`.
    """
    if eigs is None:
        eigs = la.eigvals(A)
    tol = zero_tolerance(A)
    zero = np.abs(eigs) < tol
    rest = eigs[~zero]
    max_re = float(rest.real.max()) if rest.size else -np.inf
    return int(zero.sum()), max_re, eigs


@dataclass(frozen=True)
class LinearModel:
    """Mass-normalized linear model; arrays are read-only after construction."""

    n: int
    M: np.ndarray
    L1m: np.ndarray
    L2m: np.ndarray
    L3m: np.ndarray
    Dm: np.ndarray
    F1m: np.ndarray
    F2m: np.ndarray
    F3m: np.ndarray
    T3: np.ndarray
    T4: np.ndarray
    B1: np.ndarray
    Bd: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.n
        for name in ("M",) + BLOCK_NAMES + ("Bd",):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.M.shape != (n,):
            raise ParameterError("M must be a length-n vector")
        for name in BLOCK_NAMES:
            if getattr(self, name).shape != (n, n):
                raise ParameterError(f"block {name} must be {n}x{n}")
        if self.Bd.ndim != 2 or self.Bd.shape[0] != 4 * n:
            raise ParameterError("Bd must have 4n rows")

    @property
    def n_d(self):
        return self.Bd.shape[1]

    @cached_property
    def A(self):
        A = block_state_matrix(self.L1m, self.L2m, self.L3m, self.Dm, self.F1m, self.F2m, self.F3m, self.T3, self.T4)
        A.setflags(write=False)
        return A

    @cached_property
    def B(self):
        B = np.zeros((4 * self.n, self.n))
        B[3 * self.n :, :] = self.B1
        B.setflags(write=False)
        return B

    @cached_property
    def vbar(self):
        return np.sqrt(self.M) / np.sqrt(self.M.sum())

    @property
    def v0(self):
        v = np.zeros(4 * self.n)
        v[: self.n] = self.vbar
        return v

    def blocks(self):
        return {name: getattr(self, name) for name in BLOCK_NAMES}

    def with_disturbance(self, Bd):
        d = model_to_dict(self)
        d["Bd"] = np.asarray(Bd, dtype=float).tolist()
        d["n_d"] = int(np.shape(Bd)[1])
        return model_from_dict(d)

    def check(self, eigs=None):
        """Verify the structural invariants; raises :class:`ConsensusError`."""
        tol = 1e-9
        for name in ("L1m", "L2m", "L3m"):
            L = getattr(self, name)
            if np.linalg.norm(L @ self.vbar) > tol * max(np.linalg.norm(L, "fro"), 1.0):
                raise ConsensusError(f"{name} does not annihilate the consensus vector")
        n_zero, max_re, eigs = consensus_spectrum(self.A, eigs)
        if n_zero != 1:
            raise ConsensusError(
                f"model is not consensus stable: expected exactly one zero eigenvalue, found {n_zero}"
            )
        if max_re >= 0:
            raise ConsensusError(
                f"model is not consensus stable: nonzero eigenvalue with real part {max_re:.3e} >= 0"
            )
        return eigs


def assemble(params: Sequence[GeneratorParams], blocks, Bd=None, meta=None, check=True):
    """Apply the mass scaling and build a :class:`LinearModel`.

    ``Bd`` is either a ``4n x n_d`` matrix or a sequence of generator indices
    (0-based) whose input columns act as disturbance channels.  By default all
    input columns are used.
    """
    p = _stack_params(params)
    n = p["M"].size
    for name in ("D", "KA"):
        if np.any(p[name] < 0):
            raise ParameterError(f"{name} must be nonnegative")
    m = np.sqrt(p["M"])
    im = 1.0 / m
    tdo_inv = 1.0 / p["Tdo"]
    ta_inv = 1.0 / p["TA"]

    def scale(left, X):
        return left[:, None] * X * im[None, :]

    L1, L2, L3 = blocks["L1"], blocks["L2"], blocks["L3"]
    F1, F2, F3 = blocks["F1"], blocks["F2"], blocks["F3"]
    B1 = np.diag(m * ta_inv)
    if Bd is None:
        cols = list(range(n))
        Bd = None
    elif np.ndim(Bd) == 1:
        cols = [int(i) for i in Bd]
        Bd = None
    if Bd is None:
        if any(not 0 <= c < n for c in cols):
            raise ParameterError("disturbance generator index out of range")
        Bd = np.zeros((4 * n, len(cols)))
        for k, c in enumerate(cols):
            Bd[3 * n + c, k] = m[c] * ta_inv[c]
    model = LinearModel(
        n=n,
        M=p["M"],
        L1m=scale(im, L1),
        L2m=scale(m * tdo_inv, L2),
        L3m=scale(m * ta_inv, L3),
        Dm=np.diag(p["D"] / p["M"]),
        F1m=scale(im, F1),
        F2m=scale(m * tdo_inv, F2),
        F3m=scale(m * ta_inv, F3),
        T3=np.diag(tdo_inv),
        T4=np.diag(ta_inv),
        B1=B1,
        Bd=np.asarray(Bd, dtype=float),
        meta=dict(meta or {}),
    )
    if check:
        model.check()
    return model


def unscaled_state_matrix(params: Sequence[GeneratorParams], blocks):
    """State matrix of the model in the physical coordinates (no mass scaling)."""
    p = _stack_params(params)
    iM, iT, iA = 1.0 / p["M"], 1.0 / p["Tdo"], 1.0 / p["TA"]
    return block_state_matrix(
        iM[:, None] * blocks["L1"],
        iT[:, None] * blocks["L2"],
        iA[:, None] * blocks["L3"],
        np.diag(iM * p["D"]),
        iM[:, None] * blocks["F1"],
        iT[:, None] * blocks["F2"],
        iA[:, None] * blocks["F3"],
        np.diag(iT),
        np.diag(iA),
    )


# ---------------------------------------------------------------------------
# synthetic models

PARAM_RANGES = {
    "M": (2.0, 10.0),
    "D": (1.0, 5.0),
    "Tdo": (4.0, 6.0),
    "TA": (0.02, 0.2),
    "KA": (20.0, 200.0),
    "xd": (0.1, 0.3),
    "xdp": (0.02, 0.06),
    "Eq0": (0.95, 1.15),
}


def synth_network(n, rng, n_load=None, k_near=4, x_range=(0.01, 0.05)):
    """Random connected transmission network with constant-impedance loads.

    Buses are scattered in the unit square and joined to their nearest
    neighbours (plus a spanning tree to guarantee connectivity); lines are
    inductive with X/R between 5 and 15.  Reactances are per unit on a
    100 MVA system base, like the machine reactances in :data:`PARAM_RANGES`.
    """
    if n_load is None:
        n_load = max(1, n // 2)
    nb = n + n_load
    pts = rng.random((nb, 2))
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    edges = set()
    # Prim spanning tree on the geometric distances.
    in_tree = np.zeros(nb, dtype=bool)
    in_tree[0] = True
    best = d[0].copy()
    parent = np.zeros(nb, dtype=int)
    for _ in range(nb - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges.add((min(j, parent[j]), max(j, parent[j])))
        in_tree[j] = True
        closer = d[j] < best
        best = np.where(closer, d[j], best)
        parent = np.where(closer, j, parent)
    for i in range(nb):
        for j in np.argsort(d[i])[: min(k_near, nb - 1)]:
            edges.add((min(i, int(j)), max(i, int(j))))
    Y = np.zeros((nb, nb), dtype=complex)
    for i, j in sorted(edges):
        x = rng.uniform(*x_range)
        r = x / rng.uniform(5.0, 15.0)
        y = 1.0 / (r + 1j * x)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    # Constant-impedance loads at the load buses, a small shunt at generator buses.
    pl = rng.uniform(0.5, 2.0, nb)
    ql = pl * rng.uniform(0.1, 0.4, nb)
    shunt = pl - 1j * ql
    shunt[:n] *= 0.1
    Y[np.diag_indices(nb)] += shunt
    return NetworkAdmittance(Y=Y, n=n), sorted(edges)


def _draw_params(n, rng):
    lo = {k: v[0] for k, v in PARAM_RANGES.items()}
    hi = {k: v[1] for k, v in PARAM_RANGES.items()}
    vals = {k: rng.uniform(lo[k], hi[k], n) for k in PARAM_RANGES}
    delta = rng.uniform(-0.2, 0.2, n)
    return [
        GeneratorParams(
            M=vals["M"][i],
            D=vals["D"][i],
            Tdo=vals["Tdo"][i],
            TA=vals["TA"][i],
            KA=vals["KA"][i],
            xd=vals["xd"][i],
            xdp=vals["xdp"][i],
            delta0=delta[i],
            Eq0=vals["Eq0"][i],
        )
        for i in range(n)
    ]


def synth_random_model(n, n_d=None, seed=0, max_attempts=100, return_params=False):
    """Random consensus-stable model, reproducible from ``seed``.

    Parameters are drawn uniformly from :data:`PARAM_RANGES`; networks from
    :func:`synth_network`.  Draws whose state matrix is not consensus stable
    are rejected and redrawn, up to ``max_attempts`` times.  The disturbance
    enters through the input channels of ``n_d`` randomly chosen generators
    (all of them when ``n_d`` is None).
    """
    if n < 2:
        raise ParameterError("synthetic models need n >= 2")
    if n_d is None:
        n_d = n
    if not 1 <= n_d <= n:
        raise ParameterError(f"n_d must lie in 1..{n}")
    rng = np.random.default_rng(seed)
    last = "no attempt made"
    for attempt in range(max_attempts):
        params = _draw_params(n, rng)
        adm, _ = synth_network(n, rng)
        dist = np.sort(rng.choice(n, size=n_d, replace=False))
        try:
            Ya, Yb = kron_reduce(adm, [p.xdp for p in params])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                blocks = linearize(params, Ya, Yb)
            meta = {"seed": int(seed), "attempt": attempt, "provenance": "synth_random_model", "disturbance": dist.tolist()}
            model = assemble(params, blocks, Bd=dist, meta=meta)
        except (ConsensusError, ReductionError) as exc:
            last = str(exc)
            continue
        return (model, params) if return_params else model
    raise SynthesisError(f"no consensus-stable model after {max_attempts} attempts; last: {last}")


# ---------------------------------------------------------------------------
# performance output


@dataclass(frozen=True)
class OutputSpec:
    """Angle-difference pairs (1-based generator indices) plus frequencies."""

    pairs: tuple = ()
    frequencies: bool = True

    @classmethod
    def reference_to_first(cls, n):
        return cls(pairs=tuple((1, j) for j in range(2, n + 1)), frequencies=True)


def build_output(spec: OutputSpec, M):
    """Output matrix ``[Cbar 0 0 0; 0 I 0 0] (I_4 kron M^{-1/2})``."""
    M = np.asarray(M, dtype=float)
    n = M.size
    rows = []
    for k, pair in enumerate(spec.pairs):
        i, j = pair
        if not (1 <= i <= n and 1 <= j <= n):
            raise OutputSpecError(f"pair {k}: index out of range 1..{n}: {pair}")
        if i == j:
            raise OutputSpecError(f"pair {k}: indices must differ: {pair}")
        row = np.zeros(4 * n)
        row[i - 1] = 1.0
        row[j - 1] = -1.0
        rows.append(row)
    if spec.frequencies:
        block = np.zeros((n, 4 * n))
        block[:, n : 2 * n] = np.eye(n)
        rows.extend(block)
    if not rows:
        raise OutputSpecError("output specification selects no outputs")
    C = np.array(rows)
    return C * np.tile(1.0 / np.sqrt(M), 4)[None, :]


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: LinearModel):
    d = {"n": model.n, "n_d": model.n_d, "M_diag": model.M.tolist()}
    for name in BLOCK_NAMES + ("Bd",):
        d[name] = getattr(model, name).tolist()
    d["meta"] = dict(model.meta)
    return d


def _field(d, key, path):
    if key not in d:
        raise ModelFileError(f"{path}: missing field '{key}'")
    return d[key]


def _matrix(d, key, shape, path):
    try:
        arr = np.array(_field(d, key, path), dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: field '{key}' is not a real matrix ({exc})") from exc
    if arr.shape != shape:
        raise ModelFileError(f"{path}: field '{key}' has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelFileError(f"{path}: field '{key}' contains non-finite values")
    return arr


def model_from_dict(d, path="<model>", check=False):
    if not isinstance(d, dict):
        raise ModelFileError(f"{path}: top level must be a JSON object")
    n = _field(d, "n", path)
    n_d = _field(d, "n_d", path)
    if not isinstance(n, int) or n < 1:
        raise ModelFileError(f"{path}: field 'n' must be a positive integer")
    if not isinstance(n_d, int) or n_d < 1:
        raise ModelFileError(f"{path}: field 'n_d' must be a positive integer")
    kw = {name: _matrix(d, name, (n, n), path) for name in BLOCK_NAMES}
    kw["Bd"] = _matrix(d, "Bd", (4 * n, n_d), path)
    M = _matrix(d, "M_diag", (n,), path)
    if np.any(M <= 0):
        raise ModelFileError(f"{path}: field 'M_diag' must be positive")
    meta = d.get("meta", {})
    if not isinstance(meta, dict):
        raise ModelFileError(f"{path}: field 'meta' must be an object")
    model = LinearModel(n=n, M=M, meta=meta, **kw)
    if check:
        model.check()
    return model


def save_model(model: LinearModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path, check=False):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(d, path=str(path), check=check)
