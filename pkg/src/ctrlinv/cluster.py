"""Generator clustering by weighted k-means.

A partition ``I_1, ..., I_r`` of the generators together with a positive
weight ``w`` defines the projection ``P`` (``r x n``) with
``P[i, j] = w_j / ||w_{I_i}||`` for ``j`` in ``I_i``.  For a Gramian factor
``F`` split into four ``n``-row blocks, ``Psi = W^{-1} [F1 F2 F3 F4]`` turns
the projection residual ``||(I - Pi^T Pi) F||_F^2`` into the weighted k-means
objective ``sum_j w_j^2 ||psi_j - c_{cl(j)}||^2`` with weighted centroids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PlanError

__all__ = [
    "ClusterPlan",
    "PsiMatrix",
    "LloydResult",
    "clustering_weight",
    "build_projection",
    "build_psi",
    "kmeans_objective",
    "lloyd_cluster",
    "xi_full",
    "xi_kappa",
    "labels_to_clusters",
    "brute_force_partition",
    "plan_to_dict",
]


def clustering_weight(M):
    """``w = M^{1/2} 1 / sqrt(tr M)`` for a diagonal (or vector) inertia."""
    M = np.asarray(M, dtype=float)
    m = np.diag(M) if M.ndim == 2 else M
    if np.any(m <= 0):
        raise ParameterError("inertia values must be positive")
    return np.sqrt(m) / np.sqrt(m.sum())


@dataclass(frozen=True)
class ClusterPlan:
    clusters: tuple
    w: np.ndarray
    P: np.ndarray

    @property
    def r(self):
        return len(self.clusters)

    @property
    def n(self):
        return self.w.size

    def Pi(self):
        """Dense ``I_4 kron P``."""
        return np.kron(np.eye(4), self.P)

    def apply(self, F):
        """``Pi @ F`` without forming ``Pi``."""
        n = self.n
        F = np.asarray(F)
        return np.concatenate([self.P @ F[k * n : (k + 1) * n] for k in range(4)], axis=0)

    def apply_T(self, G):
        """``Pi^T @ G``."""
        r = self.r
        G = np.asarray(G)
        return np.concatenate([self.P.T @ G[k * r : (k + 1) * r] for k in range(4)], axis=0)

    def labels(self):
        lab = np.empty(self.n, dtype=int)
        for i, c in enumerate(self.clusters):
            lab[list(c)] = i
        return lab


def build_projection(clusters, w):
    """Projection for a partition (0-based indices) and weight ``w``."""
    w = np.asarray(w, dtype=float)
    n = w.size
    clusters = tuple(tuple(int(j) for j in c) for c in clusters)
    seen = np.zeros(n, dtype=int)
    for i, c in enumerate(clusters):
        if len(c) == 0:
            raise PlanError(f"cluster {i} is empty")
        for j in c:
            if not 0 <= j < n:
                raise PlanError(f"cluster {i} contains out-of-range index {j}")
            seen[j] += 1
    if np.any(seen > 1):
        raise PlanError(f"generators {np.flatnonzero(seen > 1).tolist()} appear in more than one cluster")
    if np.any(seen == 0):
        raise PlanError(f"generators {np.flatnonzero(seen == 0).tolist()} are not covered")
    P = np.zeros((len(clusters), n))
    for i, c in enumerate(clusters):
        idx = list(c)
        nrm = np.linalg.norm(w[idx])
        if nrm == 0:
            raise PlanError(f"cluster {i} has zero weight")
        P[i, idx] = w[idx] / nrm
    return ClusterPlan(clusters=clusters, w=w, P=P)


def labels_to_clusters(labels, r=None):
    labels = np.asarray(labels)
    r = int(labels.max()) + 1 if r is None else r
    return tuple(tuple(np.flatnonzero(labels == i).tolist()) for i in range(r))


@dataclass(frozen=True)
class PsiMatrix:
    Psi: np.ndarray
    w: np.ndarray


def build_psi(factor, w):
    """``Psi = W^{-1} [F1 F2 F3 F4]`` for a ``4n``-row factor."""
    F = np.asarray(factor, dtype=float)
    w = np.asarray(w, dtype=float)
    n = w.size
    if F.ndim != 2 or F.shape[0] != 4 * n:
        raise ParameterError(f"factor must have 4n = {4 * n} rows, got shape {F.shape}")
    if np.any(w == 0):
        raise ParameterError("weight has zero entries; W is singular")
    blocks = np.hstack([F[k * n : (k + 1) * n] for k in range(4)])
    return PsiMatrix(Psi=blocks / w[:, None], w=w)


def _centroids(Psi, w2, labels, r):
    C = np.zeros((r, Psi.shape[1]))
    for i in range(r):
        mask = labels == i
        s = w2[mask].sum()
        if s > 0:
            C[i] = w2[mask] @ Psi[mask] / s
    return C


def kmeans_objective(Psi, w, labels, r=None):
    """``sum_j w_j^2 ||psi_j - c_{l(j)}||^2`` with weighted centroids."""
    Psi = np.asarray(Psi, dtype=float)
    w2 = np.asarray(w, dtype=float) ** 2
    labels = np.asarray(labels)
    r = int(labels.max()) + 1 if r is None else r
    C = _centroids(Psi, w2, labels, r)
    return float(np.sum(w2 * np.sum((Psi - C[labels]) ** 2, axis=1)))


def _sqdist(Psi, C):
    d = (Psi**2).sum(1)[:, None] - 2.0 * Psi @ C.T + (C**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class LloydResult:
    labels: np.ndarray
    objective: float
    trace: tuple
    iterations: int
    seed: int
    restart_objectives: tuple = field(default=())

    @property
    def clusters(self):
        return labels_to_clusters(self.labels, int(self.labels.max()) + 1)


def _seed_centroids(Psi, w2, r, rng, init):
    n = Psi.shape[0]
    if init == "random":
        return Psi[np.sort(rng.choice(n, r, replace=False))].copy()
    # weighted k-means++
    first = rng.choice(n, p=w2 / w2.sum())
    chosen = [first]
    d = w2 * ((Psi - Psi[first]) ** 2).sum(1)
    for _ in range(1, r):
        tot = d.sum()
        if tot <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d / tot))
        chosen.append(nxt)
        d = np.minimum(d, w2 * ((Psi - Psi[nxt]) ** 2).sum(1))
    return Psi[chosen].copy()


def _repair_empty(Psi, w2, labels, r):
    """Move the worst-fitting point into each empty cluster."""
    while True:
        counts = np.bincount(labels, minlength=r)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        C = _centroids(Psi, w2, labels, r)
        cost = w2 * ((Psi - C[labels]) ** 2).sum(1)
        cost[counts[labels] <= 1] = -np.inf
        j = int(np.argmax(cost))
        labels = labels.copy()
        labels[j] = empty[0]


def _lloyd_once(Psi, w2, r, rng, max_iter, init):
    C = _seed_centroids(Psi, w2, r, rng, init)
    labels = np.argmin(_sqdist(Psi, C), axis=1)  # argmin picks the lowest index on ties
    labels = _repair_empty(Psi, w2, labels, r)
    obj = kmeans_objective(Psi, np.sqrt(w2), labels, r)
    trace = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        C = _centroids(Psi, w2, labels, r)
        d = _sqdist(Psi, C)
        new = np.argmin(d, axis=1)
        # keep the current label on ties so round-off cannot reshuffle points
        keep = d[np.arange(len(labels)), labels] <= d[np.arange(len(labels)), new]
        new = np.where(keep, labels, new)
        new = _repair_empty(Psi, w2, new, r)
        new_obj = kmeans_objective(Psi, np.sqrt(w2), new, r)
        if np.array_equal(new, labels) or new_obj > obj:
            break
        labels, obj = new, new_obj
        trace.append(obj)
    return labels, obj, trace, it


def lloyd_cluster(psi, w, r, seed=0, max_iter=100, restarts=10, init="kmeans++"):
    """Weighted Lloyd iteration with restarts; best objective wins.

    Parameters
    ----------
    psi : PsiMatrix or ndarray
    w : weights (length n)
    r : number of clusters, ``1 <= r <= n``
    init : {"kmeans++", "random"}
        ``"random"`` seeds with ``r`` distinct rows of ``Psi``.

    Returns
    -------
    LloydResult
        Labels are relabelled so that clusters appear in order of their
        smallest member.
    """
    Psi = psi.Psi if isinstance(psi, PsiMatrix) else np.asarray(psi, dtype=float)
    w = np.asarray(w, dtype=float)
    n = Psi.shape[0]
    if not 1 <= r <= n:
        raise ParameterError(f"r must lie in 1..{n}, got {r}")
    if max_iter < 1 or restarts < 1:
        raise ParameterError("max_iter and restarts must be positive")
    if init not in ("kmeans++", "random"):
        raise ParameterError(f"unknown init {init!r}")
    w2 = w**2
    rng = np.random.default_rng(seed)
    best = None
    objs = []
    for _ in range(restarts):
        labels, obj, trace, it = _lloyd_once(Psi, w2, r, rng, max_iter, init)
        objs.append(obj)
        if best is None or obj < best[1]:
            best = (labels, obj, trace, it)
    labels, obj, trace, it = best
    _, first = np.unique(labels, return_index=True)
    remap = np.empty(r, dtype=int)
    remap[labels[np.sort(first)]] = np.arange(r)
    return LloydResult(remap[labels], obj, tuple(trace), it, int(seed), tuple(objs))


def xi_full(plan: ClusterPlan, factor):
    """``||(I - Pi^T Pi) F||_F`` for any factor ``F`` of the Gramian."""
    F = np.asarray(factor, dtype=float)
    return float(np.linalg.norm(F - plan.apply_T(plan.apply(F))))


def xi_kappa(plan: ClusterPlan, psi):
    """``||(I - P^T P) W Psi||_F``."""
    Psi = psi.Psi if isinstance(psi, PsiMatrix) else np.asarray(psi)
    WPsi = plan.w[:, None] * Psi
    return float(np.linalg.norm(WPsi - plan.P.T @ (plan.P @ WPsi)))


def _set_partitions(n, r):
    """All partitions of ``range(n)`` into exactly ``r`` blocks as label arrays."""

    def rec(j, labels, k):
        if j == n:
            if k == r:
                yield np.array(labels)
            return
        if n - j < r - k:
            return
        for i in range(k):
            labels.append(i)
            yield from rec(j + 1, labels, k)
            labels.pop()
        if k < r:
            labels.append(k)
            yield from rec(j + 1, labels, k + 1)
            labels.pop()

    yield from rec(0, [], 0)


def brute_force_partition(Psi, w, r):
    """Exhaustive minimum of the weighted k-means objective (small ``n`` only)."""
    Psi = np.asarray(Psi, dtype=float)
    n = Psi.shape[0]
    if n > 10:
        raise ParameterError("brute-force enumeration is limited to n <= 10")
    best = (None, np.inf)
    for labels in _set_partitions(n, r):
        obj = kmeans_objective(Psi, w, labels, r)
        if obj < best[1]:
            best = (labels, obj)
    return best


def plan_to_dict(plan: ClusterPlan, objective=None, seed=None, iterations=None):
    return {
        "clusters": [[j + 1 for j in c] for c in plan.clusters],
        "w": plan.w.tolist(),
        "r": plan.r,
        "objective": objective,
        "seed": seed,
        "iterations": iterations,
    }


def save_plan(plan: ClusterPlan, path, **kw):
    with open(path, "w") as fh:
        json.dump(plan_to_dict(plan, **kw), fh)


__all__ += ["save_plan"]
