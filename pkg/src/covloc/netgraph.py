"""Observation-based state network and its community detection.

Two state variables are linked when some observation depends on both; the
link weight is ``S_ij = sum_k |H_ki| |H_kj|`` (zero on the diagonal).
Communities are found with a weighted variant of asynchronous Fluid
Communities and scored with the pair-counting ``performance`` metric.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .core import as_dense_operator, make_rng
from .errors import DomainError


@dataclass(frozen=True, eq=False)
class StateNetwork:
    """Weighted undirected graph on state indices (CSR adjacency)."""

    adjacency: sp.csr_matrix

    @property
    def order(self):
        return self.adjacency.shape[0]

    @property
    def edges(self):
        """``(i, j, weight)`` triples with ``i < j``, sorted."""
        U = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((U.col, U.row))
        return [(int(U.row[k]), int(U.col[k]), float(U.data[k])) for k in order]

    @property
    def n_edges(self):
        return int(sp.triu(self.adjacency, k=1).nnz)

    def degree(self):
        return np.diff(self.adjacency.indptr)


def build_adjacency(H, zero_tol=0.0):
    """Network with weights ``|H|^T |H|`` off the diagonal.

    Entries with ``|H_ki| <= zero_tol`` count as structural zeros.
    """
    if zero_tol < 0:
        raise DomainError("zero_tol must be non-negative")
    A = np.abs(as_dense_operator(H))
    if not np.all(np.isfinite(A)):
        raise DomainError("H has non-finite entries")
    A = sp.csr_matrix(np.where(A > zero_tol, A, 0.0))
    S = (A.T @ A).tocsr()
    S.setdiag(0.0)
    S.eliminate_zeros()
    S.sort_indices()
    return StateNetwork(S)


@dataclass(frozen=True, eq=False)
class ClusterPartition:
    """Labels in ``1..p`` for every state index; every cluster non-empty."""

    labels: np.ndarray
    p: int = field(default=0)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        p = self.p or (int(labels.max()) if labels.size else 0)
        object.__setattr__(self, "p", p)
        if labels.ndim != 1 or labels.size == 0:
            raise DomainError("labels must be a non-empty vector")
        if set(np.unique(labels).tolist()) != set(range(1, p + 1)):
            raise DomainError(f"labels must cover exactly 1..{p} with non-empty clusters")

    def __eq__(self, other):
        return isinstance(other, ClusterPartition) and np.array_equal(self.labels, other.labels)

    @property
    def sizes(self):
        return np.bincount(self.labels, minlength=self.p + 1)[1:]

    def members(self, cluster):
        return np.flatnonzero(self.labels == cluster)

    def clusters(self):
        return [self.members(c) for c in range(1, self.p + 1)]

    def canonical(self):
        """Relabel so cluster ids follow the order of each cluster's smallest index."""
        _, first = np.unique(self.labels, return_index=True)
        old_ids = self.labels[np.sort(first)]
        remap = np.zeros(self.p + 1, dtype=int)
        remap[old_ids] = np.arange(1, self.p + 1)
        return ClusterPartition(remap[self.labels], self.p)

    def to_dict(self):
        return {"p": self.p, "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["labels"], dtype=int), int(data.get("p", 0)))


@dataclass(frozen=True)
class PartitionQuality:
    performance: float
    intra_edges: int
    inter_edges: int


def partition_performance(net, part):
    """Fraction of vertex pairs classified correctly by ``part``.

    Correct pairs are adjacent pairs inside a cluster plus non-adjacent
    pairs split across clusters. Edge weights are ignored.
    """
    labels = part.labels
    n = net.order
    if labels.size != n:
        raise DomainError(f"partition has {labels.size} labels for a network of order {n}")
    U = sp.triu(net.adjacency, k=1).tocoo()
    intra = int(np.count_nonzero(labels[U.row] == labels[U.col]))
    inter = U.nnz - intra
    total_pairs = n * (n - 1) // 2
    if total_pairs == 0:
        return PartitionQuality(1.0, intra, inter)
    sizes = np.bincount(labels)
    intra_pairs = int(np.sum(sizes * (sizes - 1) // 2))
    inter_nonadjacent = (total_pairs - intra_pairs) - inter
    return PartitionQuality((intra + inter_nonadjacent) / total_pairs, intra, inter)


def _rng_from(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return make_rng(*seed)
    return make_rng(0 if seed is None else seed)


def fluid_communities(net, p, seed=0, max_iter=100, weighted=True):
    """Partition ``net`` into exactly ``p`` communities.

    ``p`` fluids start on distinct random vertices, each with total density
    one spread evenly over its members. Vertices are swept in random order;
    each adopts the fluid with the largest vote, where a neighbour in fluid
    ``c`` votes ``w_ij / |c|`` and the vertex itself votes ``w_self / |c|``
    for its current fluid. With ``weighted=False`` every weight is one
    (the original algorithm); otherwise ``w_self`` is the vertex's largest
    incident weight. Ties keep the current fluid if possible, else pick
    uniformly. A fluid's last member never leaves it. Sweeps stop when no
    label changes or after ``max_iter`` sweeps.

    Vertices no fluid reached (isolated vertices, components without a
    seed) are then attached one component at a time, in order of smallest
    vertex, to the currently smallest cluster.

    ``seed`` is an int, a ``(root, *key)`` tuple or a ``Generator``.
    """
    n = net.order
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise DomainError(f"cluster count must be a positive integer, got {p!r}")
    if p > n:
        raise DomainError(f"cluster count {p} exceeds network order {n}")
    if net.n_edges == 0:
        raise DomainError("network has no edges")
    if max_iter < 1:
        raise DomainError("max_iter must be >= 1")
    rng = _rng_from(seed)

    A = net.adjacency
    indptr, indices = A.indptr, A.indices
    data = A.data if weighted else np.ones_like(A.data)
    self_w = np.ones(n)
    if weighted:
        for v in range(n):
            row = data[indptr[v] : indptr[v + 1]]
            if row.size:
                self_w[v] = row.max()

    labels = np.zeros(n, dtype=int)
    counts = np.zeros(p + 1, dtype=int)
    density = np.zeros(p + 1)
    for c, v in enumerate(rng.choice(n, size=p, replace=False), start=1):
        labels[v] = c
        counts[c] = 1
        density[c] = 1.0

    active = np.flatnonzero(np.diff(indptr) > 0)
    for _ in range(max_iter):
        changed = False
        for v in rng.permutation(active):
            nb = indices[indptr[v] : indptr[v + 1]]
            lab = labels[nb]
            votes = np.bincount(lab, weights=data[indptr[v] : indptr[v + 1]] * density[lab], minlength=p + 1)
            cur = labels[v]
            if cur:
                votes[cur] += self_w[v] * density[cur]
            votes[0] = -np.inf
            top = votes.max()
            if top <= 0:
                continue
            best = np.flatnonzero(votes >= top - 1e-9 * top)
            if cur in best or (cur and counts[cur] == 1):
                continue
            new = best[0] if best.size == 1 else best[rng.integers(best.size)]
            if cur:
                counts[cur] -= 1
                density[cur] = 1.0 / counts[cur]
            labels[v] = new
            counts[new] += 1
            density[new] = 1.0 / counts[new]
            changed = True
        if not changed:
            break

    if np.any(labels == 0):
        n_comp, comp = connected_components(A, directed=False)
        seen = set()
        for v in np.flatnonzero(labels == 0):
            if comp[v] in seen:
                continue
            seen.add(comp[v])
            members = np.flatnonzero((comp == comp[v]) & (labels == 0))
            target = 1 + int(np.argmin(counts[1:]))
            labels[members] = target
            counts[target] += members.size
    return ClusterPartition(labels, p).canonical()


class CountSelection(NamedTuple):
    p_star: int
    #: ``(p, best performance, mean performance)`` for p = 1..p_max
    curve: list
    #: best-scoring partition found for each p
    partitions: dict


def select_cluster_count(net, p_max=10, seeds_per_p=10, tau=0.25, seed=0, max_iter=100, weighted=True):
    """Pick the cluster count at the elbow of the performance curve.

    For each ``p`` in ``1..p_max`` the best performance over
    ``seeds_per_p`` Fluid runs is kept. ``p*`` is the smallest ``p >= 2``
    whose gain from ``p - 1`` is positive and whose gain to ``p + 1`` is
    below ``tau`` times that gain. Without such an elbow ``p*`` is the
    smallest arg-max of the curve.
    """
    n = net.order
    p_max = min(p_max, n - 1)
    if p_max < 2:
        raise DomainError(f"p_max must satisfy 2 <= p_max < n_x (n_x = {n})")
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    best_perf = {}
    partitions = {}
    curve = []
    for p in range(1, p_max + 1):
        scores = []
        for s in range(seeds_per_p):
            part = fluid_communities(net, p, seed=(*base, p, s), max_iter=max_iter, weighted=weighted)
            q = partition_performance(net, part).performance
            scores.append(q)
            if p not in best_perf or q > best_perf[p]:
                best_perf[p] = q
                partitions[p] = part
        curve.append((p, best_perf[p], float(np.mean(scores))))
    perf = [None] + [best_perf[p] for p in range(1, p_max + 1)]
    p_star = None
    for p in range(2, p_max):
        gain_in = perf[p] - perf[p - 1]
        gain_out = perf[p + 1] - perf[p]
        if gain_in > 0 and gain_out < tau * gain_in:
            p_star = p
            break
    if p_star is None:
        top = max(perf[1:])
        p_star = next(p for p in range(1, p_max + 1) if math.isclose(perf[p], top, rel_tol=0, abs_tol=1e-15))
    return CountSelection(p_star, curve, partitions)


def partition_report(net, part):
    """JSON-ready ``{p, labels, performance}`` report."""
    q = partition_performance(net, part)
    return {
        "p": part.p,
        "labels": part.labels.tolist(),
        "performance": q.performance,
        "intra_edges": q.intra_edges,
        "inter_edges": q.inter_edges,
    }


def load_partition(path):
    with open(path) as fh:
        return ClusterPartition.from_dict(json.load(fh))
