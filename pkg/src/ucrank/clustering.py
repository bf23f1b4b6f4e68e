"""Louvain community detection and the incrementally updated user cluster map."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels
from .core import ConfigError, EventLog, seed_rng
from .listbuilder import UNASSIGNED

CLUSTER_TAG = np.uint64(1 << 63)
CLUSTERMAP_HEADER = "UCRCLUSTERS"
CLUSTERMAP_VERSION = 1


def _as_csr(adj) -> sp.csr_matrix:
    a = sp.csr_matrix(adj, dtype=np.float64)
    a.sum_duplicates()
    a.sort_indices()
    return a


def modularity(adj, labels) -> float:
    a = _as_csr(adj)
    m2 = a.sum()
    if m2 == 0:
        return 0.0
    labels = np.asarray(labels)
    k = np.asarray(a.sum(axis=1)).ravel()
    coo = a.tocoo()
    inside = coo.data[labels[coo.row] == labels[coo.col]].sum()
    tot = np.bincount(labels, weights=k)
    return float(inside / m2 - np.sum((tot / m2) ** 2))


@dataclass
class LouvainResult:
    labels: np.ndarray
    modularity: float
    trace: list[float] = field(default_factory=list)


def _relabel(labels: np.ndarray) -> np.ndarray:
    # communities numbered by their lowest member index
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


def louvain(adj, min_gain: float = 1e-9, local_moves=None) -> LouvainResult:
    """Two-phase Louvain on a symmetric weighted adjacency matrix.

    Local moving (visiting nodes in index order, ties to the lowest community
    id) alternates with graph aggregation until a pass gains at most
    ``min_gain`` modularity. Modularity is asserted non-decreasing per pass.
    """
    local_moves = local_moves or kernels.local_moves
    a = _as_csr(adj)
    n = a.shape[0]
    if n == 0:
        return LouvainResult(np.zeros(0, dtype=np.int64), 0.0, [])
    membership = np.arange(n, dtype=np.int64)
    m2 = float(a.sum())
    if m2 == 0:
        return LouvainResult(membership, 0.0, [0.0])
    q_prev = modularity(a, membership)
    trace = [q_prev]
    cur = a
    while True:
        k = np.asarray(cur.sum(axis=1)).ravel()
        comm = np.arange(cur.shape[0], dtype=np.int64)
        tot = k.copy()
        moves = local_moves(cur.indptr.astype(np.int64), cur.indices.astype(np.int64),
                            cur.data, comm, tot, k, m2)
        comm = _relabel(comm)
        candidate = comm[membership]
        q = modularity(a, candidate)
        assert q >= q_prev - 1e-10, f"modularity decreased: {q_prev} -> {q}"
        if moves == 0 or q - q_prev <= min_gain:
            if q > q_prev:
                membership, q_prev = candidate, q
                trace.append(q)
            break
        membership, q_prev = candidate, q
        trace.append(q)
        n_comm = int(comm.max()) + 1
        p = sp.csr_matrix((np.ones(len(comm)), (np.arange(len(comm)), comm)),
                          shape=(len(comm), n_comm))
        cur = _as_csr(p.T @ cur @ p)
    return LouvainResult(_relabel(membership), q_prev, trace)


# ---------------------------------------------------------------------------
# Bipartite -> user-user projection


class CoEngagementGraph:
    """Decayed user-user co-engagement counts accumulated day by day.

    Edge weight is the (decayed) number of items both users engaged
    positively. Per item and day at most ``max_users_per_item`` users are
    kept, which bounds the quadratic blow-up of very popular items.
    """

    def __init__(self, decay: float = 1.0, min_weight: float = 2.0,
                 max_users_per_item: int = 64, seed: int = 0):
        self.decay = decay
        self.min_weight = min_weight
        self.max_users_per_item = max_users_per_item
        self.seed = seed
        self.user_ids: list[int] = []
        self._index: dict[int, int] = {}
        self.acc = sp.csr_matrix((0, 0))
        self._days = 0

    def _uidx(self, users: np.ndarray) -> np.ndarray:
        out = np.empty(len(users), dtype=np.int64)
        for j, u in enumerate(users.tolist()):
            i = self._index.get(u)
            if i is None:
                i = self._index[u] = len(self.user_ids)
                self.user_ids.append(u)
            out[j] = i
        return out

    def add_day(self, events: EventLog) -> None:
        pos = events.records[events.label == 1]
        rng = seed_rng(self.seed, "coengagement", self._days)
        self._days += 1
        users = np.asarray(pos["user_id"])
        items = np.asarray(pos["item_id"])
        if len(users):
            pairs = np.unique(np.column_stack([items, users]), axis=0)
            items_u, starts, counts = np.unique(pairs[:, 0], return_index=True, return_counts=True)
            keep = np.ones(len(pairs), dtype=bool)
            for s, c in zip(starts[counts > self.max_users_per_item],
                            counts[counts > self.max_users_per_item]):
                drop = rng.choice(c, c - self.max_users_per_item, replace=False)
                keep[s + drop] = False
            pairs = pairs[keep]
            uidx = self._uidx(pairs[:, 1])
            _, iidx = np.unique(pairs[:, 0], return_inverse=True)
        else:
            uidx = iidx = np.zeros(0, dtype=np.int64)
        n = len(self.user_ids)
        b = sp.csr_matrix((np.ones(len(uidx)), (uidx, iidx)),
                          shape=(n, int(iidx.max()) + 1 if len(iidx) else 0))
        day = (b @ b.T).tocsr()
        day.setdiag(0)
        day.eliminate_zeros()
        acc = self.acc.copy()
        acc.resize((n, n))
        self.acc = _as_csr(self.decay * acc + day)

    def graph(self) -> tuple[np.ndarray, sp.csr_matrix]:
        """Thresholded graph restricted to users with at least one kept edge."""
        a = self.acc.copy()
        a.data[a.data < self.min_weight] = 0
        a.eliminate_zeros()
        deg = np.asarray((a != 0).sum(axis=1)).ravel()
        nodes = np.flatnonzero(deg > 0)
        ids = np.asarray(self.user_ids, dtype=np.uint64)[nodes] if len(nodes) else np.zeros(0, np.uint64)
        return ids, _as_csr(a[nodes][:, nodes])


# ---------------------------------------------------------------------------
# Cluster map


@dataclass
class UpdateStats:
    remapped: int
    deferred: int
    tracked_users: int
    n_clusters: int


class ClusterMap:
    """user_id -> cluster_id with size and re-mapping constraints.

    Cluster IDs are small non-negative integers; ``map_users`` returns them
    tagged with the top bit so they never alias raw user IDs, and returns
    ``UNASSIGNED`` for users without a cluster.
    """

    def __init__(self, max_cluster_size: int = 256, max_remap_ratio: float = 0.2):
        if max_cluster_size < 1:
            raise ConfigError("max_cluster_size must be at least 1")
        if not 0.0 <= max_remap_ratio <= 1.0:
            raise ConfigError("max_remap_ratio must lie in [0, 1]")
        self.max_cluster_size = int(max_cluster_size)
        self.max_remap_ratio = float(max_remap_ratio)
        self.assignment: dict[int, int] = {}
        self.generation = 0
        self.next_id = 0
        self._cache = None

    def copy(self) -> "ClusterMap":
        c = ClusterMap(self.max_cluster_size, self.max_remap_ratio)
        c.assignment = dict(self.assignment)
        c.generation = self.generation
        c.next_id = self.next_id
        return c

    def sizes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for c in self.assignment.values():
            out[c] = out.get(c, 0) + 1
        return out

    def map_users(self, users: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.uint64)
        if self._cache is None or self._cache[0] != self.generation:
            keys = np.fromiter(self.assignment.keys(), dtype=np.uint64, count=len(self.assignment))
            vals = np.fromiter(self.assignment.values(), dtype=np.uint64, count=len(self.assignment))
            order = np.argsort(keys)
            self._cache = (self.generation, keys[order], vals[order] | CLUSTER_TAG)
        _, keys, vals = self._cache
        out = np.full(len(users), UNASSIGNED, dtype=np.uint64)
        if len(keys) == 0 or len(users) == 0:
            return out
        pos = np.minimum(np.searchsorted(keys, users), len(keys) - 1)
        hit = keys[pos] == users
        out[hit] = vals[pos[hit]]
        return out

    def check(self) -> None:
        sizes = self.sizes()
        if sizes and max(sizes.values()) > self.max_cluster_size:
            raise AssertionError("cluster size constraint violated")

    # -- persistence --------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        lines = [
            f"{CLUSTERMAP_HEADER} {CLUSTERMAP_VERSION}",
            f"generation {self.generation}",
            f"next_id {self.next_id}",
            f"max_cluster_size {self.max_cluster_size}",
            f"max_remap_ratio {self.max_remap_ratio!r}",
        ]
        lines += [f"{u} {c}" for u, c in sorted(self.assignment.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClusterMap":
        lines = Path(path).read_text().splitlines()
        head = lines[0].split()
        if head[0] != CLUSTERMAP_HEADER or int(head[1]) != CLUSTERMAP_VERSION:
            raise ValueError(f"{path}: not a version {CLUSTERMAP_VERSION} cluster map")
        meta = dict(line.split() for line in lines[1:5])
        cm = cls(int(meta["max_cluster_size"]), float(meta["max_remap_ratio"]))
        cm.generation = int(meta["generation"])
        cm.next_id = int(meta["next_id"])
        for line in lines[5:]:
            u, c = line.split()
            cm.assignment[int(u)] = int(c)
        return cm

    def size_histogram(self) -> list[tuple[int, int]]:
        """(cluster size, number of clusters) pairs, ascending by size."""
        counts: dict[int, int] = {}
        for s in self.sizes().values():
            counts[s] = counts.get(s, 0) + 1
        return sorted(counts.items())


def _split_oversized(adj: sp.csr_matrix, members: np.ndarray, max_size: int) -> list[np.ndarray]:
    if len(members) <= max_size:
        return [members]
    sub = adj[members][:, members]
    labels = louvain(sub).labels
    parts = [members[labels == c] for c in range(int(labels.max()) + 1)]
    if len(parts) == 1:
        ordered = np.sort(members)
        return [ordered[i:i + max_size] for i in range(0, len(ordered), max_size)]
    out = []
    for p in parts:
        out.extend(_split_oversized(adj, p, max_size))
    return out


def update_clusters(cmap: ClusterMap, user_ids: np.ndarray, adj) -> tuple[ClusterMap, UpdateStats]:
    """Re-cluster ``adj`` (nodes ``user_ids``) and fold the result into ``cmap``.

    New communities inherit the old cluster ID they overlap most (greedy,
    largest overlap first); oversized communities are split by re-running
    Louvain on their induced subgraph. Moves are applied one user at a time
    in user-id order, skipping any that would overfill a cluster, until the
    re-mapping budget ``floor(max_remap_ratio * tracked users)`` is spent;
    skipped users keep their previous cluster for this round.
    """
    adj = _as_csr(adj)
    user_ids = np.asarray(user_ids, dtype=np.uint64)
    new = cmap.copy()
    new.generation += 1
    if len(user_ids) == 0:
        return new, UpdateStats(0, 0, len(new.assignment), len(new.sizes()))

    labels = louvain(adj).labels
    communities: list[np.ndarray] = []
    for c in range(int(labels.max()) + 1):
        communities.extend(_split_oversized(adj, np.flatnonzero(labels == c), cmap.max_cluster_size))

    uids = user_ids.tolist()
    overlaps: dict[tuple[int, int], int] = {}
    for ci, members in enumerate(communities):
        for m in members.tolist():
            old = cmap.assignment.get(uids[m])
            if old is not None:
                overlaps[(ci, old)] = overlaps.get((ci, old), 0) + 1
    matched: dict[int, int] = {}
    used_old: set[int] = set()
    for (ci, old), _ in sorted(overlaps.items(), key=lambda kv: (-kv[1], kv[0])):
        if ci not in matched and old not in used_old:
            matched[ci] = old
            used_old.add(old)
    for ci in range(len(communities)):
        if ci not in matched:
            matched[ci] = new.next_id
            new.next_id += 1

    target: dict[int, int] = {}
    for ci, members in enumerate(communities):
        for m in members.tolist():
            target[uids[m]] = matched[ci]

    tracked = set(cmap.assignment) | set(target)
    budget = int(np.floor(cmap.max_remap_ratio * len(tracked) + 1e-9))
    sizes = new.sizes()
    pending = sorted(u for u, c in target.items() if new.assignment.get(u) != c)
    remapped = 0
    progress = True
    while pending and remapped < budget and progress:
        progress = False
        rest = []
        for u in pending:
            if remapped >= budget:
                rest.append(u)
                continue
            c = target[u]
            if sizes.get(c, 0) + 1 > cmap.max_cluster_size:
                rest.append(u)
                continue
            old = new.assignment.get(u)
            if old is not None:
                sizes[old] -= 1
            sizes[c] = sizes.get(c, 0) + 1
            new.assignment[u] = c
            remapped += 1
            progress = True
        pending = rest

    new.check()
    assert remapped <= budget, "re-mapping constraint violated"
    return new, UpdateStats(remapped, len(pending), len(tracked), len(new.sizes()))
