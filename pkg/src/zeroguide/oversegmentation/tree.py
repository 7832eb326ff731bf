"""Minimum-variance agglomerative clustering that keeps the full merge tree."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from ..encoders import PatchFeatures


@dataclass
class ClusterNode:
    id: int
    size: int
    mean: np.ndarray
    ssd: float
    left: Optional[int] = None
    right: Optional[int] = None
    parent: Optional[int] = None
    patch: Optional[int] = None  # set on original (single-patch) leaves

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class MergeTree:
    nodes: dict[int, ClusterNode]
    root: int
    frontier: list[int]
    history: list[tuple[int, int, int]]
    grid: tuple[int, int]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def children(self, node_id: int) -> tuple[int, int] | None:
        n = self.nodes[node_id]
        return None if n.is_leaf else (n.left, n.right)

    def sibling(self, node_id: int) -> Optional[int]:
        parent = self.nodes[node_id].parent
        if parent is None:
            return None
        p = self.nodes[parent]
        return p.right if p.left == node_id else p.left

    def members(self, node_id: int) -> np.ndarray:
        out, stack = [], [node_id]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf:
                out.append(n.patch)
            else:
                stack.extend((n.left, n.right))
        return np.array(sorted(out), dtype=np.int64)

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        p = self.nodes[node_id].parent
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out

    def label_grid(self, frontier: Optional[list[int]] = None) -> np.ndarray:
        """Patch-grid map whose value is the index of the owning frontier node."""
        frontier = self.frontier if frontier is None else frontier
        labels = np.full(self.n_patches, -1, dtype=np.int64)
        for k, node_id in enumerate(frontier):
            idx = self.members(node_id)
            if np.any(labels[idx] >= 0):
                raise ValueError("frontier nodes overlap")
            labels[idx] = k
        if np.any(labels < 0):
            raise ValueError("frontier does not cover the patch grid")
        return labels.reshape(self.grid)

    def with_frontier(self, frontier: list[int]) -> "MergeTree":
        return replace(self, frontier=sorted(frontier))

    # serialization

    def to_json(self) -> str:
        nodes = []
        for node_id in sorted(self.nodes):
            n = self.nodes[node_id]
            entry = {
                "id": n.id,
                "children": [] if n.is_leaf else [n.left, n.right],
                "mean": [float(v) for v in n.mean],
                "ssd": float(n.ssd),
            }
            if n.is_leaf:
                entry["members"] = [n.patch]
            nodes.append(entry)
        doc = {
            "grid": list(self.grid),
            "root": self.root,
            "frontier": list(self.frontier),
            "nodes": nodes,
            "history": [list(h) for h in self.history],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MergeTree":
        doc = json.loads(text)
        nodes: dict[int, ClusterNode] = {}
        for e in doc["nodes"]:
            left, right = (e["children"] or (None, None))
            nodes[e["id"]] = ClusterNode(
                id=e["id"], size=0, mean=np.array(e["mean"], dtype=np.float64), ssd=e["ssd"],
                left=left, right=right, patch=e["members"][0] if "members" in e else None)
        for n in nodes.values():
            if not n.is_leaf:
                nodes[n.left].parent = n.id
                nodes[n.right].parent = n.id
        for node_id in sorted(nodes):
            n = nodes[node_id]
            n.size = 1 if n.is_leaf else nodes[n.left].size + nodes[n.right].size
        return cls(nodes=nodes, root=doc["root"], frontier=list(doc["frontier"]),
                   history=[tuple(h) for h in doc["history"]], grid=tuple(doc["grid"]))


def _pool(a: ClusterNode, b: ClusterNode) -> tuple[int, np.ndarray, float]:
    n = a.size + b.size
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.size / n)
    ssd = a.ssd + b.ssd + float(delta @ delta) * a.size * b.size / n
    return n, mean, ssd


def merged_variance(sizes_a, means_a, ssd_a, size_b, mean_b, ssd_b):
    """Variance of the union of cluster(s) a with cluster b (SSD of the union / size)."""
    n = sizes_a + size_b
    d = means_a - mean_b
    sq = np.einsum("...c,...c->...", d, d)
    return (ssd_a + ssd_b + sq * sizes_a * size_b / n) / n


def _leaf_nodes(x: np.ndarray) -> dict[int, ClusterNode]:
    return {i: ClusterNode(id=i, size=1, mean=x[i].copy(), ssd=0.0, patch=i) for i in range(len(x))}


def agglomerate(features: PatchFeatures, n_target: int) -> MergeTree:
    """Greedy merging of the pair with the smallest merged-cluster variance.

    Runs to a single root; ``frontier`` is the cluster set when ``n_target`` remained.
    Ties go to the lexicographically lowest (min id, max id) pair.
    """
    x = np.asarray(features.data, dtype=np.float64)
    n = len(x)
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    if n < n_target:
        raise ValueError(f"{n} patches is fewer than n_target={n_target}")
    nodes = _leaf_nodes(x)
    total = 2 * n - 1
    cost = np.full((total, total), np.inf)
    if n > 1:
        d2 = cdist(x, x, "sqeuclidean")
        cost[:n, :n] = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), d2 / 4.0, np.inf)
    row_min = cost.min(axis=1)
    row_arg = cost.argmin(axis=1)

    sizes = np.zeros(total)
    means = np.zeros((total, x.shape[1]))
    ssds = np.zeros(total)
    sizes[:n] = 1
    means[:n] = x
    active = np.zeros(total, dtype=bool)
    active[:n] = True

    history: list[tuple[int, int, int]] = []
    frontier = list(range(n)) if n == n_target else None
    next_id = n
    while active.sum() > 1:
        a = int(np.argmin(row_min))
        b = int(row_arg[a])
        m = next_id
        next_id += 1
        size, mean, ssd = _pool(nodes[a], nodes[b])
        nodes[m] = ClusterNode(id=m, size=size, mean=mean, ssd=ssd, left=a, right=b)
        nodes[a].parent = m
        nodes[b].parent = m
        history.append((a, b, m))
        active[a] = active[b] = False
        for gone in (a, b):
            cost[gone, :] = np.inf
            cost[:, gone] = np.inf
            row_min[gone] = np.inf
        ids = np.flatnonzero(active)
        if len(ids):
            c = merged_variance(sizes[ids], means[ids], ssds[ids], size, mean, ssd)
            cost[ids, m] = c
            stale = np.isin(row_arg[ids], (a, b))
            better = c < row_min[ids]
            upd = ids[better & ~stale]
            row_min[upd] = c[better & ~stale]
            row_arg[upd] = m
            for r in ids[stale]:
                row_arg[r] = int(np.argmin(cost[r]))
                row_min[r] = cost[r, row_arg[r]]
        sizes[m], means[m], ssds[m] = size, mean, ssd
        active[m] = True
        if frontier is None and active.sum() == n_target:
            frontier = sorted(int(i) for i in np.flatnonzero(active))
    root = next_id - 1
    return MergeTree(nodes=nodes, root=root, frontier=frontier, history=history, grid=tuple(features.grid))


def replay_history(features: PatchFeatures, history: list[tuple[int, int, int]],
                   frontier: list[int]) -> MergeTree:
    """Rebuild a tree from patch features and a recorded merge history."""
    x = np.asarray(features.data, dtype=np.float64)
    nodes = _leaf_nodes(x)
    for a, b, m in history:
        size, mean, ssd = _pool(nodes[a], nodes[b])
        nodes[m] = ClusterNode(id=m, size=size, mean=mean, ssd=ssd, left=a, right=b)
        nodes[a].parent = m
        nodes[b].parent = m
    root = history[-1][2] if history else 0
    return MergeTree(nodes=nodes, root=root, frontier=list(frontier), history=list(history),
                     grid=tuple(features.grid))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def prune_siblings(tree: MergeTree, t_feature: float) -> MergeTree:
    """Replace sibling frontier leaves by their parent while their means have cosine > t_feature."""
    frontier = set(tree.frontier)
    changed = True
    while changed:
        changed = False
        parents = sorted({tree.nodes[f].parent for f in frontier if tree.nodes[f].parent is not None})
        for p in parents:
            node = tree.nodes[p]
            if node.left in frontier and node.right in frontier:
                if _cos(tree.nodes[node.left].mean, tree.nodes[node.right].mean) > t_feature:
                    frontier -= {node.left, node.right}
                    frontier.add(p)
                    changed = True
    return tree.with_frontier(sorted(frontier))
