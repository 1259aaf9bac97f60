"""Deformation graphs: node sampling, point assignments, skinning, edges.

A graph is built over whichever cloud the caller hands in. The pruning
pipeline builds it over the correspondences' source endpoints (coverage
sigma_n, k neighbors); the solver builds it over the full source cloud
(coverage sigma_g, k_g neighbors). The Gaussian skinning bandwidth is the
owning graph's coverage radius in both cases.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from defreg.errors import ValidationError
from defreg.geometry import PointCloud, _as_points, furthest_point_sample

__all__ = [
    "DeformationGraph",
    "build_graph",
    "skinning_weights",
    "assign_points",
    "member_weights",
    "format_graph_dump",
]


@dataclass(frozen=True)
class DeformationGraph:
    """Nodes plus the point assignment structure derived from them.

    nodes           (V, 3) node positions, a subset of the build cloud
    coverage        sampling radius, also the skinning bandwidth
    assign_k        requested neighbors per point (effective: min(k, V))
    point_to_nodes  (N, k') node indices per point, ascending distance
    point_weights   (N, k') skinning weights aligned with point_to_nodes
    node_to_members (V,) tuple of int arrays: point indices per node (C_j)
    edges           (E, 2) unordered node pairs (u < v) sharing a point
    node_indices    (V,) indices of the nodes in the build cloud
    """

    nodes: np.ndarray
    coverage: float
    assign_k: int
    point_to_nodes: np.ndarray
    point_weights: np.ndarray
    node_to_members: tuple
    edges: np.ndarray
    node_indices: np.ndarray

    def __post_init__(self):
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise ValidationError("nodes must be (V, 3)")
        if self.coverage <= 0 or self.assign_k < 1:
            raise ValidationError("coverage and assign_k must be positive")
        if self.point_to_nodes.shape != self.point_weights.shape:
            raise ValidationError("assignment index/weight shape mismatch")
        if len(self.node_to_members) != self.nodes.shape[0]:
            raise ValidationError("node_to_members count != node count")
        if self.point_to_nodes.size:
            if self.point_to_nodes.min() < 0 or self.point_to_nodes.max() >= self.nodes.shape[0]:
                raise ValidationError("assignment references a missing node")
            sums = self.point_weights.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-9 or self.point_weights.min() < 0:
                raise ValidationError("skinning weights must be nonnegative and sum to 1")

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_points(self) -> int:
        return self.point_to_nodes.shape[0]


def _gauss_weights(d2: np.ndarray, bandwidth: float) -> np.ndarray:
    """Rows of exp(-d^2 / 2s^2) normalized to 1; stabilized by the row min.

    Subtracting the row-min squared distance before exponentiation leaves
    the normalized weights mathematically unchanged and keeps the largest
    exponent at 0, so nothing underflows to an all-zero row.
    """
    scale = 2.0 * bandwidth * bandwidth
    shifted = d2 - d2.min(axis=-1, keepdims=True)
    w = np.exp(-shifted / scale)
    return w / w.sum(axis=-1, keepdims=True)


def skinning_weights(point, node_positions, bandwidth: float) -> np.ndarray:
    """Gaussian skinning weights of one point over its assigned nodes."""
    nodes = _as_points(node_positions)
    if nodes.shape[0] < 1:
        raise ValidationError("need at least one node")
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    p = np.asarray(point, dtype=np.float64).reshape(3)
    d2 = np.sum((nodes - p) ** 2, axis=1)
    return _gauss_weights(d2[None, :], float(bandwidth))[0]


def assign_points(points, node_positions, assign_k: int, bandwidth: float):
    """Assign each point to its nearest nodes with Gaussian weights.

    Returns (indices, weights), both (N, min(assign_k, V)). Indices are
    ascending by distance with ties broken by lower node index.
    """
    pts = _as_points(points)
    nodes = _as_points(node_positions)
    kk = min(int(assign_k), nodes.shape[0])
    if kk < 1:
        raise ValidationError("assign_k must be >= 1")
    d2 = np.sum((pts[:, None, :] - nodes[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    sel = np.take_along_axis(d2, order, axis=1)
    return order, _gauss_weights(sel, float(bandwidth))


def build_graph(cloud, coverage: float, assign_k: int, start_index: int = 0) -> DeformationGraph:
    """Sample nodes by FPS and assign every point of the cloud to them.

    Nodes are actual points of the cloud, so each node is a member of
    itself and no node ends up with an empty member set. Edges connect
    two nodes whenever some point is assigned to both.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    if pts.shape[0] < 1:
        raise ValidationError("empty cloud")
    if assign_k < 1:
        raise ValidationError("assign_k must be >= 1")
    node_idx = furthest_point_sample(pts, coverage, start_index)
    nodes = pts[node_idx].copy()
    order, weights = assign_points(pts, nodes, assign_k, coverage)

    n, kk = order.shape
    members = _transpose_assignment(order, nodes.shape[0])

    if kk >= 2:
        cols = list(combinations(range(kk), 2))
        pairs = np.concatenate([np.stack([order[:, a], order[:, b]], axis=1) for a, b in cols])
        pairs = np.sort(pairs, axis=1)
        edges = np.unique(pairs, axis=0)
    else:
        edges = np.empty((0, 2), dtype=np.int64)

    return DeformationGraph(
        nodes=nodes,
        coverage=float(coverage),
        assign_k=int(assign_k),
        point_to_nodes=order,
        point_weights=weights,
        node_to_members=members,
        edges=edges.astype(np.int64),
        node_indices=node_idx,
    )


def _transpose_assignment(order: np.ndarray, num_nodes: int) -> tuple:
    """Per-node member lists (ascending point index) from per-point node lists."""
    n, kk = order.shape
    flat_nodes = order.ravel()
    flat_points = np.repeat(np.arange(n, dtype=np.int64), kk)
    perm = np.argsort(flat_nodes, kind="stable")  # stable keeps point indices ascending per node
    sorted_nodes = flat_nodes[perm]
    sorted_points = flat_points[perm]
    bounds = np.searchsorted(sorted_nodes, np.arange(num_nodes + 1))
    return tuple(sorted_points[bounds[j]:bounds[j + 1]] for j in range(num_nodes))


def member_weights(graph: DeformationGraph, j: int) -> np.ndarray:
    """Skinning weights alpha_{i,j} for node j, aligned with node_to_members[j]."""
    members = graph.node_to_members[j]
    if members.size == 0:
        return np.empty(0)
    mask = graph.point_to_nodes[members] == j
    return (graph.point_weights[members] * mask).sum(axis=1)


def format_graph_dump(graph: DeformationGraph) -> str:
    """One-record-per-line text dump for inspection."""
    lines = [
        f"# deformation-graph nodes={graph.num_nodes} coverage={float(graph.coverage)!r} "
        f"assign_k={graph.assign_k} points={graph.num_points} edges={graph.edges.shape[0]}"
    ]
    for j, pos in enumerate(graph.nodes):
        lines.append(f"node {j} {float(pos[0])!r} {float(pos[1])!r} {float(pos[2])!r}")
    for i in range(graph.num_points):
        parts = " ".join(
            f"{int(jj)}:{float(ww)!r}"
            for jj, ww in zip(graph.point_to_nodes[i], graph.point_weights[i])
        )
        lines.append(f"assign {i} {parts}")
    for u, v in graph.edges:
        lines.append(f"edge {int(u)} {int(v)}")
    return "\n".join(lines) + "\n"
