"""Embedded-deformation warping and the damped Gauss-Newton solver.

A WarpField blends one rigid transform per graph node into a smooth
warp, W(p) = sum_j a_j (R_j (p - v_j) + v_j + t_j), with skinning
weights computed on the fly from the field's graph. The solver
minimizes

    lambda_corr * sum_i |W(x_i) - y_i|^2
  + lambda_reg  * sum_(u,v) |R_u (v_v - v_u) + v_u + t_u - (v_v + t_v)|^2

by damped Gauss-Newton steps on the stacked per-node axis-angle and
translation increments [w_1..w_V, dt_1..dt_V], linearized at w = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from defreg.consistency import CorrespondenceSet
from defreg.defgraph import DeformationGraph, assign_points, build_graph
from defreg.errors import FileFormatError, NumericalError, ValidationError
from defreg.geometry import PointCloud, exp_so3, log_so3, project_rotation, skew

__all__ = [
    "WarpField",
    "SolverConfig",
    "SolveResult",
    "warp_point",
    "residuals",
    "jacobian",
    "gauss_newton_step",
    "solve",
    "write_warp_field",
    "read_warp_field",
]


def _points_array(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError("expected points of shape (n, 3)")
    return pts


@dataclass(frozen=True)
class WarpField:
    """Deformation graph plus one rigid transform per node."""

    graph: DeformationGraph
    rotations: np.ndarray     # (V, 3, 3)
    translations: np.ndarray  # (V, 3)

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        tra = np.asarray(self.translations, dtype=np.float64)
        v = self.graph.num_nodes
        if rot.shape != (v, 3, 3) or tra.shape != (v, 3):
            raise ValidationError("transform count does not match node count")
        if not (np.isfinite(rot).all() and np.isfinite(tra).all()):
            raise ValidationError("non-finite transform")
        eye = np.eye(3)
        for r in rot:
            if np.abs(r.T @ r - eye).max() > 1e-9 or np.linalg.det(r) < 0:
                raise ValidationError("rotation is not orthonormal")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tra)

    @classmethod
    def identity(cls, graph: DeformationGraph) -> "WarpField":
        v = graph.num_nodes
        return cls(graph, np.broadcast_to(np.eye(3), (v, 3, 3)).copy(), np.zeros((v, 3)))

    def warp(self, points) -> np.ndarray:
        """Evaluate the blended warp at arbitrary points."""
        pts = _points_array(points)
        graph = self.graph
        order, weights = assign_points(pts, graph.nodes, graph.assign_k, graph.coverage)
        out = np.zeros_like(pts)
        for col in range(order.shape[1]):
            j = order[:, col]
            local = np.einsum("nab,nb->na", self.rotations[j], pts - graph.nodes[j])
            out += weights[:, col, None] * (local + graph.nodes[j] + self.translations[j])
        return out


def warp_point(p, field: WarpField) -> np.ndarray:
    return field.warp(np.asarray(p, dtype=np.float64))[0]


@dataclass(frozen=True)
class SolverConfig:
    lambda_corr: float = 25.0
    lambda_reg: float = 1.0
    marquardt: float = 0.01
    max_iterations: int = 50
    cost_tolerance: float = 1e-6
    step_tolerance: float = 1e-6

    def __post_init__(self):
        values = (self.lambda_corr, self.lambda_reg, self.marquardt,
                  self.max_iterations, self.cost_tolerance, self.step_tolerance)
        if any(v <= 0 for v in values):
            raise ValidationError("solver parameters must be positive")


@dataclass(frozen=True)
class SolveResult:
    field: WarpField
    cost_trace: tuple


def _corr_assignment(field: WarpField, corr: CorrespondenceSet):
    graph = field.graph
    return assign_points(corr.source, graph.nodes, graph.assign_k, graph.coverage)


def residuals(field: WarpField, corr: CorrespondenceSet, edges: np.ndarray,
              config: SolverConfig) -> np.ndarray:
    """Stacked residual vector: 3 per correspondence, then 3 per edge."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = len(corr)
    r = np.zeros(3 * n + 3 * edges.shape[0])
    sc = np.sqrt(config.lambda_corr)
    r[: 3 * n] = (sc * (field.warp(corr.source) - corr.target)).ravel()
    if edges.shape[0]:
        u, v = edges[:, 0], edges[:, 1]
        nodes = field.graph.nodes
        sr = np.sqrt(config.lambda_reg)
        bent = np.einsum("eab,eb->ea", field.rotations[u], nodes[v] - nodes[u])
        r[3 * n:] = (sr * (bent + nodes[u] + field.translations[u]
                           - (nodes[v] + field.translations[v]))).ravel()
    return r


def jacobian(field: WarpField, corr: CorrespondenceSet, edges: np.ndarray,
             config: SolverConfig) -> np.ndarray:
    """Dense Jacobian of `residuals` w.r.t. [w_1..w_V, dt_1..dt_V] at w = 0."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    graph = field.graph
    n, e, v = len(corr), edges.shape[0], graph.num_nodes
    jac = np.zeros((3 * n + 3 * e, 6 * v))
    sc = np.sqrt(config.lambda_corr)
    sr = np.sqrt(config.lambda_reg)
    order, weights = _corr_assignment(field, corr)
    rows = 3 * np.arange(n)
    for col in range(order.shape[1]):
        j = order[:, col]
        alpha = weights[:, col]
        lever = np.einsum("nab,nb->na", field.rotations[j], corr.source - graph.nodes[j])
        # d r_corr / d w_j = -sqrt(lc) * alpha * skew(R_j (x - v_j))
        blocks = -sc * alpha[:, None, None] * _skew_batch(lever)
        cols = 3 * j
        for a in range(3):
            for b in range(3):
                jac[rows + a, cols + b] = blocks[:, a, b]
            jac[rows + a, 3 * v + cols + a] = sc * alpha
    if e:
        u, w = edges[:, 0], edges[:, 1]
        lever = np.einsum("eab,eb->ea", field.rotations[u], graph.nodes[w] - graph.nodes[u])
        blocks = -sr * _skew_batch(lever)
        erows = 3 * n + 3 * np.arange(e)
        for a in range(3):
            for b in range(3):
                jac[erows + a, 3 * u + b] = blocks[:, a, b]
            jac[erows + a, 3 * v + 3 * u + a] = sr
            jac[erows + a, 3 * v + 3 * w + a] = -sr
    return jac


def _skew_batch(vecs: np.ndarray) -> np.ndarray:
    out = np.zeros((vecs.shape[0], 3, 3))
    out[:, 0, 1] = -vecs[:, 2]
    out[:, 0, 2] = vecs[:, 1]
    out[:, 1, 0] = vecs[:, 2]
    out[:, 1, 2] = -vecs[:, 0]
    out[:, 2, 0] = -vecs[:, 1]
    out[:, 2, 1] = vecs[:, 0]
    return out


def _step_vector(field: WarpField, corr: CorrespondenceSet, edges: np.ndarray,
                 config: SolverConfig) -> np.ndarray:
    r = residuals(field, corr, edges, config)
    jac = jacobian(field, corr, edges, config)
    normal = jac.T @ jac
    normal[np.diag_indices_from(normal)] += config.marquardt
    try:
        delta = np.linalg.solve(normal, -(jac.T @ r))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("solver breakdown: singular normal equations") from exc
    if not np.isfinite(delta).all():
        raise NumericalError("solver breakdown: non-finite step")
    return delta


def _apply_step(field: WarpField, delta: np.ndarray) -> WarpField:
    if not delta.any():
        return field
    v = field.graph.num_nodes
    omegas = delta[: 3 * v].reshape(v, 3)
    shifts = delta[3 * v:].reshape(v, 3)
    rotations = np.empty_like(field.rotations)
    for j in range(v):
        rotations[j] = project_rotation(exp_so3(omegas[j]) @ field.rotations[j])
    return WarpField(field.graph, rotations, field.translations + shifts)


def _cost(field: WarpField, corr: CorrespondenceSet, edges: np.ndarray,
          config: SolverConfig) -> float:
    r = residuals(field, corr, edges, config)
    return float(r @ r)


def gauss_newton_step(field: WarpField, corr: CorrespondenceSet,
                      config: SolverConfig):
    """One damped step on the field's own edges; returns (field, new cost)."""
    if len(corr) < 1:
        raise ValidationError("no correspondences")
    edges = field.graph.edges
    updated = _apply_step(field, _step_vector(field, corr, edges, config))
    return updated, _cost(updated, corr, edges, config)


def solve(corr: CorrespondenceSet, source: PointCloud, config: SolverConfig,
          coverage: float = 0.08, assign_k: int = 6,
          graph: DeformationGraph | None = None) -> SolveResult:
    """Damped Gauss-Newton loop from the identity field.

    Stops on max_iterations, a step below step_tolerance (checked before
    applying, so an already-converged problem records a single cost), a
    relative cost decrease below cost_tolerance, or a cost increase (the
    step is rejected and the previous iterate returned). The cost trace
    over accepted iterates is non-increasing.
    """
    if len(corr) < 1:
        raise ValidationError("no correspondences")
    if graph is None:
        graph = build_graph(source, coverage, assign_k)
    edges = graph.edges
    field = WarpField.identity(graph)
    cost = _cost(field, corr, edges, config)
    trace = [cost]
    for _ in range(config.max_iterations):
        try:
            delta = _step_vector(field, corr, edges, config)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (iteration {len(trace)})") from exc
        if np.abs(delta).max() < config.step_tolerance:
            break
        candidate = _apply_step(field, delta)
        new_cost = _cost(candidate, corr, edges, config)
        if new_cost > cost:
            break
        field = candidate
        trace.append(new_cost)
        converged = (cost - new_cost) <= config.cost_tolerance * cost
        cost = new_cost
        if converged:
            break
    return SolveResult(field=field, cost_trace=tuple(trace))


def write_warp_field(path, field: WarpField) -> None:
    """Text format: one header line (node count, coverage, assign_k), then
    per node: position, axis-angle rotation, translation."""
    graph = field.graph
    lines = [f"warp-field nodes {graph.num_nodes} coverage {float(graph.coverage)!r} assign_k {graph.assign_k}"]
    for j in range(graph.num_nodes):
        values = np.concatenate(
            [graph.nodes[j], log_so3(field.rotations[j]), field.translations[j]]
        )
        lines.append(" ".join(repr(float(x)) for x in values))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_warp_field(path) -> WarpField:
    """Inverse of write_warp_field; the returned field carries a node-only
    graph (no correspondence assignments, no edges)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise FileFormatError("empty warp-field file")
    head = lines[0].split()
    if len(head) != 7 or head[0] != "warp-field" or head[1] != "nodes" \
            or head[3] != "coverage" or head[5] != "assign_k":
        raise FileFormatError("bad warp-field header")
    try:
        count = int(head[2])
        coverage = float(head[4])
        assign_k = int(head[6])
    except ValueError as exc:
        raise FileFormatError("bad warp-field header") from exc
    if len(lines) - 1 != count:
        raise FileFormatError(f"expected {count} node lines, found {len(lines) - 1}")
    nodes = np.zeros((count, 3))
    rotations = np.zeros((count, 3, 3))
    translations = np.zeros((count, 3))
    for j, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != 9:
            raise FileFormatError(f"node line {j} has {len(fields)} fields, expected 9")
        try:
            values = np.array([float(x) for x in fields])
        except ValueError as exc:
            raise FileFormatError(f"non-numeric value on node line {j}") from exc
        if not np.isfinite(values).all():
            raise FileFormatError(f"non-finite value on node line {j}")
        nodes[j] = values[:3]
        rotations[j] = exp_so3(values[3:6])
        translations[j] = values[6:9]
    graph = DeformationGraph(
        nodes=nodes,
        coverage=coverage,
        assign_k=assign_k,
        point_to_nodes=np.zeros((0, min(assign_k, count)), dtype=np.int64),
        point_weights=np.zeros((0, min(assign_k, count))),
        node_to_members=tuple(np.zeros(0, dtype=np.int64) for _ in range(count)),
        edges=np.zeros((0, 2), dtype=np.int64),
        node_indices=np.arange(count, dtype=np.int64),
    )
    return WarpField(graph, rotations, translations)
