"""Point-cloud primitives and rotation algebra.

Everything downstream (graph construction, the solver, the scene
generator) sits on the handful of operations in this module: axis-angle
exponential/log maps, furthest point sampling with a coverage stop rule,
and exhaustive k-nearest-neighbor queries. All distances are Euclidean
and all coordinates are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from defreg.errors import ValidationError

__all__ = [
    "PointCloud",
    "RigidTransform",
    "skew",
    "exp_so3",
    "log_so3",
    "project_rotation",
    "furthest_point_sample",
    "knn",
]


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"expected (N, 3) coordinates, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValidationError("non-finite coordinate")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Immutable set of 3D points, shape (N, 3) float64, N >= 1, finite."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise ValidationError("point cloud is empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def exp_so3(omega) -> np.ndarray:
    """Rodrigues exponential map from an axis-angle 3-vector to a rotation.

    Parameters
    ----------
    omega : array_like, shape (3,)
        Axis-angle vector; direction is the rotation axis, norm the angle
        in radians.

    Returns
    -------
    (3, 3) ndarray
        Orthonormal rotation matrix with determinant +1.

    Notes
    -----
    Below ``|omega| < 1e-8`` the two Rodrigues coefficients sin(t)/t and
    (1-cos(t))/t^2 are replaced by their second-order Taylor expansions to
    avoid 0/0.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    if theta < 1e-8:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(rotation) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of exp_so3).

    The angle is taken in [0, pi]. At theta == pi the axis sign is not
    determined by the matrix; a fixed convention (largest diagonal entry,
    first nonzero component positive) keeps the output deterministic.
    """
    r = np.asarray(rotation, dtype=np.float64)
    trace = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < 1e-8:
        # first-order: R ~ I + skew(w)
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # R ~ 2 aa^T - I; pull the axis off the diagonal
        axis2 = np.clip((np.diag(r) + 1.0) / 2.0, 0.0, None)
        k = int(np.argmax(axis2))
        axis = np.zeros(3)
        axis[k] = np.sqrt(axis2[k])
        for i in range(3):
            if i != k:
                axis[i] = r[k, i] / (2.0 * axis[k])
        nz = np.nonzero(np.abs(axis) > 1e-12)[0]
        if nz.size and axis[nz[0]] < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def project_rotation(m) -> np.ndarray:
    """Nearest rotation matrix (polar projection via SVD, det forced to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; the rotation must be orthonormal to 1e-9."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3) or not np.isfinite(rot).all() or not np.isfinite(tr).all():
            raise ValidationError("bad rigid transform")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValidationError("rotation not orthonormal with det +1")
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self * other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def furthest_point_sample(cloud, coverage: float, start_index: int = 0) -> np.ndarray:
    """Furthest point sampling until every point is covered.

    Starting from ``start_index``, repeatedly adds the point farthest from
    the selected set, stopping once every point lies within ``coverage``
    of some selected point. Ties in the farthest distance resolve to the
    lowest point index (a convention; any choice satisfies the coverage
    guarantee).

    Returns the selected indices in selection order as an int64 array.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    n = pts.shape[0]
    if coverage <= 0:
        raise ValidationError("coverage must be positive")
    if not 0 <= start_index < n:
        raise ValidationError(f"start_index {start_index} out of range for {n} points")
    selected = [int(start_index)]
    dist2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    cov2 = float(coverage) ** 2
    while True:
        far = int(np.argmax(dist2))  # argmax takes the first max: lowest index wins ties
        if dist2[far] <= cov2:
            break
        selected.append(far)
        dist2 = np.minimum(dist2, np.sum((pts - pts[far]) ** 2, axis=1))
    return np.asarray(selected, dtype=np.int64)


def knn(query, cloud, k: int):
    """k nearest points to ``query`` by exhaustive scan.

    Returns ``(indices, distances)`` sorted ascending by distance, ties
    broken by lower index (stable argsort on exact squared distances).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"insufficient points: k={k}, cloud has {n}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((pts - q) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")[:k]
    return order, np.sqrt(d2[order])
