"""Spatial consistency of correspondences, pairwise and per graph node.

Two correspondences are consistent when they preserve the distance
between their source points on the target side. Non-rigid motion only
preserves distances locally, so the usable signal is the per-node block
matrix over correspondences sharing a deformation-graph node; pairs that
share no node carry no information and are simply absent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from defreg.defgraph import DeformationGraph
from defreg.errors import FileFormatError, ValidationError

__all__ = [
    "CorrespondenceSet",
    "LocalConsistency",
    "pairwise_consistency",
    "local_consistency",
    "theta_stats",
    "read_corr_csv",
    "write_corr_csv",
]

CORR_BASE_COLUMNS = ("src_x", "src_y", "src_z", "tgt_x", "tgt_y", "tgt_z")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired source/target points with optional labels and scores.

    source, target : (N, 3) float64
    labels         : (N,) int8 in {0, 1}, or None
    scores         : (N,) float64 in [0, 1], or None
    """

    source: np.ndarray
    target: np.ndarray
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if src.ndim != 2 or src.shape[1] != 3 or src.shape != tgt.shape:
            raise ValidationError("source/target must both be (N, 3)")
        if src.shape[0] < 1:
            raise ValidationError("empty correspondence set")
        if not (np.isfinite(src).all() and np.isfinite(tgt).all()):
            raise ValidationError("non-finite correspondence coordinate")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (src.shape[0],) or not np.isin(lab, (0, 1)).all():
                raise ValidationError("labels must be one 0/1 value per correspondence")
            object.__setattr__(self, "labels", lab.astype(np.int8))
        if self.scores is not None:
            sc = np.asarray(self.scores, dtype=np.float64)
            if sc.shape != (src.shape[0],) or not np.isfinite(sc).all() or sc.min() < 0 or sc.max() > 1:
                raise ValidationError("scores must be one [0,1] value per correspondence")
            object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return self.source.shape[0]

    def take(self, indices) -> "CorrespondenceSet":
        idx = np.asarray(indices, dtype=np.int64)
        return CorrespondenceSet(
            self.source[idx],
            self.target[idx],
            None if self.labels is None else self.labels[idx],
            None if self.scores is None else self.scores[idx],
        )


@dataclass(frozen=True)
class LocalConsistency:
    """Per-node consistency blocks, indexed like node_to_members.

    blocks  dict node index -> (|C_j|, |C_j|) matrix in [0, 1]; only
            nodes with a nonempty member set appear
    sigma_d distance tolerance in meters
    """

    blocks: dict
    sigma_d: float


def pairwise_consistency(c_i, c_j, sigma_d: float) -> float:
    """Consistency of two correspondences: [1 - (dd / sigma_d)^2]_+ where
    dd is the difference of their source-side and target-side distances."""
    if sigma_d <= 0:
        raise ValidationError("sigma_d must be positive")
    xi, yi = (np.asarray(v, dtype=np.float64) for v in c_i)
    xj, yj = (np.asarray(v, dtype=np.float64) for v in c_j)
    dx = np.sqrt(((xi - xj) ** 2).sum())
    dy = np.sqrt(((yi - yj) ** 2).sum())
    delta = np.abs(dx - dy)
    val = 1.0 - (delta * delta) / (sigma_d * sigma_d)
    return float(np.maximum(0.0, val))


def _block_consistency(src: np.ndarray, tgt: np.ndarray, sigma_d: float) -> np.ndarray:
    dx = np.sqrt(((src[:, None, :] - src[None, :, :]) ** 2).sum(axis=2))
    dy = np.sqrt(((tgt[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2))
    delta = np.abs(dx - dy)
    val = 1.0 - (delta * delta) / (sigma_d * sigma_d)
    return np.maximum(0.0, val)


def local_consistency(corr: CorrespondenceSet, graph: DeformationGraph, sigma_d: float) -> LocalConsistency:
    """Per-node consistency blocks over the members of each graph node.

    The graph must have been built over the correspondences' source
    endpoints, so member indices index into ``corr``. Nodes with no
    members are skipped.
    """
    if sigma_d <= 0:
        raise ValidationError("sigma_d must be positive")
    if graph.num_points != len(corr):
        raise ValidationError(
            f"graph covers {graph.num_points} points but there are {len(corr)} correspondences"
        )
    blocks = {}
    for j, members in enumerate(graph.node_to_members):
        if members.size == 0:
            continue
        blocks[j] = _block_consistency(corr.source[members], corr.target[members], float(sigma_d))
    return LocalConsistency(blocks=blocks, sigma_d=float(sigma_d))


def write_corr_csv(path, corr: CorrespondenceSet) -> None:
    """CSV with six coordinate columns, then label and score if present."""
    columns = list(CORR_BASE_COLUMNS)
    if corr.labels is not None:
        columns.append("label")
    if corr.scores is not None:
        columns.append("score")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(columns) + "\n")
        for i in range(len(corr)):
            fields = [repr(float(v)) for v in corr.source[i]]
            fields += [repr(float(v)) for v in corr.target[i]]
            if corr.labels is not None:
                fields.append(str(int(corr.labels[i])))
            if corr.scores is not None:
                fields.append(repr(float(corr.scores[i])))
            fh.write(",".join(fields) + "\n")


def read_corr_csv(path) -> CorrespondenceSet:
    """Inverse of write_corr_csv; header row is mandatory."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FileFormatError("empty correspondence file")
    header = tuple(lines[0].split(","))
    if header[:6] != CORR_BASE_COLUMNS:
        raise FileFormatError("correspondence header must start with " + ",".join(CORR_BASE_COLUMNS))
    extras = header[6:]
    has_label = "label" in extras
    has_score = "score" in extras
    expected = CORR_BASE_COLUMNS + (("label",) if has_label else ()) + (("score",) if has_score else ())
    if header != expected:
        raise FileFormatError(f"unexpected correspondence columns: {','.join(header)}")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if not rows:
        raise FileFormatError("no correspondence rows")
    coords = np.zeros((len(rows), 6))
    labels = np.zeros(len(rows), dtype=np.int64) if has_label else None
    scores = np.zeros(len(rows)) if has_score else None
    for i, line in enumerate(rows):
        fields = line.split(",")
        if len(fields) != len(header):
            raise FileFormatError(f"row {i + 1} has {len(fields)} fields, expected {len(header)}")
        try:
            coords[i] = [float(v) for v in fields[:6]]
            pos = 6
            if has_label:
                labels[i] = int(fields[pos])
                pos += 1
            if has_score:
                scores[i] = float(fields[pos])
        except ValueError as exc:
            raise FileFormatError(f"malformed value on row {i + 1}") from exc
    if not np.isfinite(coords).all() or (has_score and not np.isfinite(scores).all()):
        raise FileFormatError("non-finite value in correspondence file")
    if has_label and not np.isin(labels, (0, 1)).all():
        raise FileFormatError("labels must be 0 or 1")
    return CorrespondenceSet(coords[:, :3], coords[:, 3:], labels, scores)


def theta_stats(local: LocalConsistency):
    """Per-node (node, member_count, min, mean, max) rows for inspection."""
    rows = []
    for j in sorted(local.blocks):
        block = local.blocks[j]
        rows.append((j, block.shape[0], float(block.min()), float(block.mean()), float(block.max())))
    return rows
