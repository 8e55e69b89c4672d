"""Exact point-cloud kernels: sampling, neighbourhoods, set distance, I/O.

Everything here is plain float64 numpy with deterministic tie-breaking
(lowest index wins), so the same inputs always produce the same outputs
bit for bit.  Differentiable variants of the chamfer distance live in
``autodiff``; this module is the ground-truth arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """N points with optional per-point integer component labels."""

    points: np.ndarray                      # (N, 3) float64
    labels: np.ndarray | None = None        # (N,) int64 or None
    shape_class: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidArgument(f"points must be (N, 3), got {self.points.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise InvalidArgument("labels must be one integer per point")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class Neighborhood:
    """One local patch: a centre point and its k nearest members."""

    center_index: int
    member_indices: np.ndarray              # (k,) int64, sorted by (distance, index)
    local_coords: np.ndarray                # (k, 3) member minus centre


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def normalize(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidArgument(f"normalize expects a nonempty (N, 3) array, got {pts.shape}")
    centred = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centred, axis=1).max()
    if radius == 0.0:
        raise InvalidArgument("normalize of a degenerate single-location cloud")
    return centred / radius


def fps(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling.

    Greedy: begin at ``start``, then repeatedly pick the point whose minimum
    distance to the picked set is largest.  Distance ties break to the lowest
    index (numpy argmax returns the first maximum).  Returns ``count`` point
    indices in pick order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgument(f"fps expects (N, 3), got {pts.shape}")
    if not 1 <= count <= n:
        raise InvalidArgument(f"fps count {count} out of range for {n} points")
    if not 0 <= start < n:
        raise InvalidArgument(f"fps start index {start} out of range for {n} points")
    picks = np.empty(count, dtype=np.int64)
    picks[0] = start
    # squared distances preserve the argmax and every tie
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(mind))
        picks[i] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
    return picks


def knn(points: np.ndarray, center_indices: np.ndarray, k: int) -> list[Neighborhood]:
    """k nearest neighbours of each centre, self included.

    Members are ordered by (Euclidean distance, index); ``local_coords`` are
    member coordinates minus the centre coordinate, computed by exact
    subtraction.
    """
    pts = np.asarray(points, dtype=np.float64)
    centers = np.asarray(center_indices, dtype=np.int64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgument(f"knn k={k} out of range for {n} points")
    if centers.size and (centers.min() < 0 or centers.max() >= n):
        raise InvalidArgument("knn centre index out of range")
    order_index = np.arange(n)
    out = []
    for c in centers:
        d = ((pts - pts[c]) ** 2).sum(axis=1)
        members = np.lexsort((order_index, d))[:k].astype(np.int64)
        out.append(Neighborhood(
            center_index=int(c),
            member_indices=members,
            local_coords=pts[members] - pts[c],
        ))
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared-L2 chamfer distance.

    mean over a of min squared distance to b, plus the same with the sets
    swapped.  Zero iff the two sets cover the same locations.
    """
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.ndim != 2 or pb.ndim != 2 or pa.shape[1] != pb.shape[1]:
        raise InvalidArgument(f"chamfer expects (M,D) and (L,D), got {pa.shape} and {pb.shape}")
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidArgument("chamfer of an empty point set")
    if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
        raise InvalidArgument("chamfer of non-finite coordinates")
    d = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------
# One point per line: "x y z" or "x y z label", whitespace separated, decimal
# doubles, with blank lines and '#' comments ignored.


def save_cloud(path: str | Path, cloud: PointCloud) -> None:
    lines = []
    if cloud.labels is None:
        for p in cloud.points:
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    else:
        for p, lab in zip(cloud.points, cloud.labels):
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path: str | Path) -> PointCloud:
    points: list[list[float]] = []
    labels: list[int] = []
    saw_label = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise InvalidArgument(f"{path}:{lineno}: expected 'x y z [label]', got {len(parts)} fields")
        try:
            xyz = [float(v) for v in parts[:3]]
        except ValueError as exc:
            raise InvalidArgument(f"{path}:{lineno}: bad coordinate: {exc}") from None
        has_label = len(parts) == 4
        if saw_label is None:
            saw_label = has_label
        elif saw_label != has_label:
            raise InvalidArgument(f"{path}:{lineno}: inconsistent label column")
        if has_label:
            try:
                labels.append(int(parts[3]))
            except ValueError:
                raise InvalidArgument(f"{path}:{lineno}: bad label '{parts[3]}'") from None
        points.append(xyz)
    if not points:
        raise InvalidArgument(f"{path}: no points")
    return PointCloud(
        points=np.array(points, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64) if saw_label else None,
    )
