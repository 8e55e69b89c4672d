"""Procedural labelled shape generator for the synthetic benchmark.

Four shape kinds (plane, chair, table, rocket), each assembled from a few
surface primitives.  Every primitive belongs to exactly one named component;
points carry the component id as their label.  Components receive fixed
fractions of the point budget (largest-remainder rounding), and points are
sampled uniformly on each primitive's surface, so every component is
guaranteed a healthy share of points regardless of its area.

Given the same (kind, n, seed) the output is bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument
from .geometry import PointCloud, normalize

# ---------------------------------------------------------------------------
# surface samplers (local frames; axis = 0/1/2 picks the long direction)
# ---------------------------------------------------------------------------


def _orient(local: np.ndarray, axis: int) -> np.ndarray:
    """Map local (a, b, c) coordinates so that c lies along ``axis``."""
    cols = {0: (2, 0, 1), 1: (1, 2, 0), 2: (0, 1, 2)}[axis]
    return local[:, cols]


def _sample_box(rng: np.random.Generator, count: int, center, half) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=count)
    v = rng.uniform(-1.0, 1.0, size=count)
    pts = np.empty((count, 3))
    for face in range(6):
        m = faces == face
        if not np.any(m):
            continue
        axis, sign = divmod(face, 2)
        fixed = (hx, hy, hz)[axis] * (1.0 if sign == 0 else -1.0)
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = fixed
        pts[m, others[0]] = u[m] * (hx, hy, hz)[others[0]]
        pts[m, others[1]] = v[m] * (hx, hy, hz)[others[1]]
    return pts + np.asarray(center)


def _sample_cylinder(rng: np.random.Generator, count: int, center, axis: int,
                     radius: float, height: float, caps: bool = True) -> np.ndarray:
    """Uniform samples on a cylinder surface (optionally including end caps)."""
    lateral = 2.0 * np.pi * radius * height
    cap = np.pi * radius * radius
    weights = np.array([lateral, cap, cap]) if caps else np.array([1.0])
    region = rng.choice(len(weights), size=count, p=weights / weights.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    u = rng.uniform(0.0, 1.0, size=count)
    local = np.empty((count, 3))
    side = region == 0
    local[side, 0] = radius * np.cos(theta[side])
    local[side, 1] = radius * np.sin(theta[side])
    local[side, 2] = (u[side] - 0.5) * height
    for reg, zc in ((1, 0.5 * height), (2, -0.5 * height)):
        m = region == reg
        if not np.any(m):
            continue
        r = radius * np.sqrt(u[m])
        local[m, 0] = r * np.cos(theta[m])
        local[m, 1] = r * np.sin(theta[m])
        local[m, 2] = zc
    return _orient(local, axis) + np.asarray(center)


def _sample_cone(rng: np.random.Generator, count: int, base_center, axis: int,
                 radius: float, height: float) -> np.ndarray:
    """Uniform samples on the lateral surface of a cone (base open)."""
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=count))  # area density grows linearly
    local = np.empty((count, 3))
    local[:, 0] = radius * t * np.cos(theta)
    local[:, 1] = radius * t * np.sin(theta)
    local[:, 2] = height * (1.0 - t)
    return _orient(local, axis) + np.asarray(base_center)


# ---------------------------------------------------------------------------
# shape definitions
# ---------------------------------------------------------------------------
# Each component: (name, point share, list of (weight, sampler) primitives).
# Shares per shape sum to 1 and every share is >= 0.1 so no component can
# starve at small n.


def _plane():
    return [
        ("fuselage", 0.35, [(1.0, lambda r, c: _sample_cylinder(r, c, (0, 0, 0), 0, 0.09, 1.3))]),
        ("wing_left", 0.20, [(1.0, lambda r, c: _sample_box(r, c, (0.1, 0.48, 0.0), (0.20, 0.40, 0.015)))]),
        ("wing_right", 0.20, [(1.0, lambda r, c: _sample_box(r, c, (0.1, -0.48, 0.0), (0.20, 0.40, 0.015)))]),
        ("tail", 0.25, [
            (0.5, lambda r, c: _sample_box(r, c, (-0.60, 0.0, 0.16), (0.10, 0.015, 0.16))),
            (0.5, lambda r, c: _sample_box(r, c, (-0.60, 0.0, 0.02), (0.10, 0.22, 0.015))),
        ]),
    ]


def _chair():
    legs = [(0.25, (lambda sx, sy: lambda r, c: _sample_cylinder(
        r, c, (sx * 0.30, sy * 0.30, -0.33), 2, 0.030, 0.62))(sx, sy))
        for sx in (1, -1) for sy in (1, -1)]
    return [
        ("seat", 0.30, [(1.0, lambda r, c: _sample_box(r, c, (0, 0, 0), (0.35, 0.35, 0.03)))]),
        ("back", 0.30, [(1.0, lambda r, c: _sample_box(r, c, (0, -0.33, 0.40), (0.35, 0.02, 0.37)))]),
        ("legs", 0.30, legs),
        ("armrests", 0.10, [
            (0.5, lambda r, c: _sample_box(r, c, (0.37, 0.0, 0.20), (0.025, 0.30, 0.02))),
            (0.5, lambda r, c: _sample_box(r, c, (-0.37, 0.0, 0.20), (0.025, 0.30, 0.02))),
        ]),
    ]


def _table():
    legs = [(0.25, (lambda sx, sy: lambda r, c: _sample_cylinder(
        r, c, (sx * 0.43, sy * 0.28, 0.0), 2, 0.035, 0.76))(sx, sy))
        for sx in (1, -1) for sy in (1, -1)]
    return [
        ("top", 0.45, [(1.0, lambda r, c: _sample_box(r, c, (0, 0, 0.41), (0.52, 0.36, 0.03)))]),
        ("legs", 0.35, legs),
        ("apron", 0.20, [
            (0.5, lambda r, c: _sample_box(r, c, (0.0, 0.26, 0.33), (0.44, 0.015, 0.035))),
            (0.5, lambda r, c: _sample_box(r, c, (0.0, -0.26, 0.33), (0.44, 0.015, 0.035))),
        ]),
    ]


def _rocket():
    fins = []
    for k in range(4):
        ang = k * np.pi / 2.0
        cx, cy = 0.20 * np.cos(ang), 0.20 * np.sin(ang)
        half = (0.10, 0.015, 0.13) if k % 2 == 0 else (0.015, 0.10, 0.13)
        fins.append((0.25, (lambda cx, cy, half: lambda r, c: _sample_box(
            r, c, (cx, cy, -0.46), half))(cx, cy, half)))
    return [
        ("body", 0.40, [(1.0, lambda r, c: _sample_cylinder(r, c, (0, 0, 0), 2, 0.14, 1.0, caps=False))]),
        ("nose", 0.20, [(1.0, lambda r, c: _sample_cone(r, c, (0, 0, 0.50), 2, 0.14, 0.38))]),
        ("fins", 0.25, fins),
        ("nozzle", 0.15, [(1.0, lambda r, c: _sample_cylinder(r, c, (0, 0, -0.56), 2, 0.08, 0.12))]),
    ]


_BUILDERS = {"plane": _plane, "chair": _chair, "table": _table, "rocket": _rocket}

SHAPE_KINDS = tuple(sorted(_BUILDERS))

SHAPE_COMPONENTS = {kind: [name for name, _, _ in build()] for kind, build in _BUILDERS.items()}


def _apportion(total: int, weights: list[float]) -> list[int]:
    """Split ``total`` into integer counts proportional to ``weights``.

    Largest-remainder rounding; remainder ties go to the earliest entry.
    """
    w = np.asarray(weights, dtype=np.float64)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.lexsort((np.arange(len(w)), -(quotas - base)))
        base[order[:short]] += 1
    return [int(b) for b in base]


def make_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample a labelled ``kind`` shape with exactly ``n`` points.

    Points are grouped per component: component i's points carry label i in
    the order listed by ``SHAPE_COMPONENTS[kind]``.  The cloud is normalised
    to centroid zero and maximum radius one.
    """
    if kind not in _BUILDERS:
        raise InvalidArgument(f"unknown shape kind '{kind}' (have {', '.join(SHAPE_KINDS)})")
    if n < 64:
        raise InvalidArgument(f"make_shape needs n >= 64, got {n}")
    rng = np.random.default_rng(seed)
    components = _BUILDERS[kind]()
    counts = _apportion(n, [share for _, share, _ in components])
    chunks = []
    labels = []
    for label, ((name, _, prims), count) in enumerate(zip(components, counts)):
        sub = _apportion(count, [w for w, _ in prims])
        for (w, sampler), c in zip(prims, sub):
            if c:
                chunks.append(sampler(rng, c))
        labels.append(np.full(count, label, dtype=np.int64))
    points = normalize(np.concatenate(chunks, axis=0))
    return PointCloud(points=points, labels=np.concatenate(labels), shape_class=kind)
