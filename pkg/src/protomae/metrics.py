"""Clustering-quality metrics for the component grouping.

All of these compare a predicted assignment against ground-truth labels (or
measure the assignment alone); none of them feed any loss.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgument(f"assignments must be equal-length vectors, "
                              f"got {a.shape} and {b.shape}")
    if a.size == 0:
        raise InvalidArgument("empty assignment")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size))
    np.add.at(table, (ia, ib), 1.0)
    return table


def nmi(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized mutual information, 2·MI/(H(a)+H(b)), in [0, 1].

    A degenerate side (single cluster, zero entropy) scores 0: a collapsed
    grouping carries no information regardless of the other side.
    """
    table = _contingency(a, b)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa * np.log(pa, where=pa > 0, out=np.zeros_like(pa)))
    hb = -np.sum(pb * np.log(pb, where=pb > 0, out=np.zeros_like(pb)))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pab = table / n
    outer = pa[:, None] * pb[None, :]
    mask = pab > 0
    mi = float(np.sum(pab[mask] * np.log(pab[mask] / outer[mask])))
    return 2.0 * mi / float(ha + hb)


def purity(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of elements whose cluster's majority truth label matches."""
    table = _contingency(pred, truth)
    return float(table.max(axis=1).sum() / table.sum())


def group_entropy(assignment: np.ndarray, n_groups: int) -> float:
    """Shannon entropy (nats) of the group-size distribution.

    0 means collapse onto one group; log(n_groups) is a perfectly even split.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.size == 0:
        raise InvalidArgument("empty assignment")
    if assignment.min() < 0 or assignment.max() >= n_groups:
        raise InvalidArgument(f"assignment ids outside [0, {n_groups})")
    p = np.bincount(assignment, minlength=n_groups) / assignment.size
    return float(-np.sum(p * np.log(p, where=p > 0, out=np.zeros_like(p))))


def random_nmi_baseline(truth: np.ndarray, n_groups: int, draws: int,
                        rng: np.random.Generator) -> float:
    """Mean NMI of uniformly random ``n_groups``-way assignments vs truth."""
    truth = np.asarray(truth, dtype=np.int64)
    return float(np.mean([nmi(rng.integers(0, n_groups, truth.size), truth)
                          for _ in range(draws)]))
