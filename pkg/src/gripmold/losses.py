"""Correspondence-free distances between particle sets.

Exact earth mover's distance via an O(n^3) shortest-augmenting-path
assignment solver, Chamfer distance on squared nearest-neighbour distances,
Hausdorff distance for evaluation, and the weighted training loss. Each
differentiable distance also has a tape-node form whose gradient treats the
matching/argmin as locally constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from . import tensor
from .errors import ContractError
from .tensor import Value

__all__ = [
    "LossConfig",
    "Assignment",
    "chamfer",
    "emd",
    "hausdorff",
    "mixed_loss",
    "chamfer_node",
    "emd_node",
    "mixed_loss_node",
]


@dataclass(frozen=True)
class LossConfig:
    """Weights of the combined training loss."""

    w_emd: float = 0.9
    w_cd: float = 0.1

    def __post_init__(self):
        if self.w_emd < 0 or self.w_cd < 0 or self.w_emd + self.w_cd <= 0:
            raise ContractError(f"loss weights must be >= 0 and not both zero: {self}")


@dataclass(frozen=True)
class Assignment:
    """Optimal bijection from set A to set B and its total cost."""

    permutation: np.ndarray  # permutation[i] = index in B matched to A[i]
    cost: float


@njit(cache=True)
def _solve_assignment(cost):
    """Min-cost perfect matching on a square cost matrix.

    Shortest augmenting path with dual potentials; exact, O(n^3).
    Returns col index matched to each row.
    """
    n = cost.shape[0]
    inf = 1e300
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    matched_row = np.zeros(n + 1, dtype=np.int64)  # row matched to column j (1-based)
    path = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        matched_row[0] = i
        j_cur = 0
        min_reduced = np.full(n + 1, inf)
        visited = np.zeros(n + 1, dtype=np.bool_)
        while True:
            visited[j_cur] = True
            i_cur = matched_row[j_cur]
            delta = inf
            j_next = 0
            for j in range(1, n + 1):
                if not visited[j]:
                    reduced = cost[i_cur - 1, j - 1] - u[i_cur] - v[j]
                    if reduced < min_reduced[j]:
                        min_reduced[j] = reduced
                        path[j] = j_cur
                    if min_reduced[j] < delta:
                        delta = min_reduced[j]
                        j_next = j
            for j in range(n + 1):
                if visited[j]:
                    u[matched_row[j]] += delta
                    v[j] -= delta
                else:
                    min_reduced[j] -= delta
            j_cur = j_next
            if matched_row[j_cur] == 0:
                break
        while True:
            j_prev = path[j_cur]
            matched_row[j_cur] = matched_row[j_prev]
            j_cur = j_prev
            if j_cur == 0:
                break
    out = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        out[matched_row[j] - 1] = j - 1
    return out


def _check_sets(a: np.ndarray, b: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 3 or b.shape[1] != 3:
        raise ContractError(f"{name}: expected [n, 3] arrays, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError(f"{name}: empty particle set")
    return a, b


def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index into b of the nearest neighbour of each row of a, plus distances."""
    if len(a) * len(b) <= 64 * 64:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        idx = d2.argmin(axis=1)
        return idx, np.sqrt(d2[np.arange(len(a)), idx])
    dist, idx = cKDTree(b).query(a)
    return idx, dist


def chamfer(a, b) -> float:
    """Sum of squared nearest-neighbour distances, both directions."""
    a, b = _check_sets(a, b, "chamfer")
    ia, da = _nearest(a, b)
    ib, db = _nearest(b, a)
    return float((da**2).sum() + (db**2).sum())


def emd(a, b) -> tuple[float, Assignment]:
    """Exact earth mover's distance: min over bijections of the summed
    (non-squared) euclidean distances."""
    a, b = _check_sets(a, b, "emd")
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"emd: set sizes differ: {a.shape[0]} vs {b.shape[0]}")
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt((diff**2).sum(-1))
    perm = _solve_assignment(cost)
    total = float(cost[np.arange(len(a)), perm].sum())
    return total, Assignment(permutation=perm, cost=total)


def hausdorff(a, b) -> float:
    """Symmetric worst-case nearest-neighbour distance. Evaluation only."""
    a, b = _check_sets(a, b, "hausdorff")
    _, da = _nearest(a, b)
    _, db = _nearest(b, a)
    return float(max(da.max(), db.max()))


def mixed_loss(a, b, config: LossConfig = LossConfig()) -> float:
    value = 0.0
    if config.w_emd > 0:
        value += config.w_emd * emd(a, b)[0]
    if config.w_cd > 0:
        value += config.w_cd * chamfer(a, b)
    return value


# -- tape nodes ----------------------------------------------------------
#
# Predictions arrive as [3, n] Values (column convention); targets are plain
# [n, 3] arrays. Gradients use the envelope rule: the optimal assignment and
# the nearest-neighbour argmins are frozen at their forward values.


def emd_node(pred: Value, target: np.ndarray) -> Value:
    pts = pred.data.T
    target = np.asarray(target, dtype=np.float64)
    value, assign = emd(pts, target)
    matched = target[assign.permutation]

    def grad_fn(g):
        diff = pts - matched
        norms = np.linalg.norm(diff, axis=1, keepdims=True)
        direction = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
        return [float(g[0, 0]) * direction.T]

    return tensor.custom([pred], np.array([[value]]), grad_fn)


def chamfer_node(pred: Value, target: np.ndarray) -> Value:
    pts = pred.data.T
    target = np.asarray(target, dtype=np.float64)
    ia, _ = _nearest(pts, target)
    ib, _ = _nearest(target, pts)
    value = float(((pts - target[ia]) ** 2).sum() + ((target - pts[ib]) ** 2).sum())

    def grad_fn(g):
        grad = 2.0 * (pts - target[ia])
        np.add.at(grad, ib, 2.0 * (pts[ib] - target))
        return [float(g[0, 0]) * grad.T]

    return tensor.custom([pred], np.array([[value]]), grad_fn)


def mixed_loss_node(pred: Value, target: np.ndarray, config: LossConfig = LossConfig()) -> Value:
    terms = []
    if config.w_emd > 0:
        terms.append(emd_node(pred, target) * config.w_emd)
    if config.w_cd > 0:
        terms.append(chamfer_node(pred, target) * config.w_cd)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
