"""The proxy pyramid: learnable fine proxies under clustered coarse levels.

Level 0 holds one proxy per class and is trained by gradient descent. Each
higher level holds cluster centroids of the level below, refreshed
periodically by one assignment pass (nearest parent, squared Euclidean on
raw vectors) and one centroid pass (mean of assigned children). Ties always
break toward the smallest index; empty parents keep their previous centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng, normalize_rows
from .errors import ContractError


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # Direct (p - c)^2 sums; the expanded |p|^2 - 2pc + |c|^2 form loses
    # precision and can flip argmin ties.
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return _pairwise_sq_dists(points, centers).argmin(axis=1).astype(np.int64)


def _group_means(points: np.ndarray, assignment: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = centers.copy()
    for j in range(centers.shape[0]):
        members = assignment == j
        if members.any():
            out[j] = points[members].mean(axis=0)
    return out


def _seed_centers(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding: spread initial centers proportionally to squared distance."""
    n = points.shape[0]
    chosen = [rng.integers(n)]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = float(d2.sum())
        if total <= 0.0:
            # Remaining points duplicate the chosen centers; take the
            # smallest unchosen index deterministically.
            taken = set(chosen)
            idx = next(i for i in range(n) if i not in taken)
        else:
            target = rng.random() * total
            idx = int(min(np.searchsorted(np.cumsum(d2), target, side="right"), n - 1))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[np.array(chosen)].copy()


def kmeans(points, k: int, rng: Rng, max_iters: int = 100):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, assignment). Stops once assignments are stable or
    after max_iters. Every returned centroid is the mean of the points
    assigned to it (empty clusters keep their previous centroid), and the
    squared-distance objective never increases between iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ContractError("points must be a non-empty 2-D array")
    if not np.isfinite(pts).all():
        raise ContractError("points must be finite")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")

    centroids = _seed_centers(pts, k, rng)
    assignment = _nearest(pts, centroids)
    for _ in range(max_iters):
        centroids = _group_means(pts, assignment, centroids)
        new_assignment = _nearest(pts, centroids)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    centroids = _group_means(pts, assignment, centroids)
    return centroids, assignment


@dataclass
class ProxyPyramid:
    """L proxy levels plus the child-to-parent assignment between them.

    levels[0] aliases the learnable fine proxies (it is updated in place by
    the optimizer); levels above it are centroids owned by this structure.
    """

    levels: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    weights: np.ndarray = None
    frozen_assignment: bool = False  # fixed class-to-superclass mode
    normalize_for_clustering: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def level_sizes(self) -> list:
        return [lvl.shape[0] for lvl in self.levels]

    def validate(self):
        if not self.levels:
            raise ContractError("pyramid must have at least one level")
        if len(self.assignments) != self.num_levels - 1:
            raise ContractError("need exactly one assignment map per adjacent level pair")
        if self.weights is None or len(self.weights) != self.num_levels:
            raise ContractError("need one loss weight per level")
        for l in range(self.num_levels - 1):
            lower, upper = self.levels[l], self.levels[l + 1]
            if upper.shape[0] > lower.shape[0]:
                raise ContractError(f"level {l + 1} is larger than level {l}")
            if upper.shape[1] != lower.shape[1]:
                raise ContractError("all levels must share the embedding dimension")
            q = self.assignments[l]
            if q.shape != (lower.shape[0],):
                raise ContractError(f"assignment {l} must map every level-{l} proxy")
            if q.min() < 0 or q.max() >= upper.shape[0]:
                raise ContractError(f"assignment {l} indexes outside level {l + 1}")

    def _clustering_view(self, level: int) -> np.ndarray:
        if self.normalize_for_clustering:
            view, _ = normalize_rows(self.levels[level], f"level-{level} proxy")
            return view
        return self.levels[level]


def init_pyramid(fine_proxies, level_sizes, weights, rng: Rng,
                 normalize_for_clustering: bool = False) -> ProxyPyramid:
    """Build the pyramid bottom-up, clustering each level to seed the next.

    level_sizes[0] must equal the fine proxy count and sizes must be
    non-increasing. levels[0] aliases fine_proxies rather than copying it.
    """
    fine = np.asarray(fine_proxies, dtype=np.float64)
    if fine.ndim != 2:
        raise ContractError("fine proxies must be a 2-D array")
    sizes = [int(s) for s in level_sizes]
    if not sizes or sizes[0] != fine.shape[0]:
        raise ContractError(
            f"level_sizes[0] must equal the fine proxy count {fine.shape[0]}"
        )
    if any(s <= 0 for s in sizes):
        raise ContractError("level sizes must be positive")
    if any(b > a for a, b in zip(sizes, sizes[1:])):
        raise ContractError(f"level sizes must be non-increasing, got {sizes}")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != len(sizes):
        raise ContractError("need exactly one loss weight per level")

    pyramid = ProxyPyramid(levels=[fine], assignments=[], weights=w,
                           normalize_for_clustering=normalize_for_clustering)
    for l, size in enumerate(sizes[1:]):
        centroids, assignment = kmeans(pyramid._clustering_view(l), size, rng)
        pyramid.levels.append(centroids)
        pyramid.assignments.append(assignment)
    pyramid.validate()
    return pyramid


def propagate_labels(y, pyramid: ProxyPyramid) -> list:
    """Per-level labels for a batch: chase each class through the parent maps.

    Returns [y0, y1, ...]; y0 is the input vector itself (as int64).
    """
    labels = np.asarray(y)
    if labels.ndim != 1:
        raise ContractError("labels must be a 1-D vector")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= pyramid.levels[0].shape[0]):
        raise ContractError("label outside the fine proxy range")
    per_level = [labels]
    for q in pyramid.assignments:
        labels = q[labels]
        per_level.append(labels)
    return per_level


def update_assignments(pyramid: ProxyPyramid) -> ProxyPyramid:
    """Reassign every proxy to its nearest parent (squared Euclidean).

    A frozen level-0 assignment is left untouched; ties go to the smallest
    parent index.
    """
    for l in range(pyramid.num_levels - 1):
        if l == 0 and pyramid.frozen_assignment:
            continue
        pyramid.assignments[l] = _nearest(
            pyramid._clustering_view(l), pyramid.levels[l + 1]
        )
    return pyramid


def update_centroids(pyramid: ProxyPyramid) -> ProxyPyramid:
    """Move every parent to the mean of its assigned children.

    Parents with no children keep their previous position, so labels stay
    stable across epochs.
    """
    for l in range(pyramid.num_levels - 1):
        pyramid.levels[l + 1] = _group_means(
            pyramid._clustering_view(l), pyramid.assignments[l], pyramid.levels[l + 1]
        )
    return pyramid


def set_fixed_hierarchy(pyramid: ProxyPyramid, gt_assignment) -> ProxyPyramid:
    """Freeze the class-to-superclass assignment to a given ground truth.

    Only two-level pyramids support this mode. The coarse level is snapped
    to the group means of the frozen groups immediately; later centroid
    refreshes keep tracking those groups while assignment refreshes leave
    the frozen map alone.
    """
    if pyramid.num_levels != 2:
        raise ContractError("fixed hierarchies are only supported for two-level pyramids")
    gt = np.asarray(gt_assignment)
    if gt.ndim != 1 or gt.shape[0] != pyramid.levels[0].shape[0]:
        raise ContractError("need one superclass id per fine proxy")
    gt = gt.astype(np.int64)
    num_coarse = pyramid.levels[1].shape[0]
    if gt.min() < 0 or gt.max() >= num_coarse:
        raise ContractError(
            f"superclass ids must lie in [0, {num_coarse}), got [{gt.min()}, {gt.max()}]"
        )
    if len(np.unique(gt)) != num_coarse:
        raise ContractError("every superclass must own at least one class")
    pyramid.assignments[0] = gt.copy()
    pyramid.frozen_assignment = True
    update_centroids(pyramid)
    return pyramid


def pyramid_sse(pyramid: ProxyPyramid) -> float:
    """Total squared distance of every proxy to its assigned parent."""
    total = 0.0
    for l in range(pyramid.num_levels - 1):
        child = pyramid._clustering_view(l)
        parent = pyramid.levels[l + 1][pyramid.assignments[l]]
        total += float(((child - parent) ** 2).sum())
    return total
