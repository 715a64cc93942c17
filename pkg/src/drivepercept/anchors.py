"""Prior anchor sizes from k-means over ground-truth box dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

MAX_ITER = 300
N_RESTARTS = 5


@dataclass(frozen=True)
class AnchorSet:
    """Anchor (w, h) sizes in pixels, sorted by area ascending."""

    wh: np.ndarray

    def __post_init__(self) -> None:
        wh = np.asarray(self.wh, dtype=np.float64).reshape(-1, 2)
        if (wh <= 0).any():
            raise ValueError("anchor sizes must be positive")
        order = np.argsort(wh.prod(axis=1), kind="stable")
        object.__setattr__(self, "wh", wh[order])

    def __len__(self) -> int:
        return len(self.wh)

    def per_stride(self, strides=(8, 16, 32)) -> dict[int, np.ndarray]:
        """Three anchors per stride, smallest anchors on the finest grid."""
        if len(self.wh) != 3 * len(strides):
            raise ValueError(f"need {3 * len(strides)} anchors, have {len(self.wh)}")
        return {s: self.wh[3 * i: 3 * i + 3] for i, s in enumerate(strides)}

    def to_list(self) -> list[list[float]]:
        return [[float(w), float(h)] for w, h in self.wh]

    def __eq__(self, other) -> bool:
        return isinstance(other, AnchorSet) and np.array_equal(self.wh, other.wh)

    def __hash__(self) -> int:
        return hash(self.wh.tobytes())


def wh_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of origin-aligned boxes; ``a`` is (n, 2), ``b`` is (k, 2), result (n, k)."""
    inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
    union = a[:, None, 0] * a[:, None, 1] + b[None, :, 0] * b[None, :, 1] - inter
    return inter / union


def iou_distance(dims: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return 1.0 - wh_iou(dims, centroids)


def mean_distance(dims, centroids) -> float:
    """Mean over boxes of the distance to the nearest centroid."""
    return float(iou_distance(np.asarray(dims, float), np.asarray(centroids, float)).min(axis=1).mean())


def _kmeanspp(dims: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(dims)
    centroids = [dims[int(rng.integers(n))]]
    for _ in range(1, k):
        d = iou_distance(dims, np.array(centroids)).min(axis=1)
        total = d.sum()
        if total <= 0:
            idx = int(np.argmax(d))
        else:
            idx = int(np.searchsorted(np.cumsum(d / total), rng.random(), side="right"))
            idx = min(idx, n - 1)
        centroids.append(dims[idx])
    return np.array(centroids, dtype=np.float64)


def _best_centroid(members: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Size minimizing the summed ``1 - IoU`` to ``members``, searched in log space from ``start``."""
    cost = lambda z: float(iou_distance(members, np.exp(z)[None])[:, 0].sum())
    z0 = np.log(start)
    simplex = np.stack([z0, z0 + (0.05, 0.0), z0 + (0.0, 0.05)])
    res = minimize(cost, z0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    return np.exp(res.x) if res.fun <= cost(z0) else start


def _lloyd(dims: np.ndarray, centroids: np.ndarray):
    k = len(centroids)
    assign = None
    history = []
    for _ in range(MAX_ITER):
        dist = iou_distance(dims, centroids)
        new_assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(len(dims)), new_assign].mean()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = dims[assign == j]
            if len(members):
                start = members.mean(axis=0)
                if iou_distance(members, centroids[j:j + 1]).sum() < iou_distance(members, start[None]).sum():
                    start = centroids[j]
                centroids[j] = _best_centroid(members, start)
        for j in range(k):
            if not (assign == j).any():
                d_own = dist[np.arange(len(dims)), assign]
                far = int(np.argmax(d_own))
                centroids[j] = dims[far]
                assign[far] = j
    return centroids, history


def kmeans_anchors(dims, k: int = 9, seed: int = 0, return_history: bool = False, restarts: int = N_RESTARTS):
    """Cluster box sizes with the ``1 - IoU`` distance.

    Each restart draws seeded k-means++ centroids and alternates nearest
    assignment with a centroid step that starts at the per-cluster mean width
    and height (or the old centroid, if closer) and moves it to the size with
    least summed distance to the members. Both steps can only lower the mean distance. Stops when the
    assignment is stable (or after ``MAX_ITER`` rounds); the restart with the
    lowest final distance wins. Input is put in a canonical order first, so
    the result does not depend on how ``dims`` is ordered.

    Returns an :class:`AnchorSet`; with ``return_history`` also the mean
    assignment distance after every round of the winning restart.
    """
    dims = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    if len(dims) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(dims)}")
    if (dims <= 0).any():
        raise ValueError("box dimensions must be positive")
    if len(np.unique(dims, axis=0)) < k:
        raise ValueError(f"fewer than k={k} distinct box sizes")
    dims = dims[np.lexsort((dims[:, 1], dims[:, 0]))]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, history = _lloyd(dims, _kmeanspp(dims, k, rng))
        if best is None or history[-1] < best[1][-1]:
            best = (centroids, history)
    result = AnchorSet(best[0])
    return (result, best[1]) if return_history else result
