"""Pure numerical geometry: rigid transforms, Kabsch estimation, point-to-point
ICP, exact nearest-neighbour search and local covariance features.

Points are plain float64 ndarrays: a single point has shape (3,), a cloud
(N, 3). All operations are deterministic and reentrant; `NNIndex` is immutable
after construction and safe for concurrent read-only queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, EmptyIndex

_ORTHO_TOL = 1e-9
_RESOLUTION_SAMPLE_CAP = 50_000
_RESOLUTION_SEED = 7


def as_points(a) -> np.ndarray:
    """Coerce to a contiguous (N, 3) float64 array."""
    pts = np.ascontiguousarray(a, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) point array, got shape {pts.shape}")
    return pts


@dataclass
class RigidTransform:
    """Proper rigid motion p -> rotation @ p + translation.

    The rotation must be orthonormal with det = +1 (checked on construction).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max |R'R - I| = {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation is not proper (det = {det:.12f})")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        pts = as_points(pts)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then `self`."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])


def apply_transform(t: RigidTransform, pts) -> np.ndarray:
    """Apply `t` to every point; output shape equals input shape."""
    return t.apply(pts)


@dataclass
class PointCorrespondenceSet:
    """Paired source/target points with their indices into the parent clouds."""

    source: np.ndarray
    target: np.ndarray
    source_indices: np.ndarray
    target_indices: np.ndarray

    def __post_init__(self):
        self.source = as_points(self.source)
        self.target = as_points(self.target)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64).reshape(-1)
        n = len(self.source)
        if n < 1:
            raise ValueError("correspondence set must contain at least one pair")
        if not (len(self.target) == len(self.source_indices) == len(self.target_indices) == n):
            raise ValueError("source/target/index arrays must have equal length")
        for name, idx in (("source", self.source_indices), ("target", self.target_indices)):
            if len(np.unique(idx)) != n:
                raise ValueError(f"{name} indices contain duplicates")

    def __len__(self) -> int:
        return len(self.source)

    @classmethod
    def from_indices(cls, source_cloud, target_cloud, src_idx, tgt_idx) -> "PointCorrespondenceSet":
        src_idx = np.asarray(src_idx, dtype=np.int64)
        tgt_idx = np.asarray(tgt_idx, dtype=np.int64)
        return cls(as_points(source_cloud)[src_idx], as_points(target_cloud)[tgt_idx],
                   src_idx, tgt_idx)


def kabsch(corrs: PointCorrespondenceSet) -> RigidTransform:
    """Least-squares rigid transform minimising sum ||R p_i + T - q_i||^2.

    Uses the SVD of the cross-covariance; a reflection solution is corrected by
    flipping the sign of the smallest singular direction, so the returned
    rotation is always proper.

    Raises:
        DegenerateInput: fewer than 3 pairs, or source points all (nearly)
            collinear (centred source covariance has rank < 2).
    """
    n = len(corrs)
    if n < 3:
        raise DegenerateInput(f"kabsch needs >= 3 correspondences, got {n}")
    p, q = corrs.source, corrs.target
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    pc = p - p_mean
    qc = q - q_mean
    sv = np.linalg.svd(pc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-30):
        raise DegenerateInput("source points are collinear (rank < 2)")
    h = pc.T @ qc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, q_mean - rot @ p_mean)


def alignment_rmse(t: RigidTransform, source, target) -> float:
    """RMS of ||t(p_i) - q_i|| over paired arrays."""
    res = t.apply(source) - as_points(target)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


class NNIndex:
    """Exact Euclidean k-NN index over a fixed point array.

    Queries match a linear scan point for point: candidate distances are
    recomputed in float64 and ties are broken by ascending point index.
    """

    def __init__(self, points):
        pts = as_points(points)
        if len(pts) == 0:
            raise EmptyIndex("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q, k: int = 1):
        """Return (indices, distances) of the k nearest points to `q`."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        d, _ = self._tree.query(q, k=k)
        d_max = float(np.max(np.atleast_1d(d)))
        # Inflated ball pulls in every candidate tied with the k-th distance.
        radius = d_max + 1e-9 * (1.0 + d_max)
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]

    def query_nearest(self, pts):
        """Bulk 1-NN: (indices, distances) per query point. Fast path used by
        ICP association; deterministic but without the tie-break guarantee."""
        d, i = self._tree.query(as_points(pts), k=1)
        return np.asarray(i, dtype=np.int64), np.asarray(d, dtype=np.float64)


def nn_query(index: NNIndex, q, k: int = 1):
    """Functional wrapper around NNIndex.query."""
    return index.query(q, k)


def build_nn_index(points) -> NNIndex:
    return NNIndex(points)


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    rmse_history: list = field(default_factory=list)


def icp_point_to_point(source, target, init: RigidTransform | None = None,
                       max_iter: int = 30, conv_tol: float = 1e-6,
                       max_pair_dist: float | None = None) -> IcpResult:
    """Point-to-point ICP: alternate 1-NN association and Kabsch re-estimation.

    Association is one-directional source -> target. Pairs farther than
    `max_pair_dist` are dropped; the default gate is 5x the target's mean scan
    resolution (pass ``np.inf`` to disable). The transform is re-estimated from
    the original source positions each iteration, so the result stays a single
    rigid motion. Convergence: change in association RMSE below `conv_tol`.

    Raises:
        DegenerateInput: either cloud empty, or an iteration retains < 3 pairs.
    """
    src = as_points(source)
    tgt = as_points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise DegenerateInput("ICP requires non-empty source and target")
    if max_pair_dist is None:
        max_pair_dist = 5.0 * mean_scan_resolution(tgt) if len(tgt) >= 2 else np.inf
    t = RigidTransform.identity() if init is None else init
    index = NNIndex(tgt)
    history: list[float] = []
    rmse = np.inf
    iterations = 0
    for _ in range(max_iter):
        moved = t.apply(src)
        idx, dist = index.query_nearest(moved)
        keep = dist <= max_pair_dist
        if int(keep.sum()) < 3:
            raise DegenerateInput(
                f"ICP association kept {int(keep.sum())} pairs (< 3) under gate {max_pair_dist:.3g}")
        pairs_src = src[keep]
        pairs_tgt = tgt[idx[keep]]
        rmse_before = float(np.sqrt(np.mean(dist[keep] ** 2)))
        # Indices are unique on the source side only; Kabsch does not need them.
        p_mean = pairs_src.mean(axis=0)
        q_mean = pairs_tgt.mean(axis=0)
        h = (pairs_src - p_mean).T @ (pairs_tgt - q_mean)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        t = RigidTransform(rot, q_mean - rot @ p_mean)
        rmse = alignment_rmse(t, pairs_src, pairs_tgt)
        history.append(rmse)
        iterations += 1
        if rmse_before - rmse < conv_tol:
            break
    return IcpResult(t, rmse, iterations, history)


@dataclass
class LocalGeomFeatures:
    """Per-point eigenvalue features of the neighbourhood covariance.

    linearity = (l1 - l2) / l1, planarity = (l2 - l3) / l1,
    curvature = l3 / (l1 + l2 + l3), for eigenvalues l1 >= l2 >= l3 >= 0.
    `normals` holds the unit eigenvector of l3; rows with `valid` False carry
    zeros.
    """

    linearity: np.ndarray
    planarity: np.ndarray
    curvature: np.ndarray
    normals: np.ndarray
    valid: np.ndarray


def _orient_normals(normals: np.ndarray, points: np.ndarray, viewpoint) -> np.ndarray:
    # Canonical sign first (largest-magnitude component positive) so the
    # orientation is deterministic even without a viewpoint.
    comp = normals[np.arange(len(normals)), np.abs(normals).argmax(axis=1)]
    flip = comp < 0
    normals[flip] = -normals[flip]
    if viewpoint is not None:
        vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
        away = np.einsum("ij,ij->i", normals, vp - points) < 0
        normals[away] = -normals[away]
    return normals


def local_covariance_features(points, k: int | None = None, radius: float | None = None,
                              viewpoint=None) -> LocalGeomFeatures:
    """Eigenvalue features and normals from k-NN or radius neighbourhoods.

    Exactly one of `k` / `radius` may be given; the default is k=16. Points
    whose neighbourhood holds fewer than 3 points (or is rank-0) are flagged
    invalid instead of raising.
    """
    pts = as_points(points)
    n = len(pts)
    if k is not None and radius is not None:
        raise ValueError("pass either k or radius, not both")
    if k is None and radius is None:
        k = 16
    tree = cKDTree(pts)

    lam = np.zeros((n, 3))
    counts = np.zeros(n, dtype=np.int64)
    normals = np.zeros((n, 3))
    if k is not None:
        kk = min(k, n)
        _, idx = tree.query(pts, k=kk)
        idx = np.atleast_2d(idx)
        if kk == 1:
            idx = idx.reshape(n, 1)
        local = pts[idx] - pts[:, None, :]  # (n, kk, 3), shifted to the query
        centered = local - local.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / kk
        counts[:] = kk
    else:
        groups = tree.query_ball_point(pts, float(radius))
        cov = np.zeros((n, 3, 3))
        for i, grp in enumerate(groups):
            counts[i] = len(grp)
            if len(grp) < 3:
                continue
            local = pts[grp] - pts[i]       # shift to the query point for stability
            mu = local.mean(axis=0)
            cc = local - mu
            cov[i] = cc.T @ cc / len(grp)

    ok = counts >= 3
    if ok.any():
        w, v = np.linalg.eigh(cov[ok])      # ascending eigenvalues
        w = np.clip(w, 0.0, None)
        lam_ok = w[:, ::-1]                 # descending: l1, l2, l3
        lam[ok] = lam_ok
        normals[ok] = v[:, :, 0]
    ok &= lam[:, 0] > 1e-30

    linearity = np.zeros(n)
    planarity = np.zeros(n)
    curvature = np.zeros(n)
    l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        linearity[ok] = (l1[ok] - l2[ok]) / l1[ok]
        planarity[ok] = (l2[ok] - l3[ok]) / l1[ok]
        curvature[ok] = l3[ok] / (l1[ok] + l2[ok] + l3[ok])
    np.clip(linearity, 0.0, 1.0, out=linearity)
    np.clip(planarity, 0.0, 1.0, out=planarity)
    np.clip(curvature, 0.0, 1.0, out=curvature)

    normals[ok] = _orient_normals(normals[ok], pts[ok], viewpoint)
    normals[~ok] = 0.0
    return LocalGeomFeatures(linearity, planarity, curvature, normals, ok)


def mean_scan_resolution(points) -> float:
    """Mean distance to the first nearest neighbour over a fixed-seed sample
    of at most 50k points (the whole cloud when smaller)."""
    pts = as_points(points)
    n = len(pts)
    if n < 2:
        raise DegenerateInput("mean scan resolution needs >= 2 points")
    if n > _RESOLUTION_SAMPLE_CAP:
        rng = np.random.default_rng(_RESOLUTION_SEED)
        sample = pts[rng.choice(n, _RESOLUTION_SAMPLE_CAP, replace=False)]
    else:
        sample = pts
    tree = cKDTree(pts)
    d, _ = tree.query(sample, k=2)
    return float(np.mean(d[:, 1]))
