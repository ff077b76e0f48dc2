"""Point descriptors for coarse 3D matching: adaptive voxel downsampling, a
33-bin rotation-robust pair-angle histogram descriptor (builtin provider),
import of precomputed descriptors, and patch-level aggregation.

Descriptor design: classic fast point-feature histograms. Per point, the
three Darboux-frame angles of every neighbor pair are binned (11 bins each,
concatenated to 33); neighbor histograms are then distance-weighted into
the center one and the result L2-normalized. Normals are oriented to the
upper hemisphere — the natural convention for ground-based scans — which
makes the signed angles consistent across epochs and keeps the descriptor
sensitive to chirality (a folded variant would match mirror images).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPatchFeature, ImportKeyMismatch, InvalidParams
from .geometry import as_points, local_covariance_features, mean_scan_resolution
from .io import PointFeatureSet

DEFAULT_VOXEL_FACTOR = 2.0      # voxel edge = factor x mean scan resolution
DEFAULT_RADIUS_FACTOR = 5.0     # descriptor radius = factor x mean scan resolution
N_ANGLE_BINS = 11
DESCRIPTOR_DIM = 3 * N_ANGLE_BINS
_NORMAL_K = 16


def adaptive_downsample(points, voxel_factor: float = DEFAULT_VOXEL_FACTOR,
                        resolution: float | None = None) -> np.ndarray:
    """Voxel-grid downsample scaled to the cloud's own density.

    The voxel edge is `voxel_factor` x the mean scan resolution, so sparse
    clouds keep proportionally as many points as dense ones. Returns indices
    of one representative per occupied voxel: the point closest to the voxel
    centroid (ties toward the lower index).
    """
    pts = as_points(points)
    n = len(pts)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    if voxel_factor <= 0:
        raise InvalidParams(f"voxel_factor must be > 0, got {voxel_factor}")
    if resolution is None:
        resolution = mean_scan_resolution(pts)
    edge = voxel_factor * resolution
    if edge <= 0:
        return np.arange(n, dtype=np.int64)
    cell = np.floor((pts - pts.min(axis=0)) / edge).astype(np.int64)
    dims = cell.max(axis=0) + 1
    key = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]

    order = np.argsort(key, kind="stable")
    key_sorted = key[order]
    starts = np.flatnonzero(np.r_[True, key_sorted[1:] != key_sorted[:-1]])
    counts = np.diff(np.r_[starts, len(key_sorted)])

    # Per-voxel centroid, then the member nearest to it.
    group = np.repeat(np.arange(len(starts)), counts)
    sums = np.zeros((len(starts), 3))
    np.add.at(sums, group, pts[order])
    centroids = sums / counts[:, None]
    d2 = np.sum((pts[order] - centroids[group]) ** 2, axis=1)
    pick = np.lexsort((order, d2, group))
    first_of_group = np.searchsorted(group[pick], np.arange(len(starts)))
    reps = order[pick[first_of_group]]
    return np.sort(reps)


def _pair_angles(p_src, n_src, p_tgt, n_tgt):
    """Darboux-frame angles for point pairs, mapped to [0, 1].

    The frame origin is the end whose normal is closer to the connecting
    line (the usual source-selection rule). Normals are assumed oriented to
    the upper hemisphere by the caller, which makes the signed angles
    well-defined; keeping the signs (rather than folding to magnitudes)
    matters because folded histograms cannot tell a surface from its mirror
    image, and mirror-paired matches are isometric — invisible to every
    downstream consistency check.
    """
    d = p_tgt - p_src
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 1e-12
    d_hat = np.zeros_like(d)
    d_hat[ok] = d[ok] / dist[ok, None]

    cos1 = np.einsum("ij,ij->i", n_src, d_hat)
    cos2 = np.einsum("ij,ij->i", n_tgt, d_hat)
    swap = np.abs(cos1) < np.abs(cos2)
    u = np.where(swap[:, None], n_tgt, n_src)
    n_other = np.where(swap[:, None], n_src, n_tgt)
    # the connecting line runs from the chosen source end
    d_signed = np.where(swap[:, None], -d_hat, d_hat)
    phi = np.einsum("ij,ij->i", u, d_signed)

    v = np.cross(d_signed, u)
    v_norm = np.linalg.norm(v, axis=1)
    ok &= v_norm > 1e-12
    v[ok] = v[ok] / v_norm[ok, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, n_other)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_other),
                       np.einsum("ij,ij->i", u, n_other))
    return ((alpha + 1.0) / 2.0, (phi + 1.0) / 2.0,
            (theta + np.pi) / (2.0 * np.pi), ok)


def _bin_triplets(alpha, phi, theta):
    """Map three [0, 1] magnitudes onto 3 x 11 histogram bin ids."""
    def bins(x):
        return np.clip((x * N_ANGLE_BINS).astype(np.int64), 0, N_ANGLE_BINS - 1)
    return bins(alpha), bins(phi), bins(theta)


def pair_histogram_descriptors(points, radius: float,
                               query_indices=None) -> np.ndarray:
    """33-bin descriptors for the query points (default: all of `points`).

    Two passes in the classic style: per-point simplified histograms over the
    whole cloud first, then distance-weighted pooling of neighbor histograms
    into each query. Using every cloud point as context — not only the
    queries — keeps the histograms well-populated even when queries are a
    sparse downsample. Rows are L2-normalized; isolated points get a uniform
    histogram so the norm invariant still holds.
    """
    pts = as_points(points)
    n = len(pts)
    if query_indices is None:
        query = np.arange(n, dtype=np.int64)
    else:
        query = np.asarray(query_indices, dtype=np.int64)
    geo = local_covariance_features(pts, k=min(_NORMAL_K, n))
    normals = geo.normals.copy()
    normals[~geo.valid] = np.array([0.0, 0.0, 1.0])
    # Consistent upward orientation: ground-based scans see upper surfaces,
    # so +Z disambiguates the eigenvector sign the same way in both epochs.
    normals[normals[:, 2] < 0.0] *= -1.0

    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    spfh = np.zeros((n, DESCRIPTOR_DIM))
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        # evaluate the asymmetric frame once, accumulate into both endpoints
        alpha, phi, theta, ok = _pair_angles(pts[i], normals[i], pts[j], normals[j])
        i, j = i[ok], j[ok]
        ba, bp, bt = (b[ok] for b in _bin_triplets(alpha, phi, theta))
        for ends in (i, j):
            np.add.at(spfh, (ends, ba), 1.0)
            np.add.at(spfh, (ends, N_ANGLE_BINS + bp), 1.0)
            np.add.at(spfh, (ends, 2 * N_ANGLE_BINS + bt), 1.0)

    # Distance-weighted pooling of neighbor histograms into the queries.
    desc = spfh[query].copy()
    if len(pairs):
        nbrs = tree.query_ball_point(pts[query], radius)
        for row, (q, nb) in enumerate(zip(query, nbrs)):
            nb = np.asarray(nb, dtype=np.int64)
            nb = nb[nb != q]
            if len(nb) == 0:
                continue
            dist = np.linalg.norm(pts[nb] - pts[q], axis=1)
            wgt = 1.0 / np.maximum(dist, 1e-9)
            desc[row] += (wgt[:, None] * spfh[nb]).sum(axis=0) / len(nb)

    norms = np.linalg.norm(desc, axis=1)
    flat = norms <= 1e-12
    desc[flat] = 1.0 / np.sqrt(DESCRIPTOR_DIM)
    return desc / np.linalg.norm(desc, axis=1)[:, None]


def extract_point_features(points, sample_indices=None, provider: str = "builtin",
                           radius: float | None = None,
                           resolution: float | None = None,
                           imported: PointFeatureSet | None = None) -> PointFeatureSet:
    """Descriptors for the downsampled points of a tile.

    builtin: pair-angle histograms over radius 5x the tile's mean scan
    resolution, with the full tile as neighborhood context.
    import: rows of a precomputed set selected by point index; every sampled
    index must be covered or ImportKeyMismatch is raised.
    """
    pts = as_points(points)
    if sample_indices is None:
        sample_indices = adaptive_downsample(pts, resolution=resolution)
    sample_indices = np.asarray(sample_indices, dtype=np.int64)

    if provider == "import":
        if imported is None:
            raise InvalidParams("provider 'import' requires a loaded feature set")
        lookup = {int(k): i for i, k in enumerate(imported.point_indices)}
        missing = [int(k) for k in sample_indices if int(k) not in lookup]
        if missing:
            raise ImportKeyMismatch(
                f"imported features miss {len(missing)} sampled indices "
                f"(first missing: {missing[0]})")
        rows = np.array([lookup[int(k)] for k in sample_indices], dtype=np.int64)
        return PointFeatureSet(sample_indices, imported.descriptors[rows], "import")
    if provider != "builtin":
        raise InvalidParams(f"unknown feature provider {provider!r}")

    if radius is None:
        if resolution is None:
            resolution = mean_scan_resolution(pts) if len(pts) >= 2 else 1.0
        radius = DEFAULT_RADIUS_FACTOR * resolution
    desc = pair_histogram_descriptors(pts, radius, query_indices=sample_indices)
    return PointFeatureSet(sample_indices, desc, "builtin")


# ---------------------------------------------------------------------------
# Patch-level aggregation


class PatchFeature:
    """Unit-norm aggregate descriptor of one patch."""

    __slots__ = ("patch_id", "level", "vector")

    def __init__(self, patch_id: int, level: int, vector):
        self.patch_id = int(patch_id)
        self.level = int(level)
        self.vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"patch feature must be unit norm, got {norm}")

    def __repr__(self):
        return f"PatchFeature(level={self.level}, patch_id={self.patch_id})"


def aggregate_patch_feature(patch, feats: PointFeatureSet,
                            weights=None) -> PatchFeature:
    """Mean of the member descriptors, re-normalized; optionally weighted by a
    per-point weight table aligned with `feats`."""
    members = np.isin(feats.point_indices, patch.point_indices)
    if not members.any():
        raise EmptyPatchFeature(
            f"no featured point inside patch {patch.patch_id} (level {patch.level})")
    d = feats.descriptors[members]
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)[members]
        if w.sum() <= 0:
            raise InvalidParams("aggregation weights must have positive mass")
        vec = (d * w[:, None]).sum(axis=0) / w.sum()
    else:
        vec = d.mean(axis=0)
    norm = np.linalg.norm(vec)
    if norm <= 1e-12:
        raise EmptyPatchFeature(
            f"member descriptors of patch {patch.patch_id} cancel to zero")
    return PatchFeature(patch.patch_id, patch.level, vec / norm)


def aggregate_level_features(patches, feats: PointFeatureSet):
    """PatchFeatures for every patch that contains featured points; patches
    without any are silently skipped (they cannot be matched in 3D)."""
    out = []
    for patch in patches:
        try:
            out.append(aggregate_patch_feature(patch, feats))
        except EmptyPatchFeature:
            continue
    return out
