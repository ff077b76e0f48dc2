"""Accuracy metrics against external observations, spatial coverage, and the
two reference baselines (uniform-tile ICP and normal-projected distances).

Deviations follow the |dDX|, |dDY|, |dDZ|, |dDS| convention: absolute
per-component differences plus the absolute difference of the displacement
magnitudes. All joins run in the source-epoch frame: observations carry a
first-epoch position and are compared against estimates at nearby source
points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dvf import MODALITY_3D, DisplacementVectorField
from .errors import (
    DegenerateInput,
    EmptyNeighborhood,
    InvalidParams,
    NoEstimateNearObservation,
)
from .geometry import (
    NNIndex,
    as_points,
    icp_point_to_point,
    local_covariance_features,
    mean_scan_resolution,
)

DEFAULT_COMPARE_RADIUS = 15.0
COMPONENT_NAMES = ("dx", "dy", "dz", "ds")


@dataclass
class ObservationComparison:
    """Estimate-vs-reference at one external observation."""

    obs_id: str
    estimate: np.ndarray
    reference: np.ndarray
    deviations: np.ndarray          # |dDX|, |dDY|, |dDZ|, |dDS|
    n_members: int = 1
    member_mad: np.ndarray | None = None


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    coverage: float | None = None

    def deviation_matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 4))
        return np.stack([r.deviations for r in self.rows])

    def mean_deviations(self) -> np.ndarray:
        return self.deviation_matrix().mean(axis=0)

    def mad_deviations(self) -> np.ndarray:
        """Mean absolute deviation of each column about its mean, across
        observations."""
        m = self.deviation_matrix()
        return np.abs(m - m.mean(axis=0)).mean(axis=0)


def _deviations(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    comp = np.abs(estimate - reference)
    ds = abs(np.linalg.norm(estimate) - np.linalg.norm(reference))
    return np.append(comp, ds)


def spatial_coverage(dvf: DisplacementVectorField, source_points,
                     voxel: float) -> float:
    """Fraction of occupied source voxels that hold at least one estimate."""
    if voxel <= 0:
        raise InvalidParams(f"voxel size must be positive, got {voxel}")
    src = as_points(source_points)
    origin = src.min(axis=0)

    def keys(pts):
        cell = np.floor((pts - origin) / voxel).astype(np.int64)
        return {tuple(c) for c in cell}

    occupied = keys(src)
    if not occupied:
        return 0.0
    if len(dvf) == 0:
        return 0.0
    covered = keys(dvf.positions) & occupied
    return len(covered) / len(occupied)


def compare_nn(dvf: DisplacementVectorField, observations,
               max_dist: float = np.inf) -> EvaluationReport:
    """Compare each observation against the estimate at the nearest covered
    source point.

    Raises:
        NoEstimateNearObservation: empty field, or nearest estimate farther
            than `max_dist` from the observation position.
    """
    if len(dvf) == 0:
        raise NoEstimateNearObservation("displacement field is empty")
    index = NNIndex(dvf.positions)
    report = EvaluationReport()
    for obs in observations:
        idx, dist = index.query_nearest(obs.position[None, :])
        if dist[0] > max_dist:
            raise NoEstimateNearObservation(
                f"observation {obs.id}: nearest estimate at {dist[0]:.3f} m "
                f"exceeds {max_dist:.3f} m")
        est = dvf.vectors[idx[0]]
        report.rows.append(ObservationComparison(
            obs.id, est.copy(), obs.displacement.copy(),
            _deviations(est, obs.displacement)))
    return report


def compare_mean_radius(dvf: DisplacementVectorField, observations,
                        radius: float = DEFAULT_COMPARE_RADIUS,
                        radius_overrides: dict | None = None) -> EvaluationReport:
    """Compare each observation against the mean estimate within a radius.

    `member_mad` holds the mean absolute deviation of member components (and
    magnitudes, fourth column) about the neighbourhood mean. A per-id entry
    in `radius_overrides` replaces the default radius for that observation.

    Raises:
        EmptyNeighborhood: no estimate within the effective radius.
    """
    if radius <= 0:
        raise InvalidParams(f"radius must be positive, got {radius}")
    overrides = radius_overrides or {}
    if len(dvf) == 0:
        raise EmptyNeighborhood("displacement field is empty")
    tree = cKDTree(dvf.positions)
    report = EvaluationReport()
    for obs in observations:
        r = float(overrides.get(obs.id, radius))
        if r <= 0:
            raise InvalidParams(f"radius override for {obs.id} must be positive")
        members = tree.query_ball_point(obs.position, r)
        if not members:
            raise EmptyNeighborhood(
                f"observation {obs.id}: no estimate within {r:.3f} m")
        vecs = dvf.vectors[np.asarray(members, dtype=np.int64)]
        est = vecs.mean(axis=0)
        comp_mad = np.abs(vecs - est).mean(axis=0)
        mags = np.linalg.norm(vecs, axis=1)
        mag_mad = np.abs(mags - mags.mean()).mean()
        report.rows.append(ObservationComparison(
            obs.id, est, obs.displacement.copy(),
            _deviations(est, obs.displacement),
            n_members=len(members),
            member_mad=np.append(comp_mad, mag_mad)))
    return report


# ---------------------------------------------------------------------------
# Baselines


def baseline_piecewise_icp(source_points, target_points, tile_size: float,
                           max_pair_dist: float | None = None) -> DisplacementVectorField:
    """Uniform-grid tile ICP: one rigid fit per 2D tile, applied to every
    source point of the tile. Tiles whose fit fails contribute nothing."""
    if tile_size <= 0:
        raise InvalidParams(f"tile size must be positive, got {tile_size}")
    src = as_points(source_points)
    tgt = as_points(target_points)
    origin = np.minimum(src[:, :2].min(axis=0), tgt[:, :2].min(axis=0))
    s_key = np.floor((src[:, :2] - origin) / tile_size).astype(np.int64)
    t_key = np.floor((tgt[:, :2] - origin) / tile_size).astype(np.int64)

    def group(keys):
        out: dict = {}
        for i, k in enumerate(map(tuple, keys)):
            out.setdefault(k, []).append(i)
        return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}

    s_tiles = group(s_key)
    t_tiles = group(t_key)
    ids, vecs, patch = [], [], []
    for tile_no, key in enumerate(sorted(s_tiles)):
        s_idx = s_tiles[key]
        t_idx = t_tiles.get(key)
        if t_idx is None:
            continue
        try:
            result = icp_point_to_point(src[s_idx], tgt[t_idx],
                                        max_pair_dist=max_pair_dist)
        except DegenerateInput:
            continue
        moved = result.transform.apply(src[s_idx])
        ids.append(s_idx)
        vecs.append(moved - src[s_idx])
        patch.append(np.full(len(s_idx), tile_no, dtype=np.int64))
    if not ids:
        return DisplacementVectorField.empty()
    ids = np.concatenate(ids)
    n = len(ids)
    return DisplacementVectorField(
        ids, src[ids], np.vstack(vecs), np.zeros(n, dtype=np.int64),
        np.concatenate(patch), np.full(n, MODALITY_3D, dtype="U2")).sorted_by_id()


@dataclass
class M3C2Result:
    """Signed distances along per-core-point normals; NaN where either
    cylinder was empty (`valid` False)."""

    core_indices: np.ndarray
    normals: np.ndarray
    distances: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.core_indices)


def baseline_m3c2(source_points, target_points,
                  normal_radius: float, cylinder_radius: float,
                  max_depth: float = 10.0,
                  core_indices=None) -> M3C2Result:
    """Distance along the local surface normal between the epochs.

    Per core point: PCA normal over `normal_radius` neighbours in the source;
    both epochs' points inside the normal-aligned cylinder (radius
    `cylinder_radius`, half-depth `max_depth`) are averaged and the mean
    difference is projected on the normal. Blind to motion tangential to the
    surface by construction.
    """
    if normal_radius <= 0 or cylinder_radius <= 0:
        raise InvalidParams("radii must be positive")
    src = as_points(source_points)
    tgt = as_points(target_points)
    if core_indices is None:
        from .features import adaptive_downsample
        core_indices = adaptive_downsample(src)
    core_indices = np.asarray(core_indices, dtype=np.int64)
    cores = src[core_indices]
    geo = local_covariance_features(src, radius=normal_radius)
    normals = geo.normals[core_indices]

    s_tree = cKDTree(src)
    t_tree = cKDTree(tgt)
    reach = float(np.hypot(cylinder_radius, max_depth))
    distances = np.full(len(cores), np.nan)
    valid = np.zeros(len(cores), dtype=bool)
    for i, (c, n) in enumerate(zip(cores, normals)):
        if not np.any(n):
            continue

        def cylinder_mean(tree, pts):
            cand = tree.query_ball_point(c, reach)
            if not cand:
                return None
            rel = pts[np.asarray(cand, dtype=np.int64)] - c
            along = rel @ n
            r_perp = np.linalg.norm(rel - along[:, None] * n, axis=1)
            inside = (np.abs(along) <= max_depth) & (r_perp <= cylinder_radius)
            if not inside.any():
                return None
            return rel[inside].mean(axis=0)

        mean_s = cylinder_mean(s_tree, src)
        mean_t = cylinder_mean(t_tree, tgt)
        if mean_s is None or mean_t is None:
            continue
        distances[i] = float((mean_t - mean_s) @ n)
        valid[i] = True
    return M3C2Result(core_indices, normals, distances, valid)


def dump_report(path, report: EvaluationReport) -> None:
    """CSV with one row per observation plus a trailing summary block."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["obs_id", "est_x", "est_y", "est_z",
                    "ref_x", "ref_y", "ref_z",
                    "abs_ddx", "abs_ddy", "abs_ddz", "abs_dds", "n_members"])
        for r in report.rows:
            w.writerow([r.obs_id,
                        *(f"{v:.6f}" for v in r.estimate),
                        *(f"{v:.6f}" for v in r.reference),
                        *(f"{v:.6f}" for v in r.deviations),
                        r.n_members])
        if report.rows:
            w.writerow(["mean", "", "", "", "", "", "",
                        *(f"{v:.6f}" for v in report.mean_deviations()), ""])
            w.writerow(["mad", "", "", "", "", "", "",
                        *(f"{v:.6f}" for v in report.mad_deviations()), ""])
        if report.coverage is not None:
            w.writerow(["coverage", f"{report.coverage:.6f}",
                        "", "", "", "", "", "", "", "", "", ""])


def format_report(report: EvaluationReport) -> str:
    """Human-readable deviation table."""
    lines = [f"{'obs':>8} {'|dDX|':>9} {'|dDY|':>9} {'|dDZ|':>9} {'|dDS|':>9}"]
    for r in report.rows:
        lines.append(f"{r.obs_id:>8} " +
                     " ".join(f"{v:9.4f}" for v in r.deviations))
    if report.rows:
        lines.append(f"{'mean':>8} " +
                     " ".join(f"{v:9.4f}" for v in report.mean_deviations()))
        lines.append(f"{'MAD':>8} " +
                     " ".join(f"{v:9.4f}" for v in report.mad_deviations()))
    if report.coverage is not None:
        lines.append(f"coverage {report.coverage:.1%}")
    return "\n".join(lines)
