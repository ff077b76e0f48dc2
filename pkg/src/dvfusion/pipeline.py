"""End-to-end orchestration: tiling -> partitioning -> coarse matching ->
refinement -> fine matching -> level integration.

Tiles are processed independently (optionally by a thread pool) and merged
deterministically by (tile id, point id); source tiles partition the cloud,
so per-tile fields never collide.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .coarse import (
    CorrTable,
    MatchSet,
    PatchMatch,
    filter_by_max_displacement,
    gate_match_set,
    lift_matches,
    match_patches_2d,
    match_patches_3d,
    merge_match_sets,
)
from .config import PipelineConfig
from .dvf import DisplacementVectorField, concat_fields
from .errors import (
    ConfigError,
    DegenerateSupport,
    DvfError,
    EmptyIndex,
    ImageTooSmall,
    NoVisibleImage,
    PipelineError,
)
from .features import (
    adaptive_downsample,
    aggregate_level_features,
    extract_point_features,
)
from .fine import assemble_level_field, estimate_patch_transform, integrate_levels, patch_dvf
from .geometry import PointCorrespondenceSet, as_points, mean_scan_resolution
from .io import PointFeatureSet
from .imaging import match_pixels, project_to_image, select_top_k_images
from .partition import hierarchical_partition
from .refinement import RefinementCriteria, refine
from .tiling import tile_pair

LEVELS = (1, 2, 3)


@dataclass
class TileOutcome:
    """Everything one tile pair contributed, with point ids already global."""

    pair_id: int
    field: DisplacementVectorField
    level_fields: tuple                 # per-level fields, global ids
    reports: list                       # quality reports, all levels
    timings: dict


@dataclass
class PipelineResult:
    field: DisplacementVectorField      # integrated across levels and tiles
    level_fields: tuple                 # per-level fields across tiles
    reports: list
    timings: dict                       # stage -> seconds
    coverage: float
    resolution: float
    tile_pairs: list = dc_field(default_factory=list)

    def summary(self) -> dict:
        out = {"n_estimates": len(self.field),
               "coverage": self.coverage,
               "mean_resolution": self.resolution}
        for lvl, f in zip(LEVELS, self.level_fields):
            out[f"n_level{lvl}"] = len(f)
        out.update({f"seconds_{k}": round(v, 3)
                    for k, v in sorted(self.timings.items())})
        return out


def _tick(timings: dict, stage: str, t0: float) -> float:
    now = time.perf_counter()
    timings[stage] = timings.get(stage, 0.0) + (now - t0)
    return now


def _fail(stage: str, pair_id: int, exc: Exception) -> PipelineError:
    return PipelineError(f"stage '{stage}', tile {pair_id}: {exc}")


def _remap_to_global(f: DisplacementVectorField,
                     global_ids: np.ndarray) -> DisplacementVectorField:
    if len(f) == 0:
        return f
    return DisplacementVectorField(global_ids[f.point_ids], f.positions,
                                   f.vectors, f.levels, f.patch_ids,
                                   f.modalities).sorted_by_id()


# ---------------------------------------------------------------------------
# Coarse-match checkpointing


def _checkpoint_path(directory, pair_id: int) -> Path:
    return Path(directory) / f"coarse_tile{pair_id:04d}.npz"


def save_coarse_checkpoint(path, match_sets: list) -> None:
    """Persist the per-level coarse matches of one tile (tile-local indices)."""
    arrays = {}
    for ms in match_sets:
        l = ms.level
        arrays[f"l{l}_src"] = np.array(ms.source_ids(), dtype=np.int64)
        arrays[f"l{l}_tgt"] = np.array(ms.target_ids(), dtype=np.int64)
        arrays[f"l{l}_mod"] = np.array([m.modality for m in ms.matches], dtype="U2")
        arrays[f"l{l}_count"] = np.array([len(m.support) for m in ms.matches],
                                         dtype=np.int64)
        if ms.matches:
            arrays[f"l{l}_si"] = np.concatenate(
                [m.support.source_indices for m in ms.matches])
            arrays[f"l{l}_ti"] = np.concatenate(
                [m.support.target_indices for m in ms.matches])
        else:
            arrays[f"l{l}_si"] = np.zeros(0, dtype=np.int64)
            arrays[f"l{l}_ti"] = np.zeros(0, dtype=np.int64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_coarse_checkpoint(path, src_points, tgt_points) -> list:
    """Rebuild per-level MatchSets from a checkpoint written for the same
    tile of the same inputs."""
    data = np.load(path)
    out = []
    for l in LEVELS:
        matches = []
        offsets = np.concatenate([[0], np.cumsum(data[f"l{l}_count"])])
        si, ti = data[f"l{l}_si"], data[f"l{l}_ti"]
        for j, (sid, tid, mod) in enumerate(zip(
                data[f"l{l}_src"], data[f"l{l}_tgt"], data[f"l{l}_mod"])):
            lo, hi = offsets[j], offsets[j + 1]
            support = PointCorrespondenceSet.from_indices(
                src_points, tgt_points, si[lo:hi], ti[lo:hi])
            matches.append(PatchMatch(l, int(sid), int(tid), str(mod), support))
        out.append(MatchSet(l, matches))
    return out


# ---------------------------------------------------------------------------
# Per-tile processing


def _tile_features(sub_pts, global_ids, cfg: PipelineConfig,
                   resolution: float, imported) -> PointFeatureSet:
    """Descriptors for the downsampled points of one tile.

    Imported feature files are keyed by point ids of the *full* cloud, so the
    tile-local sample is translated to global ids for the lookup and the
    result re-keyed locally.
    """
    sample = adaptive_downsample(sub_pts, voxel_factor=cfg.voxel_factor,
                                 resolution=resolution)
    if cfg.feature_provider == "import":
        looked_up = extract_point_features(
            sub_pts, sample_indices=global_ids[sample],
            provider="import", imported=imported)
        return PointFeatureSet(sample, looked_up.descriptors, "import")
    return extract_point_features(sub_pts, sample_indices=sample,
                                  resolution=resolution)


def _coarse_2d_table(tile_src_pts, tile_tgt_pts, cameras,
                     src_rasters: dict, tgt_rasters: dict,
                     cfg: PipelineConfig) -> CorrTable:
    """Lifted image correspondences for one tile, already gated by the
    plausible-displacement radius. Empty when no camera sees the tile."""
    try:
        image_ids = select_top_k_images(tile_src_pts, cameras,
                                        k=cfg.top_k_images)
    except NoVisibleImage:
        return CorrTable.empty()
    cams_by_id = {c.image_id: c for c in cameras}
    pix_sets, src_proj, tgt_proj = [], {}, {}
    for image_id in image_ids:
        if image_id not in src_rasters or image_id not in tgt_rasters:
            continue
        try:
            pm = match_pixels(src_rasters[image_id], tgt_rasters[image_id],
                              stride=cfg.ncc_stride,
                              template_radius=cfg.ncc_template_radius,
                              search_window=cfg.ncc_search_window,
                              min_conf=cfg.min_conf)
        except ImageTooSmall:
            continue
        pix_sets.append(pm)
        cam = cams_by_id[image_id]
        src_proj[image_id] = project_to_image(tile_src_pts, cam)
        tgt_proj[image_id] = project_to_image(tile_tgt_pts, cam)
    if not pix_sets:
        return CorrTable.empty()
    table = lift_matches(pix_sets, src_proj, tgt_proj,
                         tile_src_pts, tile_tgt_pts, r_px=cfg.lift_radius_px)
    return filter_by_max_displacement(table, cfg.max_displacement)


def _process_tile(pair, source_points, target_points, cfg: PipelineConfig,
                  resolution: float, cameras, src_rasters, tgt_rasters,
                  imported_features=None) -> TileOutcome:
    timings: dict = {}
    pid = pair.pair_id
    sub_src = source_points[pair.source.point_indices]
    sub_tgt = target_points[pair.target.point_indices]

    t0 = time.perf_counter()
    try:
        part_src = hierarchical_partition(
            sub_src, lambda_factors=cfg.lambda_factors,
            min_patch=cfg.min_patch, k_adj=cfg.k_adj)
        part_tgt = hierarchical_partition(
            sub_tgt, lambda_factors=cfg.lambda_factors,
            min_patch=cfg.min_patch, k_adj=cfg.k_adj)
    except DvfError as exc:
        raise _fail("partition", pid, exc) from exc
    t0 = _tick(timings, "partition", t0)

    checkpoint = (_checkpoint_path(cfg.checkpoint_dir, pid)
                  if cfg.checkpoint_dir else None)
    if checkpoint is not None and checkpoint.exists():
        merged_sets = load_coarse_checkpoint(checkpoint, sub_src, sub_tgt)
        t0 = _tick(timings, "coarse", t0)
    else:
        imp_src, imp_tgt = imported_features or (None, None)
        try:
            src_feats = _tile_features(sub_src, pair.source.point_indices,
                                       cfg, resolution, imp_src)
            tgt_feats = _tile_features(sub_tgt, pair.target.point_indices,
                                       cfg, resolution, imp_tgt)
            table = (
                _coarse_2d_table(sub_src, sub_tgt, cameras, src_rasters,
                                 tgt_rasters, cfg)
                if cfg.use_images else CorrTable.empty())
            merged_sets = []
            for level in LEVELS:
                m3d = match_patches_3d(
                    level,
                    aggregate_level_features(part_src.patches(level), src_feats),
                    aggregate_level_features(part_tgt.patches(level), tgt_feats),
                    src_feats, tgt_feats,
                    part_src.patches(level), part_tgt.patches(level),
                    sub_src, sub_tgt,
                    max_displacement=cfg.max_displacement)
                m2d = match_patches_2d(level, table, part_src.labels(level),
                                       part_tgt.labels(level))
                merged_sets.append(gate_match_set(
                    merge_match_sets(m3d, m2d), cfg.max_displacement,
                    min_support=cfg.min_support))
        except DvfError as exc:
            raise _fail("coarse", pid, exc) from exc
        if checkpoint is not None:
            save_coarse_checkpoint(checkpoint, merged_sets)
        t0 = _tick(timings, "coarse", t0)

    crit = RefinementCriteria(cfg.delta1, cfg.delta2)
    kept_sets, reports = [], []
    try:
        for ms in merged_sets:
            kept, reps = refine(ms, crit)
            kept_sets.append(kept)
            reports.extend(reps)
    except DvfError as exc:
        raise _fail("refine", pid, exc) from exc
    t0 = _tick(timings, "refine", t0)

    gate = cfg.icp_gate_factor * resolution
    level_fields = []
    try:
        for ms in kept_sets:
            patches_by_id = {p.patch_id: p for p in part_src.patches(ms.level)}
            disps = []
            for m in ms.matches:
                try:
                    t = estimate_patch_transform(
                        m, gate=gate, max_iter=cfg.icp_max_iter,
                        conv_tol=cfg.icp_conv_tol)
                except DegenerateSupport:
                    continue        # unusable support; the patch stays uncovered
                disps.append(patch_dvf(patches_by_id[m.source_patch_id], t,
                                       sub_src, m.modality))
            level_fields.append(assemble_level_field(disps, sub_src))
    except DvfError as exc:
        raise _fail("fine", pid, exc) from exc
    t0 = _tick(timings, "fine", t0)

    integrated = integrate_levels(*level_fields)
    global_ids = pair.source.point_indices
    outcome = TileOutcome(
        pid,
        _remap_to_global(integrated, global_ids),
        tuple(_remap_to_global(f, global_ids) for f in level_fields),
        reports, timings)
    _tick(timings, "integrate", t0)
    return outcome


# ---------------------------------------------------------------------------
# Full runs


def run_pipeline(source_points, target_points, cfg: PipelineConfig,
                 cameras=None, source_images=None, target_images=None,
                 imported_features=None) -> PipelineResult:
    """Estimate the displacement field from epoch 1 to epoch 2.

    `source_images`/`target_images` are Rasters whose image ids match the
    camera models; they are only consulted when `cfg.use_images` is set.
    `imported_features` is a (source, target) pair of PointFeatureSets for
    the import provider.
    """
    cfg.validate()
    source_points = as_points(source_points)
    target_points = as_points(target_points)
    cameras = list(cameras or [])
    if cfg.use_images and not cameras:
        raise ConfigError("image channel enabled but no cameras supplied")
    if cfg.feature_provider == "import" and (
            imported_features is None or None in tuple(imported_features)):
        raise ConfigError("feature_provider 'import' requires feature sets "
                          "for both epochs")
    src_rasters = {r.image_id: r for r in (source_images or [])}
    tgt_rasters = {r.image_id: r for r in (target_images or [])}
    if cfg.use_images and (not src_rasters or not tgt_rasters):
        raise ConfigError("image channel enabled but images missing for an epoch")

    timings: dict = {}
    t0 = time.perf_counter()
    try:
        resolution = mean_scan_resolution(source_points)
        pairs = tile_pair(source_points, target_points,
                          max_points=cfg.max_points,
                          overlap_margin=cfg.overlap_margin)
    except (DvfError, EmptyIndex) as exc:
        raise PipelineError(f"stage 'tiling': {exc}") from exc
    t0 = _tick(timings, "tiling", t0)

    def work(pair):
        return _process_tile(pair, source_points, target_points, cfg,
                             resolution, cameras, src_rasters, tgt_rasters,
                             imported_features)

    if cfg.n_workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            outcomes = list(pool.map(work, pairs))
    else:
        outcomes = [work(pair) for pair in pairs]
    outcomes.sort(key=lambda o: o.pair_id)
    for o in outcomes:
        for stage, sec in o.timings.items():
            timings[stage] = timings.get(stage, 0.0) + sec

    t0 = time.perf_counter()
    merged = concat_fields([o.field for o in outcomes])
    level_fields = tuple(
        concat_fields([o.level_fields[i] for o in outcomes])
        for i in range(len(LEVELS)))
    reports = [r for o in outcomes for r in o.reports]
    _tick(timings, "integrate", t0)

    from .evaluation import spatial_coverage
    coverage = spatial_coverage(merged, source_points,
                                voxel=cfg.coverage_voxel_factor * resolution)
    return PipelineResult(merged, level_fields, reports, timings, coverage,
                          resolution, tile_pairs=pairs)
