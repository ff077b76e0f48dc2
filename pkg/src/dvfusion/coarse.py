"""Coarse patch-to-patch matching.

Candidate matches come from two independent channels per hierarchy level:
mutual nearest-neighbour matching of aggregated patch descriptors (the 3D
channel) and pixel matches lifted through the cameras onto tile points (the
2D channel). Both carry point-level support pairs; the merge step prefers
the geometric channel where the two disagree and enforces an injective
source-to-target patch mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .dvf import MODALITY_2D, MODALITY_3D
from .errors import InvalidParams
from .geometry import PointCorrespondenceSet, as_points

DEFAULT_LIFT_RADIUS_PX = 2.0
DEFAULT_MAX_DISPLACEMENT = 10.0


@dataclass
class PatchMatch:
    """One matched patch pair with the point pairs that support it."""

    level: int
    source_patch_id: int
    target_patch_id: int
    modality: str
    support: PointCorrespondenceSet


@dataclass
class MatchSet:
    level: int
    matches: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.matches)

    def source_ids(self) -> list:
        return [m.source_patch_id for m in self.matches]

    def target_ids(self) -> list:
        return [m.target_patch_id for m in self.matches]

    def is_injective(self) -> bool:
        n = len(self.matches)
        return (len(set(self.source_ids())) == n
                and len(set(self.target_ids())) == n)


@dataclass
class CorrTable:
    """Flat point-pair table that, unlike PointCorrespondenceSet, may be
    empty and carries a per-pair confidence. Lifted 2D matches live here
    until they are grouped into patch support sets."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    source: np.ndarray
    target: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64).reshape(-1)
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.source_indices)

    @classmethod
    def empty(cls) -> "CorrTable":
        z = np.zeros(0)
        return cls(z, z, np.zeros((0, 3)), np.zeros((0, 3)), z)

    def take(self, sel) -> "CorrTable":
        return CorrTable(self.source_indices[sel], self.target_indices[sel],
                         self.source[sel], self.target[sel], self.confidence[sel])

    def to_correspondences(self) -> PointCorrespondenceSet:
        return PointCorrespondenceSet(self.source, self.target,
                                      self.source_indices, self.target_indices)


_MUTUAL_NN_BLOCK = 2 ** 22  # similarity-matrix entries held at once


def _blocked_argmax(a: np.ndarray, b: np.ndarray):
    """Row argmax of a @ b.T without materializing the full matrix."""
    n = len(a)
    rows = max(1, _MUTUAL_NN_BLOCK // max(1, len(b)))
    best_j = np.zeros(n, dtype=np.int64)
    best_s = np.full(n, -np.inf)
    for lo in range(0, n, rows):
        hi = min(lo + rows, n)
        sims = a[lo:hi] @ b.T
        best_j[lo:hi] = sims.argmax(axis=1)
        best_s[lo:hi] = sims[np.arange(hi - lo), best_j[lo:hi]]
    return best_j, best_s


def mutual_nn(a: np.ndarray, b: np.ndarray, allowed: np.ndarray | None = None):
    """Mutual nearest neighbours between two stacks of unit descriptors
    under cosine distance. Ties resolve to the lowest index. `allowed`
    optionally masks candidate pairs (shape (len(a), len(b))); a pair can
    only form where it is True. Returns the paired row indices (into a,
    into b)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if allowed is None and len(a) * len(b) > _MUTUAL_NN_BLOCK:
        fwd, _ = _blocked_argmax(a, b)
        bwd, _ = _blocked_argmax(b, a)
        ia = np.flatnonzero(bwd[fwd] == np.arange(len(a)))
        return ia, fwd[ia]
    sims = a @ b.T
    if allowed is not None:
        sims = np.where(allowed, sims, -np.inf)
    fwd = sims.argmax(axis=1)
    bwd = sims.argmax(axis=0)
    ia = np.flatnonzero(bwd[fwd] == np.arange(len(a)))
    ia = ia[np.isfinite(sims[ia, fwd[ia]])]
    return ia, fwd[ia]


MAX_MEMBERS_PER_MATCH = 8192
_MEMBER_SUBSAMPLE_SEED = 71


def _featured_members(patch, feats):
    """Positions (into the feature set) of featured points inside a patch."""
    return np.flatnonzero(np.isin(feats.point_indices, patch.point_indices))


def _cap_members(pos: np.ndarray, cap: int = MAX_MEMBERS_PER_MATCH) -> np.ndarray:
    """Bound the points fed into per-pair matching. Very large patches (a
    coarse level can cover most of a tile) would otherwise make the pairing
    quadratic in the tile size; a fixed-seed subsample keeps it bounded
    without changing behaviour for normal-sized patches."""
    if len(pos) <= cap:
        return pos
    rng = np.random.default_rng(_MEMBER_SUBSAMPLE_SEED)
    return pos[np.sort(rng.choice(len(pos), size=cap, replace=False))]


def _patch_radii(patches, points):
    """Max member distance from the centroid, per patch."""
    return np.array([np.linalg.norm(points[p.point_indices] - p.centroid,
                                    axis=1).max() for p in patches])


def match_patches_3d(level, src_patch_feats, tgt_patch_feats,
                     src_point_feats, tgt_point_feats,
                     src_patches, tgt_patches,
                     src_points, tgt_points,
                     max_displacement: float | None = None) -> MatchSet:
    """Mutual-NN matching of patch descriptors, with point-level support.

    When `max_displacement` is given, a target patch is only a candidate if
    its centroid lies within `max_displacement` of the source centroid plus
    both patch radii (the two epochs cut patches independently, so matching
    patches can have offset centroids even without motion). This keeps
    near-duplicate descriptors from pairing patches across the scene.

    Support pairs are mutual nearest neighbours between the two patches'
    featured (downsampled) points; a patch pair without any supporting point
    pair is dropped, since nothing downstream could estimate motion from it.
    """
    if not src_patch_feats or not tgt_patch_feats:
        return MatchSet(level)
    src_patch_feats = sorted(src_patch_feats, key=lambda f: f.patch_id)
    tgt_patch_feats = sorted(tgt_patch_feats, key=lambda f: f.patch_id)
    fa = np.stack([f.vector for f in src_patch_feats])
    fb = np.stack([f.vector for f in tgt_patch_feats])
    src_by_id = {p.patch_id: p for p in src_patches}
    tgt_by_id = {p.patch_id: p for p in tgt_patches}
    src_points = as_points(src_points)
    tgt_points = as_points(tgt_points)

    allowed = None
    if max_displacement is not None:
        pa = [src_by_id[f.patch_id] for f in src_patch_feats]
        pb = [tgt_by_id[f.patch_id] for f in tgt_patch_feats]
        ca = np.stack([p.centroid for p in pa])
        cb = np.stack([p.centroid for p in pb])
        ra = _patch_radii(pa, src_points)
        rb = _patch_radii(pb, tgt_points)
        gap = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2)
        allowed = gap <= max_displacement + ra[:, None] + rb[None, :]

    matches = []
    for ia, ib in zip(*mutual_nn(fa, fb, allowed=allowed)):
        sid = src_patch_feats[ia].patch_id
        tid = tgt_patch_feats[ib].patch_id
        pos_a = _cap_members(_featured_members(src_by_id[sid], src_point_feats))
        pos_b = _cap_members(_featured_members(tgt_by_id[tid], tgt_point_feats))
        if len(pos_a) == 0 or len(pos_b) == 0:
            continue
        pa, pb = mutual_nn(src_point_feats.descriptors[pos_a],
                           tgt_point_feats.descriptors[pos_b])
        if len(pa) == 0:
            continue
        si = src_point_feats.point_indices[pos_a[pa]]
        ti = tgt_point_feats.point_indices[pos_b[pb]]
        support = PointCorrespondenceSet.from_indices(src_points, tgt_points, si, ti)
        matches.append(PatchMatch(level, sid, tid, MODALITY_3D, support))
    return MatchSet(level, matches)


def _dedup_keep_best(key, conf):
    """Row selection keeping, per duplicated key, the highest-confidence row
    (first row on equal confidence)."""
    order = np.lexsort((np.arange(len(key)), -conf))
    _, first = np.unique(key[order], return_index=True)
    return np.sort(order[first])


def lift_matches(pixmatch_sets, src_projections, tgt_projections,
                 src_points, tgt_points,
                 r_px: float = DEFAULT_LIFT_RADIUS_PX) -> CorrTable:
    """Turn pixel matches into 3D point pairs via nearest projected points.

    Each match end snaps to the closest validly-projected tile point within
    `r_px` pixels; matches with a bare end are dropped. Within an image pair,
    duplicated 3D points keep their highest-confidence row. Across image
    pairs, the pair with the most surviving matches is taken first and later
    pairs only contribute points not matched yet.
    """
    src_points = as_points(src_points)
    tgt_points = as_points(tgt_points)
    per_pair = []
    for pm in pixmatch_sets:
        img_s, img_t = pm.image_pair
        if img_s not in src_projections or img_t not in tgt_projections:
            raise InvalidParams(f"no projections for image pair {pm.image_pair}")
        if len(pm) == 0:
            continue
        sp = src_projections[img_s]
        tp = tgt_projections[img_t]
        sv = np.flatnonzero(sp.valid)
        tv = np.flatnonzero(tp.valid)
        if len(sv) == 0 or len(tv) == 0:
            continue
        m = pm.matches
        ds, js = cKDTree(np.column_stack([sp.u[sv], sp.v[sv]])).query(m[:, 0:2])
        dt, jt = cKDTree(np.column_stack([tp.u[tv], tp.v[tv]])).query(m[:, 2:4])
        ok = (ds <= r_px) & (dt <= r_px)
        if not ok.any():
            continue
        si, ti, conf = sv[js[ok]], tv[jt[ok]], m[ok, 4]
        keep = _dedup_keep_best(si, conf)
        si, ti, conf = si[keep], ti[keep], conf[keep]
        keep = _dedup_keep_best(ti, conf)
        si, ti, conf = si[keep], ti[keep], conf[keep]
        per_pair.append((len(si), pm.image_pair, si, ti, conf))

    per_pair.sort(key=lambda t: (-t[0], t[1]))
    seen_src: set = set()
    seen_tgt: set = set()
    rows_s, rows_t, rows_c = [], [], []
    for _, _, si, ti, conf in per_pair:
        for s, t, c in zip(si, ti, conf):
            if s in seen_src or t in seen_tgt:
                continue
            seen_src.add(s)
            seen_tgt.add(t)
            rows_s.append(s)
            rows_t.append(t)
            rows_c.append(c)
    if not rows_s:
        return CorrTable.empty()
    si = np.asarray(rows_s, dtype=np.int64)
    ti = np.asarray(rows_t, dtype=np.int64)
    conf = np.asarray(rows_c)
    order = np.argsort(si)
    si, ti, conf = si[order], ti[order], conf[order]
    return CorrTable(si, ti, src_points[si], tgt_points[ti], conf)


def filter_by_max_displacement(table: CorrTable,
                               d_max: float = DEFAULT_MAX_DISPLACEMENT) -> CorrTable:
    """Drop pairs whose implied displacement magnitude exceeds `d_max`."""
    if len(table) == 0:
        return table
    d = np.linalg.norm(table.target - table.source, axis=1)
    return table.take(d <= d_max)


def gate_match_set(ms: MatchSet,
                   d_max: float = DEFAULT_MAX_DISPLACEMENT,
                   min_support: int = 3) -> MatchSet:
    """Apply the plausible-displacement bound to patch-match supports.

    Support pairs implying a displacement above `d_max` are dropped, and a
    match whose support shrinks below `min_support` pairs (floor 3, the
    rigid-fit minimum) is discarded entirely. This is the patch-level
    counterpart of filter_by_max_displacement: feature matching alone
    happily pairs two similar-looking patches from opposite ends of a scene.
    """
    min_support = max(int(min_support), 3)
    out = []
    for m in ms.matches:
        d = np.linalg.norm(m.support.target - m.support.source, axis=1)
        keep = d <= d_max
        if keep.sum() < min_support:
            continue
        if keep.all():
            out.append(m)
            continue
        out.append(replace(m, support=PointCorrespondenceSet(
            m.support.source[keep], m.support.target[keep],
            m.support.source_indices[keep], m.support.target_indices[keep])))
    return MatchSet(ms.level, out)


def match_patches_2d(level, table: CorrTable, src_labels, tgt_labels) -> MatchSet:
    """Vote lifted point pairs into patch matches.

    Every pair votes (source patch -> target patch); per source patch the
    most-voted target wins, ties resolved by higher summed confidence and
    then lower target patch_id. The winning pairs become the support.
    Target-side injectivity is *not* enforced here — the merge handles it.
    """
    src_labels = np.asarray(src_labels)
    tgt_labels = np.asarray(tgt_labels)
    if len(table) == 0:
        return MatchSet(level)
    sp = src_labels[table.source_indices]
    tp = tgt_labels[table.target_indices]
    ok = (sp >= 0) & (tp >= 0)
    matches = []
    for sid in np.unique(sp[ok]):
        rows = ok & (sp == sid)
        cand = tp[rows]
        counts = np.bincount(cand)
        conf_sum = np.zeros_like(counts, dtype=np.float64)
        np.add.at(conf_sum, cand, table.confidence[rows])
        present = np.flatnonzero(counts)
        best = min(present, key=lambda t: (-counts[t], -conf_sum[t], t))
        votes = rows & (tp == best)
        support = table.take(votes).to_correspondences()
        matches.append(PatchMatch(level, int(sid), int(best), MODALITY_2D, support))
    return MatchSet(level, matches)


def _extend_support(base: PointCorrespondenceSet,
                    extra: PointCorrespondenceSet) -> PointCorrespondenceSet:
    """Append pairs from `extra` that do not reuse a point of `base`."""
    fresh = (~np.isin(extra.source_indices, base.source_indices)
             & ~np.isin(extra.target_indices, base.target_indices))
    if not fresh.any():
        return base
    return PointCorrespondenceSet(
        np.vstack([base.source, extra.source[fresh]]),
        np.vstack([base.target, extra.target[fresh]]),
        np.concatenate([base.source_indices, extra.source_indices[fresh]]),
        np.concatenate([base.target_indices, extra.target_indices[fresh]]))


def merge_match_sets(m3d: MatchSet, m2d: MatchSet) -> MatchSet:
    """Union of the two channels with geometric priority.

    A source patch present in both keeps its 3D match; the 2D support is
    appended when both channels agree on the target and discarded otherwise.
    Injectivity: when several sources claim one target, the larger support
    wins (tie: lower source patch_id).
    """
    if m3d.level != m2d.level:
        raise InvalidParams(f"cannot merge levels {m3d.level} and {m2d.level}")
    merged = {m.source_patch_id: m for m in m3d.matches}
    if len(merged) != len(m3d.matches):
        raise InvalidParams("3D match set has duplicate source patches")
    for m in sorted(m2d.matches, key=lambda m: m.source_patch_id):
        held = merged.get(m.source_patch_id)
        if held is None:
            merged[m.source_patch_id] = m
        elif held.target_patch_id == m.target_patch_id:
            merged[m.source_patch_id] = replace(
                held, support=_extend_support(held.support, m.support))
    by_target: dict = {}
    for sid in sorted(merged):
        m = merged[sid]
        rival = by_target.get(m.target_patch_id)
        if rival is None or len(m.support) > len(rival.support):
            by_target[m.target_patch_id] = m
    matches = sorted(by_target.values(), key=lambda m: m.source_patch_id)
    return MatchSet(m3d.level, matches)
