"""Coarse matching: mutual-NN patch pairing, 2D match lifting, displacement
gating, patch voting, and channel merging."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvfusion.coarse import (
    CorrTable,
    MatchSet,
    PatchMatch,
    filter_by_max_displacement,
    lift_matches,
    match_patches_2d,
    match_patches_3d,
    merge_match_sets,
    mutual_nn,
)
from dvfusion.dvf import MODALITY_2D, MODALITY_3D
from dvfusion.errors import InvalidParams
from dvfusion.features import PatchFeature
from dvfusion.geometry import PointCorrespondenceSet
from dvfusion.imaging import Projection
from dvfusion.io import PixelMatchSet, PointFeatureSet
from dvfusion.partition import Patch


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def brute_force_mutual_nn(a, b):
    pairs = []
    for i in range(len(a)):
        sims_i = [float(a[i] @ b[j]) for j in range(len(b))]
        j = int(np.argmax(sims_i))
        sims_j = [float(a[k] @ b[j]) for k in range(len(a))]
        if int(np.argmax(sims_j)) == i:
            pairs.append((i, j))
    return pairs


# ---------------------------------------------------------------------------
# Mutual NN


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_mutual_nn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = unit_rows(rng, 20, 6)
    b = unit_rows(rng, 20, 6)
    ia, ib = mutual_nn(a, b)
    assert list(zip(ia.tolist(), ib.tolist())) == brute_force_mutual_nn(a, b)


def test_mutual_nn_is_injective():
    rng = np.random.default_rng(1)
    ia, ib = mutual_nn(unit_rows(rng, 30, 5), unit_rows(rng, 25, 5))
    assert len(set(ia.tolist())) == len(ia)
    assert len(set(ib.tolist())) == len(ib)


# ---------------------------------------------------------------------------
# 3D patch matching


def patch_world(vectors, level=1, start_point=0):
    """One single-point patch per descriptor; the point descriptor equals the
    patch descriptor, so every matched pair has a support pair."""
    patches, feats_idx = [], []
    for k, _ in enumerate(vectors):
        idx = start_point + k
        patches.append(Patch(level, k, [idx], np.zeros(3)))
        feats_idx.append(idx)
    vec = np.asarray(vectors, dtype=np.float64)
    pf = [PatchFeature(k, level, v) for k, v in enumerate(vec)]
    feats = PointFeatureSet(np.asarray(feats_idx), vec)
    n_pts = start_point + len(vectors)
    points = np.arange(n_pts * 3, dtype=np.float64).reshape(n_pts, 3)
    return pf, feats, patches, points


def test_identical_feature_lists_match_identity():
    rng = np.random.default_rng(2)
    vecs = unit_rows(rng, 8, 4)
    pf_s, feats_s, patches_s, pts_s = patch_world(vecs)
    pf_t, feats_t, patches_t, pts_t = patch_world(vecs)
    ms = match_patches_3d(1, pf_s, pf_t, feats_s, feats_t,
                          patches_s, patches_t, pts_s, pts_t)
    assert ms.source_ids() == ms.target_ids() == list(range(8))
    assert ms.is_injective()
    assert all(m.modality == MODALITY_3D for m in ms.matches)
    assert all(len(m.support) >= 1 for m in ms.matches)


def test_non_mutual_pair_is_dropped():
    deg = np.deg2rad
    a = [np.cos(deg(0)), np.sin(deg(0))]        # nearest target: X
    b = [np.cos(deg(10)), np.sin(deg(10))]      # equals X exactly
    x = [np.cos(deg(10)), np.sin(deg(10))]
    y = [np.cos(deg(80)), np.sin(deg(80))]
    pf_s, feats_s, patches_s, pts_s = patch_world([a, b])
    pf_t, feats_t, patches_t, pts_t = patch_world([x, y])
    ms = match_patches_3d(1, pf_s, pf_t, feats_s, feats_t,
                          patches_s, patches_t, pts_s, pts_t)
    # X's nearest source is B (exact), so A stays unmatched
    assert ms.source_ids() == [1]
    assert ms.target_ids() == [0]


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_patch_matching_equals_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    va = unit_rows(rng, 20, 8)
    vb = unit_rows(rng, 20, 8)
    pf_s, feats_s, patches_s, pts_s = patch_world(va)
    pf_t, feats_t, patches_t, pts_t = patch_world(vb)
    ms = match_patches_3d(1, pf_s, pf_t, feats_s, feats_t,
                          patches_s, patches_t, pts_s, pts_t)
    got = list(zip(ms.source_ids(), ms.target_ids()))
    assert got == brute_force_mutual_nn(va, vb)


def test_role_swap_transposes_matches():
    rng = np.random.default_rng(3)
    va = unit_rows(rng, 15, 6)
    vb = unit_rows(rng, 12, 6)
    pf_s, feats_s, patches_s, pts_s = patch_world(va)
    pf_t, feats_t, patches_t, pts_t = patch_world(vb)
    fwd = match_patches_3d(1, pf_s, pf_t, feats_s, feats_t,
                           patches_s, patches_t, pts_s, pts_t)
    rev = match_patches_3d(1, pf_t, pf_s, feats_t, feats_s,
                           patches_t, patches_s, pts_t, pts_s)
    assert (sorted(zip(fwd.source_ids(), fwd.target_ids()))
            == sorted((t, s) for s, t in zip(rev.source_ids(), rev.target_ids())))


# ---------------------------------------------------------------------------
# Lifting 2D matches


def line_projection(n, spacing=10.0, offset=0.0):
    """n points projected to a pixel row at u = offset + spacing * i."""
    u = offset + spacing * np.arange(n, dtype=np.float64)
    return Projection(u, np.zeros(n), np.ones(n), np.ones(n, dtype=bool))


def line_points(n):
    return np.column_stack([np.arange(n, dtype=np.float64),
                            np.zeros(n), np.zeros(n)])


def test_exact_pixel_match_lifts_to_point_pair():
    src_proj = {"a": line_projection(5)}
    tgt_proj = {"b": line_projection(5)}
    pm = PixelMatchSet(("a", "b"), [[10.0, 0.0, 20.0, 0.0, 0.9]])
    out = lift_matches([pm], src_proj, tgt_proj, line_points(5), line_points(5))
    assert out.source_indices.tolist() == [1]
    assert out.target_indices.tolist() == [2]
    assert out.confidence.tolist() == [0.9]


def test_match_beyond_radius_dropped():
    src_proj = {"a": line_projection(5)}
    tgt_proj = {"b": line_projection(5)}
    # target end lands 3 px from the nearest projected point
    pm = PixelMatchSet(("a", "b"), [[10.0, 0.0, 23.0, 0.0, 0.9]])
    out = lift_matches([pm], src_proj, tgt_proj, line_points(5), line_points(5),
                       r_px=2.0)
    assert len(out) == 0


def test_lift_equals_projection_table_oracle():
    rng = np.random.default_rng(4)
    n = 40
    src_proj = {"a": line_projection(n, spacing=7.0)}
    tgt_proj = {"b": line_projection(n, spacing=7.0, offset=3.0)}
    # known point mapping i -> (i + 2) with pixel coords straight off the table
    table = [(i, i + 2) for i in range(0, 30, 3)]
    rows = [[7.0 * s, 0.0, 3.0 + 7.0 * t, 0.0, float(rng.uniform(0.5, 1.0))]
            for s, t in table]
    pm = PixelMatchSet(("a", "b"), rows)
    out = lift_matches([pm], src_proj, tgt_proj, line_points(n), line_points(n))
    assert list(zip(out.source_indices, out.target_indices)) == table


def test_duplicate_source_keeps_highest_confidence():
    src_proj = {"a": line_projection(5)}
    tgt_proj = {"b": line_projection(5)}
    pm = PixelMatchSet(("a", "b"), [
        [10.0, 0.0, 10.0, 0.0, 0.6],
        [10.5, 0.0, 20.0, 0.0, 0.9],     # same source point, better match
    ])
    out = lift_matches([pm], src_proj, tgt_proj, line_points(5), line_points(5))
    assert out.source_indices.tolist() == [1]
    assert out.target_indices.tolist() == [2]
    assert out.confidence.tolist() == [0.9]


def test_richest_image_pair_wins_conflicts():
    src_proj = {"a": line_projection(5), "c": line_projection(5)}
    tgt_proj = {"b": line_projection(5), "d": line_projection(5)}
    rich = PixelMatchSet(("a", "b"), [
        [0.0, 0.0, 0.0, 0.0, 0.7],
        [10.0, 0.0, 10.0, 0.0, 0.7],
        [20.0, 0.0, 20.0, 0.0, 0.7],
    ])
    poor = PixelMatchSet(("c", "d"), [[0.0, 0.0, 30.0, 0.0, 0.99]])
    out = lift_matches([poor, rich], src_proj, tgt_proj,
                       line_points(5), line_points(5))
    # the 3-match pair is integrated first; the conflicting single match for
    # source point 0 arrives too late
    assert list(zip(out.source_indices, out.target_indices)) == [(0, 0), (1, 1), (2, 2)]


def test_lift_without_projections_raises():
    pm = PixelMatchSet(("a", "b"), [[0.0, 0.0, 0.0, 0.0, 0.8]])
    with pytest.raises(InvalidParams):
        lift_matches([pm], {}, {}, line_points(2), line_points(2))


# ---------------------------------------------------------------------------
# Displacement gate


def table_from_displacements(mags):
    n = len(mags)
    src = np.zeros((n, 3))
    src[:, 1] = np.arange(n) * 100.0       # keep pairs apart
    tgt = src.copy()
    tgt[:, 0] += np.asarray(mags, dtype=np.float64)
    return CorrTable(np.arange(n), np.arange(n), src, tgt, np.full(n, 0.8))


def test_displacement_gate_boundary():
    out = filter_by_max_displacement(table_from_displacements([9.9, 10.1, 0.0]))
    assert out.source_indices.tolist() == [0, 2]


def test_all_outliers_filtered_to_empty():
    out = filter_by_max_displacement(table_from_displacements([11.0, 250.0]))
    assert len(out) == 0


def test_gate_is_idempotent_and_subset():
    rng = np.random.default_rng(5)
    table = table_from_displacements(rng.uniform(0, 20, 50))
    once = filter_by_max_displacement(table)
    twice = filter_by_max_displacement(once)
    assert set(once.source_indices) <= set(table.source_indices)
    assert np.array_equal(once.source_indices, twice.source_indices)


# ---------------------------------------------------------------------------
# 2D patch voting


def vote_table(src_idx, tgt_idx, conf):
    src_idx = np.asarray(src_idx)
    tgt_idx = np.asarray(tgt_idx)
    rng = np.random.default_rng(99)
    src_pts = rng.uniform(0, 50, (int(src_idx.max()) + 1, 3))
    tgt_pts = rng.uniform(0, 50, (int(tgt_idx.max()) + 1, 3))
    return CorrTable(src_idx, tgt_idx, src_pts[src_idx], tgt_pts[tgt_idx],
                     np.asarray(conf, dtype=np.float64))


def test_unanimous_votes_give_single_match():
    table = vote_table([0, 1, 2], [0, 1, 2], [0.8, 0.8, 0.8])
    src_labels = np.array([4, 4, 4])
    tgt_labels = np.array([7, 7, 7])
    ms = match_patches_2d(2, table, src_labels, tgt_labels)
    assert [(m.source_patch_id, m.target_patch_id) for m in ms.matches] == [(4, 7)]
    assert ms.matches[0].modality == MODALITY_2D
    assert len(ms.matches[0].support) == 3


def test_vote_tie_broken_by_summed_confidence():
    # 5 votes for target patch 0 totalling 4.0, 5 votes for patch 1
    # totalling 3.0 -> patch 0 wins
    table = vote_table(np.arange(10), np.arange(10),
                       [0.8] * 5 + [0.6] * 5)
    src_labels = np.zeros(10, dtype=int)
    tgt_labels = np.array([0] * 5 + [1] * 5)
    ms = match_patches_2d(1, table, src_labels, tgt_labels)
    assert [(m.source_patch_id, m.target_patch_id) for m in ms.matches] == [(0, 0)]
    assert len(ms.matches[0].support) == 5


def test_full_tie_prefers_lower_patch_id():
    table = vote_table([0, 1], [0, 1], [0.7, 0.7])
    ms = match_patches_2d(1, table, np.zeros(2, dtype=int), np.array([3, 1]))
    assert [(m.source_patch_id, m.target_patch_id) for m in ms.matches] == [(0, 1)]


def test_unassigned_points_do_not_vote():
    table = vote_table([0, 1, 2], [0, 1, 2], [0.9, 0.9, 0.9])
    ms = match_patches_2d(1, table, np.array([0, -1, 0]), np.array([1, 1, -1]))
    # only row 0 has both ends inside patches
    assert len(ms.matches) == 1
    assert len(ms.matches[0].support) == 1


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_voting_equals_histogram_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 60
    src_idx = rng.permutation(n)
    tgt_idx = rng.permutation(n)
    conf = rng.uniform(0.5, 1.0, n).round(3)
    src_labels = rng.integers(0, 5, n)
    tgt_labels = rng.integers(0, 6, n)
    table = vote_table(src_idx, tgt_idx, conf)
    ms = match_patches_2d(1, table, src_labels, tgt_labels)

    expect = {}
    for sid in range(5):
        tally = {}
        for r in range(n):
            if src_labels[src_idx[r]] == sid:
                t = int(tgt_labels[tgt_idx[r]])
                cnt, cs = tally.get(t, (0, 0.0))
                tally[t] = (cnt + 1, cs + conf[r])
        if tally:
            expect[sid] = min(tally, key=lambda t: (-tally[t][0], -tally[t][1], t))
    got = {m.source_patch_id: m.target_patch_id for m in ms.matches}
    assert got == expect


# ---------------------------------------------------------------------------
# Merging


def simple_match(level, sid, tid, modality, pairs):
    src_idx = np.array([p[0] for p in pairs])
    tgt_idx = np.array([p[1] for p in pairs])
    grid = np.arange(300, dtype=np.float64).reshape(100, 3)
    support = PointCorrespondenceSet.from_indices(grid, grid + 1000.0,
                                                  src_idx, tgt_idx)
    return PatchMatch(level, sid, tid, modality, support)


def test_merge_disjoint_sets_concatenates():
    m3 = MatchSet(1, [simple_match(1, 0, 0, MODALITY_3D, [(0, 0)])])
    m2 = MatchSet(1, [simple_match(1, 1, 1, MODALITY_2D, [(5, 5)])])
    out = merge_match_sets(m3, m2)
    assert [(m.source_patch_id, m.target_patch_id) for m in out.matches] \
        == [(0, 0), (1, 1)]
    assert out.is_injective()


def test_merge_same_pair_unions_support():
    m3 = MatchSet(1, [simple_match(1, 0, 0, MODALITY_3D, [(0, 0), (1, 1)])])
    m2 = MatchSet(1, [simple_match(1, 0, 0, MODALITY_2D, [(1, 1), (2, 2)])])
    out = merge_match_sets(m3, m2)
    assert len(out.matches) == 1
    m = out.matches[0]
    assert m.modality == MODALITY_3D
    assert sorted(zip(m.support.source_indices, m.support.target_indices)) \
        == [(0, 0), (1, 1), (2, 2)]


def test_merge_conflicting_targets_prefers_3d():
    m3 = MatchSet(1, [simple_match(1, 0, 0, MODALITY_3D, [(0, 0)])])
    m2 = MatchSet(1, [simple_match(1, 0, 9, MODALITY_2D, [(5, 5), (6, 6)])])
    for order in ([m2.matches], [list(reversed(m2.matches))]):
        out = merge_match_sets(m3, MatchSet(1, order[0]))
        assert [(m.source_patch_id, m.target_patch_id, m.modality)
                for m in out.matches] == [(0, 0, MODALITY_3D)]
        assert len(out.matches[0].support) == 1


def test_merge_enforces_target_injectivity_by_support_size():
    m3 = MatchSet(1, [simple_match(1, 0, 7, MODALITY_3D, [(0, 0), (1, 1)])])
    m2 = MatchSet(1, [simple_match(1, 3, 7, MODALITY_2D,
                                   [(5, 5), (6, 6), (8, 8)])])
    out = merge_match_sets(m3, m2)
    assert [(m.source_patch_id, m.target_patch_id) for m in out.matches] == [(3, 7)]


def test_merge_target_tie_keeps_lower_source_id():
    m3 = MatchSet(1, [simple_match(1, 2, 7, MODALITY_3D, [(0, 0), (1, 1)])])
    m2 = MatchSet(1, [simple_match(1, 1, 7, MODALITY_2D, [(5, 5), (6, 6)])])
    out = merge_match_sets(m3, m2)
    assert [(m.source_patch_id, m.target_patch_id) for m in out.matches] == [(1, 7)]


def test_merge_rejects_level_mismatch():
    m3 = MatchSet(1, [simple_match(1, 0, 0, MODALITY_3D, [(0, 0)])])
    m2 = MatchSet(2, [])
    with pytest.raises(InvalidParams):
        merge_match_sets(m3, m2)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_merged_sets_always_injective(seed):
    rng = np.random.default_rng(seed)
    used = set()

    def random_set(modality, n):
        matches = []
        for sid in rng.choice(20, size=n, replace=False):
            tid = int(rng.integers(0, 8))
            k = int(rng.integers(1, 5))
            pool = [p for p in range(100) if p not in used][:k]
            used.update(pool)
            matches.append(simple_match(1, int(sid), tid, modality,
                                        [(p, p) for p in pool]))
        return MatchSet(1, matches)

    out = merge_match_sets(random_set(MODALITY_3D, 6), random_set(MODALITY_2D, 6))
    assert out.is_injective()
