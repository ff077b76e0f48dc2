"""Match quality control by isometry preservation.

A correct patch match relates two samplings of the same (rigidly moving)
surface, so pairwise point distances must agree between the epochs. The mean
absolute distance deviation over all support pairs (MADD) measures how far a
match is from that ideal; matches are kept only when the mean is small *and*
most individual pairs agree, which guards against a few wild pairs hiding
behind a small mean or vice versa.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .coarse import MatchSet, PatchMatch
from .errors import DegenerateInput
from .geometry import PointCorrespondenceSet

DEFAULT_DELTA1 = 1.5
DEFAULT_DELTA2 = 0.1

# Support caps: scoring is O(N^2) in the support size, so very dense supports
# are subsampled (fixed seed keeps every evaluation reproducible).
MAX_SUPPORT_POINTS = 512
_SUBSAMPLE_SEED = 20


@dataclass(frozen=True)
class RefinementCriteria:
    delta1: float = DEFAULT_DELTA1
    delta2: float = DEFAULT_DELTA2

    def __post_init__(self):
        if not self.delta1 > 0:
            raise ValueError(f"delta1 must be positive, got {self.delta1}")
        if not 0.0 <= self.delta2 <= 1.0:
            raise ValueError(f"delta2 must lie in [0, 1], got {self.delta2}")


@dataclass
class MatchQualityReport:
    level: int
    source_patch_id: int
    target_patch_id: int
    madd: float
    pass_fraction: float
    accepted: bool


def _support_subset(corrs: PointCorrespondenceSet, cap: int):
    if len(corrs) <= cap:
        return corrs.source, corrs.target
    keep = np.random.default_rng(_SUBSAMPLE_SEED).choice(len(corrs), size=cap,
                                                         replace=False)
    return corrs.source[keep], corrs.target[keep]


def distance_deviations(corrs: PointCorrespondenceSet,
                        cap: int = MAX_SUPPORT_POINTS) -> np.ndarray:
    """| ||p_i - p_j|| - ||q_i - q_j|| | over all unordered support pairs."""
    if len(corrs) < 2:
        raise DegenerateInput(
            f"need at least 2 correspondences, got {len(corrs)}")
    p, q = _support_subset(corrs, cap)
    return np.abs(pdist(p) - pdist(q))


def madd(corrs: PointCorrespondenceSet, cap: int = MAX_SUPPORT_POINTS) -> float:
    """Mean absolute deviation of pairwise distances between the epochs.

    Zero exactly when the support moves rigidly; grows with stretch, shear,
    or mismatched points.
    """
    return float(distance_deviations(corrs, cap).mean())


def evaluate_match(match: PatchMatch, crit: RefinementCriteria) -> MatchQualityReport:
    """Score one match; supports smaller than 2 pairs are auto-rejected."""
    if len(match.support) < 2:
        return MatchQualityReport(match.level, match.source_patch_id,
                                  match.target_patch_id, float("inf"), 0.0, False)
    dev = distance_deviations(match.support)
    score = float(dev.mean())
    frac = float((dev < crit.delta1).mean())
    accepted = score < crit.delta1 and frac > crit.delta2
    return MatchQualityReport(match.level, match.source_patch_id,
                              match.target_patch_id, score, frac, accepted)


def refine(matches: MatchSet,
           crit: RefinementCriteria | None = None):
    """Keep only matches passing the quality criteria.

    Returns the filtered MatchSet plus one report per *input* match, in
    input order.
    """
    crit = crit or RefinementCriteria()
    reports = [evaluate_match(m, crit) for m in matches.matches]
    kept = [m for m, r in zip(matches.matches, reports) if r.accepted]
    return MatchSet(matches.level, kept), reports


def dump_quality_reports(path, reports) -> None:
    """CSV: level, source_patch, target_patch, madd, pass_fraction, accepted."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "source_patch", "target_patch",
                    "madd", "pass_fraction", "accepted"])
        for r in reports:
            w.writerow([r.level, r.source_patch_id, r.target_patch_id,
                        f"{r.madd:.6f}", f"{r.pass_fraction:.6f}",
                        int(r.accepted)])
