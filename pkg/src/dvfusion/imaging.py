"""Camera projection and the builtin image matcher.

The matcher is deliberately simple: normalized cross-correlation of fixed
grid templates over a bounded search window, with quadratic sub-pixel peak
refinement. It stands behind the same interface as imported precomputed
matches, so a stronger external matcher can be dropped in without touching
the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, NoVisibleImage
from .geometry import as_points
from .io import CameraModel, PixelMatchSet, Raster

DEFAULT_STRIDE = 8
DEFAULT_TEMPLATE_RADIUS = 7
DEFAULT_SEARCH_WINDOW = 64
DEFAULT_MIN_CONF = 0.5


@dataclass
class Projection:
    """Per-point image coordinates; `valid` = in front of the camera and
    inside the frame."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def project_to_image(points, cam: CameraModel) -> Projection:
    """Pinhole projection through the camera's world-to-camera pose."""
    pts = as_points(points)
    pc = cam.pose.apply(pts)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    valid = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u = np.where(np.isfinite(u), u, -1.0)
    v = np.where(np.isfinite(v), v, -1.0)
    return Projection(u, v, z, valid)


def select_top_k_images(points, cams, k: int = 1) -> list:
    """Rank cameras by how many of the given points project validly into
    them; return the top-k image ids (count desc, then image_id asc)."""
    if not cams:
        raise NoVisibleImage("no cameras supplied")
    counts = []
    for cam in cams:
        counts.append((int(project_to_image(points, cam).valid.sum()), cam.image_id))
    counts.sort(key=lambda t: (-t[0], t[1]))
    if counts[0][0] == 0:
        raise NoVisibleImage("no camera sees any of the points")
    return [image_id for cnt, image_id in counts[:k] if cnt > 0]


def _quadratic_peak_offset(c_minus, c0, c_plus) -> float:
    denom = c_minus - 2.0 * c0 + c_plus
    if abs(denom) < 1e-12:
        return 0.0
    off = 0.5 * (c_minus - c_plus) / denom
    return float(np.clip(off, -0.5, 0.5))


def match_pixels(img_a: Raster, img_b: Raster,
                 stride: int = DEFAULT_STRIDE,
                 template_radius: int = DEFAULT_TEMPLATE_RADIUS,
                 search_window: int = DEFAULT_SEARCH_WINDOW,
                 min_conf: float = DEFAULT_MIN_CONF,
                 subpixel: bool = True) -> PixelMatchSet:
    """Grid-keypoint NCC matching from `img_a` into `img_b`.

    Keypoints sit on a regular grid (spacing `stride`). Each (2r+1)^2 template
    is correlated over displacements up to +-search_window/2; the best score
    becomes the confidence (negatives clamp to 0, scores below `min_conf` are
    dropped). Textureless templates never match.
    """
    a = img_a.gray()
    b = img_b.gray()
    r = int(template_radius)
    half = int(search_window) // 2
    if 2 * r + 1 > min(a.shape) or 2 * r + 1 > min(b.shape):
        raise ImageTooSmall(
            f"template radius {r} too large for images {a.shape} / {b.shape}")

    tpl_px = (2 * r + 1) ** 2
    win_b = np.lib.stride_tricks.sliding_window_view(b, (2 * r + 1, 2 * r + 1))
    # win_b[y, x] is the template of b centered at (x + r, y + r)

    rows = []
    hb, wb = b.shape
    for v in range(r, a.shape[0] - r, stride):
        for u in range(r, a.shape[1] - r, stride):
            tpl = a[v - r:v + r + 1, u - r:u + r + 1]
            t = tpl - tpl.mean()
            t_norm = np.sqrt((t * t).sum())
            if t_norm < 1e-9:
                continue        # no texture under this keypoint

            y_lo = max(v - half, r)
            y_hi = min(v + half, hb - 1 - r)
            x_lo = max(u - half, r)
            x_hi = min(u + half, wb - 1 - r)
            if y_hi < y_lo or x_hi < x_lo:
                continue
            cand = win_b[y_lo - r:y_hi - r + 1, x_lo - r:x_hi - r + 1]
            sums = np.einsum("ijkl->ij", cand)
            sqs = np.einsum("ijkl,ijkl->ij", cand, cand)
            num = np.einsum("ijkl,kl->ij", cand, t)
            var = sqs - sums * sums / tpl_px
            denom = t_norm * np.sqrt(np.maximum(var, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                ncc = np.where(denom > 1e-9, num / denom, -1.0)

            iy, ix = np.unravel_index(int(ncc.argmax()), ncc.shape)
            score = float(ncc[iy, ix])
            conf = min(max(score, 0.0), 1.0)
            if conf < min_conf:
                continue
            mv = float(y_lo + iy)
            mu = float(x_lo + ix)
            # a perfect integer peak cannot be improved by interpolation
            if subpixel and score < 1.0 - 1e-9:
                if 0 < ix < ncc.shape[1] - 1:
                    mu += _quadratic_peak_offset(ncc[iy, ix - 1], score, ncc[iy, ix + 1])
                if 0 < iy < ncc.shape[0] - 1:
                    mv += _quadratic_peak_offset(ncc[iy - 1, ix], score, ncc[iy + 1, ix])
            rows.append([float(u), float(v), mu, mv, conf])

    matches = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    return PixelMatchSet((img_a.image_id, img_b.image_id), matches)
