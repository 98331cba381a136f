"""Corner detection on binary silhouettes.

Corners are found from the gradient structure tensor accumulated over a box
window: response = det(M) - k * trace(M)^2, thresholded relative to the peak
response and non-maximum suppressed.  Binary images are box-blurred once
before differentiation (switchable), since hard 0/1 edges make the response
unstable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geom import ProjectionImage, View


@dataclass(frozen=True)
class HarrisParams:
    """Detector knobs.

    ``threshold`` is relative: a pixel is a candidate when its response
    exceeds ``threshold * max(response)``.  ``nms_radius`` is the minimum
    Chebyshev spacing between reported corners.
    """

    k: float = 0.05
    window_radius: int = 2
    threshold: float = 0.01
    nms_radius: int = 3
    max_corners: int = 32

    def __post_init__(self):
        if not 0.01 <= self.k <= 0.25:
            warnings.warn(f"sensitivity k={self.k} outside the usual [0.01, 0.25] range")
        if self.window_radius < 1 or self.nms_radius < 1 or self.max_corners < 1:
            raise ValueError("window_radius, nms_radius and max_corners must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class CornerSet:
    """Detected corners of one view, strongest first.

    ``coords`` is an (n, 2) int array of (row, col) pixel positions and
    ``responses`` the matching response values.
    """

    view: View
    coords: np.ndarray
    responses: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    def normalized(self, shape: tuple[int, int], max_corners: int) -> np.ndarray:
        """Fixed-length (max_corners, 2) array of (row, col) in [0, 1]^2,
        padded with the (-1, -1) sentinel."""
        out = np.full((max_corners, 2), -1.0, dtype=np.float32)
        n = min(len(self.coords), max_corners)
        if n:
            h, w = shape
            denom = np.array([max(h - 1, 1), max(w - 1, 1)], dtype=np.float32)
            out[:n] = self.coords[:n].astype(np.float32) / denom
        return out


def _as_float_image(img) -> np.ndarray:
    pixels = img.pixels if isinstance(img, ProjectionImage) else np.asarray(img)
    return pixels.astype(np.float64)


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    # truncated-window sum: zero-padded mean times the full window area
    size = 2 * radius + 1
    return ndimage.uniform_filter(a, size=size, mode="constant", cval=0.0) * (size * size)


def harris_response(img, params: HarrisParams, smooth: bool = True) -> np.ndarray:
    """Per-pixel corner response of a binary silhouette.

    Gradients are central differences with a replicated border; the structure
    tensor is summed over the box window, truncated at the image edge.
    """
    f = _as_float_image(img)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise ValueError(f"image too small for corner detection: {f.shape}")
    if smooth:
        f = ndimage.uniform_filter(f, size=3, mode="nearest")
    padded = np.pad(f, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0  # along columns
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0  # along rows
    sxx = _box_sum(gx * gx, params.window_radius)
    syy = _box_sum(gy * gy, params.window_radius)
    sxy = _box_sum(gx * gy, params.window_radius)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - params.k * trace * trace


def _silhouette_vertices(mask: np.ndarray) -> np.ndarray:
    """Pixels where the silhouette boundary turns a corner.

    A lattice point whose 2x2 pixel neighborhood holds exactly one material
    pixel marks a convex vertex (that pixel); exactly three marks a reflex
    vertex (the pixel diagonal to the empty one).  Returns an (n, 2) array of
    (row, col) vertex pixels.
    """
    padded = np.pad(mask, 1, constant_values=False).astype(np.int8)
    a = padded[:-1, :-1]  # pixel (r-1, c-1) of lattice point (r, c)
    b = padded[:-1, 1:]
    c = padded[1:, :-1]
    d = padded[1:, 1:]
    total = a + b + c + d
    out = []
    for count, pick in ((1, True), (3, False)):
        rs, cs = np.nonzero(total == count)
        for r, cc in zip(rs, cs):
            quad = np.array([a[r, cc], b[r, cc], c[r, cc], d[r, cc]], dtype=bool)
            target = quad if pick else ~quad
            (q,) = np.nonzero(target)
            dr, dc = divmod(int(q[0]), 2)
            if not pick:
                dr, dc = 1 - dr, 1 - dc  # diagonal to the empty pixel
            out.append((int(r) - 1 + dr, int(cc) - 1 + dc))
    return np.asarray(sorted(set(out)), dtype=np.int64).reshape(-1, 2)


def detect_corners(img, params: HarrisParams, smooth: bool = True, refine: bool = True) -> CornerSet:
    """Thresholded, non-maximum-suppressed corners, strongest first.

    The box window drags the response peak diagonally into the material by
    roughly the window radius, so with ``refine`` each peak is snapped to the
    nearest silhouette vertex pixel before the spacing rule is enforced.
    """
    pixels = img.pixels if isinstance(img, ProjectionImage) else np.asarray(img, dtype=bool)
    view = img.view if isinstance(img, ProjectionImage) else View.FRONT
    resp = harris_response(img, params, smooth=smooth)
    peak = float(resp.max(initial=0.0))
    coords: list[tuple[int, int]] = []
    responses: list[float] = []
    if peak > 0.0:
        thr = params.threshold * peak
        footprint = 2 * params.nms_radius + 1
        local_max = resp >= ndimage.maximum_filter(resp, size=footprint, mode="nearest")
        rs, cs = np.nonzero((resp > thr) & local_max)
        vals = resp[rs, cs]
        order = np.lexsort((cs, rs, -vals))  # strongest first, coordinate ties stable
        vertices = _silhouette_vertices(pixels) if refine else None
        snap_radius = params.window_radius + 2 + (1 if smooth else 0)
        for i in order:
            r, c = int(rs[i]), int(cs[i])
            if refine and len(vertices):
                d2 = (vertices[:, 0] - r) ** 2 + (vertices[:, 1] - c) ** 2
                j = int(np.argmin(d2))
                if d2[j] <= 2 * snap_radius * snap_radius:
                    r, c = int(vertices[j, 0]), int(vertices[j, 1])
            if all(max(abs(r - r0), abs(c - c0)) >= params.nms_radius for r0, c0 in coords):
                coords.append((r, c))
                responses.append(float(vals[i]))
                if len(coords) >= params.max_corners:
                    break
    return CornerSet(
        view=view,
        coords=np.asarray(coords, dtype=np.int64).reshape(-1, 2),
        responses=np.asarray(responses, dtype=np.float64),
    )


def nearest_corner(p: tuple[float, float], corners: CornerSet) -> tuple[int, int]:
    """Corner (row, col) closest to the query point ``p = (x, y)``, where x is
    the column coordinate and y the row coordinate.

    Ties go to the higher response, then to the lexicographically smaller
    (row, col).  Raises ValueError when the set is empty; callers fall back
    to the raw point rounded to the pixel grid.
    """
    if len(corners) == 0:
        raise ValueError("no corners")
    x, y = p
    d2 = (corners.coords[:, 1] - x) ** 2 + (corners.coords[:, 0] - y) ** 2
    best = None
    for i in range(len(corners)):
        key = (d2[i], -corners.responses[i], corners.coords[i, 0], corners.coords[i, 1])
        if best is None or key < best[0]:
            best = (key, i)
    r, c = corners.coords[best[1]]
    return int(r), int(c)
