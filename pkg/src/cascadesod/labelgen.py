"""Detail-label decomposition of binary saliency masks.

A foreground pixel's detail value is ``1 - d / d_max``, where ``d`` is its
exact Euclidean distance to the nearest edge pixel of its own 4-connected
component and ``d_max`` the largest such distance in that component. Edges
therefore carry 1 and object interiors decay toward 0.
"""

from __future__ import annotations

import numba
import numpy as np
from scipy import ndimage

__all__ = [
    "NoSalientRegion",
    "as_binary",
    "extract_edge",
    "squared_edt",
    "euclidean_distance_transform",
    "decompose_detail",
    "decompose_body",
]

_INF = np.int64(2**62)


class NoSalientRegion(ValueError):
    """Raised when a distance transform is requested for an empty seed set."""


def as_binary(mask: np.ndarray) -> np.ndarray:
    """Validate a 2-D {0,1} mask and return it as ``uint8``."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must contain only 0 and 1")
    return mask.astype(np.uint8)


def extract_edge(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background (or out-of-image) 4-neighbour."""
    m = as_binary(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return (m & ~interior).astype(np.uint8)


@numba.njit(cache=True)
def _envelope_1d(f, out_d, out_arg, v, zn, zd):
    # Lower envelope of parabolas (q - p)^2 + f[p] in exact integer arithmetic.
    # Breakpoints are stored as fractions zn/zd with zd > 0. Ties resolve to
    # the smallest p.
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= _INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            continue
        while True:
            p = v[k]
            num = (f[q] + q * q) - (f[p] + p * p)
            den = 2 * (q - p)
            if k > 0 and num * zd[k] <= zn[k] * den:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        zn[k] = num
        zd[k] = den
    if k < 0:
        for q in range(n):
            out_d[q] = _INF
            out_arg[q] = -1
        return
    j = 0
    for q in range(n):
        while j < k and zn[j + 1] < q * zd[j + 1]:
            j += 1
        p = v[j]
        out_d[q] = (q - p) * (q - p) + f[p]
        out_arg[q] = p


@numba.njit(cache=True)
def _squared_edt_2d(seeds):
    h, w = seeds.shape
    n = max(h, w)
    v = np.empty(n, np.int64)
    zn = np.empty(n + 1, np.int64)
    zd = np.empty(n + 1, np.int64)

    col_d = np.empty((h, w), np.int64)
    col_arg = np.empty((h, w), np.int64)
    f = np.empty(h, np.int64)
    buf_d = np.empty(h, np.int64)
    buf_a = np.empty(h, np.int64)
    for c in range(w):
        for r in range(h):
            f[r] = 0 if seeds[r, c] else _INF
        _envelope_1d(f, buf_d, buf_a, v, zn, zd)
        for r in range(h):
            col_d[r, c] = buf_d[r]
            col_arg[r, c] = buf_a[r]

    dist = np.empty((h, w), np.int64)
    near_r = np.empty((h, w), np.int64)
    near_c = np.empty((h, w), np.int64)
    g = np.empty(w, np.int64)
    row_d = np.empty(w, np.int64)
    row_a = np.empty(w, np.int64)
    for r in range(h):
        for c in range(w):
            g[c] = col_d[r, c]
        _envelope_1d(g, row_d, row_a, v, zn, zd)
        for c in range(w):
            dist[r, c] = row_d[c]
            near_c[r, c] = row_a[c]
            near_r[r, c] = col_arg[r, row_a[c]]
    return dist, near_r, near_c


def squared_edt(seeds: np.ndarray, return_indices: bool = False):
    """Exact squared Euclidean distance (int64) to the nearest set pixel.

    Separable two-pass transform, linear in the pixel count. Among equally
    near seeds the one with the smallest column, then smallest row, is
    reported when ``return_indices`` is set.
    """
    seeds = np.ascontiguousarray(as_binary(seeds).astype(np.bool_))
    if not seeds.any():
        raise NoSalientRegion("seed mask has no set pixels")
    dist, near_r, near_c = _squared_edt_2d(seeds)
    if return_indices:
        return dist, (near_r, near_c)
    return dist


def euclidean_distance_transform(edge: np.ndarray, return_indices: bool = False):
    """Distance (pixel units) from every pixel to the nearest set pixel of ``edge``.

    Raises :class:`NoSalientRegion` if ``edge`` is empty.
    """
    if return_indices:
        d2, idx = squared_edt(edge, return_indices=True)
        return np.sqrt(d2.astype(np.float64)), idx
    return np.sqrt(squared_edt(edge).astype(np.float64))


def decompose_detail(mask: np.ndarray) -> np.ndarray:
    """Edge-peaked detail label in [0, 1], normalised per connected component."""
    mask = as_binary(mask)
    out = np.zeros(mask.shape, dtype=np.float64)
    edge = extract_edge(mask).astype(bool)
    labels, _ = ndimage.label(mask)
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels[sl] == idx
        d = euclidean_distance_transform(edge[sl] & comp)[comp]
        d_max = d.max()
        view = out[sl]
        view[comp] = 1.0 if d_max == 0 else 1.0 - d / d_max
    return out


def decompose_body(mask: np.ndarray, detail: np.ndarray) -> np.ndarray:
    """Complement of the detail label inside the mask: ``clip(G - detail, 0, 1)``."""
    mask = as_binary(mask)
    detail = np.asarray(detail, dtype=np.float64)
    if detail.shape != mask.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape} vs detail {detail.shape}")
    return np.clip(mask - detail, 0.0, 1.0)
