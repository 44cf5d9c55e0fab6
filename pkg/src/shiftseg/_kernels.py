"""Hot geometry kernels.

Each kernel has two interchangeable implementations: a numba-jitted one and a
pure-numpy fallback. Both compute bit-identical results (same arithmetic, same
tie rules); the jitted path is only faster. Selection is global via the
A3_NO_NUMBA=1 environment variable, or per call with `use_numba=`.
`benchmarks/kernel_bench.py` compares the two paths.
"""
from __future__ import annotations

import math
import os

import numpy as np

NUMBA_ENABLED = os.environ.get("A3_NO_NUMBA", "").lower() not in ("1", "true", "yes")
if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _pick(use_numba: bool | None) -> bool:
    return NUMBA_ENABLED if use_numba is None else bool(use_numba)


# ---------------------------------------------------------------------------
# Fisher-Yates shuffle driven by pre-drawn uniforms (one per swap).

def _fisher_yates_py(perm: np.ndarray, u: np.ndarray) -> None:
    n = perm.shape[0]
    for t in range(n - 1):
        i = n - 1 - t
        j = int(u[t] * (i + 1))
        if j > i:
            j = i
        perm[i], perm[j] = perm[j], perm[i]


@njit(cache=True)
def _fisher_yates_nb(perm, u):  # pragma: no cover - exercised via dispatch
    n = perm.shape[0]
    for t in range(n - 1):
        i = n - 1 - t
        j = int(u[t] * (i + 1))
        if j > i:
            j = i
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp


def fisher_yates(perm: np.ndarray, u: np.ndarray, use_numba: bool | None = None) -> None:
    """In-place backward Fisher-Yates shuffle; u holds n-1 uniforms in [0,1)."""
    if _pick(use_numba):
        _fisher_yates_nb(perm, u)
    else:
        _fisher_yates_py(perm, u)


# ---------------------------------------------------------------------------
# Elementwise leaky-relu forward/backward; the training step applies these to
# every hidden activation, so the fused jitted loop pays off.

def _leaky_fwd_np(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _leaky_bwd_np(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, g, slope * g)


@njit(cache=True)
def _leaky_fwd_nb(x, slope):  # pragma: no cover - exercised via dispatch
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.shape[0]):
        v = flat_x[i]
        flat_o[i] = v if v > 0.0 else slope * v
    return out


@njit(cache=True)
def _leaky_bwd_nb(x, g, slope):  # pragma: no cover - exercised via dispatch
    out = np.empty_like(g)
    flat_x = x.ravel()
    flat_g = g.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.shape[0]):
        flat_o[i] = flat_g[i] if flat_x[i] > 0.0 else slope * flat_g[i]
    return out


def leaky_fwd(x: np.ndarray, slope: float, use_numba: bool | None = None) -> np.ndarray:
    if _pick(use_numba) and x.flags.c_contiguous:
        return _leaky_fwd_nb(x, slope)
    return _leaky_fwd_np(x, slope)


def leaky_bwd(x: np.ndarray, g: np.ndarray, slope: float,
              use_numba: bool | None = None) -> np.ndarray:
    if _pick(use_numba) and x.flags.c_contiguous and g.flags.c_contiguous:
        return _leaky_bwd_nb(x, g, slope)
    return _leaky_bwd_np(x, g, slope)


# ---------------------------------------------------------------------------
# Uniform-grid construction shared by knn and dilate.

def _build_grid(points: np.ndarray, cell: float):
    origin = points.min(axis=0)
    spans = points.max(axis=0) - origin
    dims = np.maximum(np.floor(spans / cell).astype(np.int64) + 1, 1)
    # cap the table so degenerate cell sizes cannot blow up memory
    while int(dims.prod()) > max(8 * points.shape[0], 4096):
        cell *= 1.3
        dims = np.maximum(np.floor(spans / cell).astype(np.int64) + 1, 1)
    ix = np.minimum((points[:, 0] - origin[0]) // cell, dims[0] - 1).astype(np.int64)
    iy = np.minimum((points[:, 1] - origin[1]) // cell, dims[1] - 1).astype(np.int64)
    iz = np.minimum((points[:, 2] - origin[2]) // cell, dims[2] - 1).astype(np.int64)
    linear = (ix * dims[1] + iy) * dims[2] + iz
    order = np.argsort(linear, kind="stable").astype(np.int64)
    starts = np.searchsorted(linear[order], np.arange(int(dims.prod()) + 1)).astype(np.int64)
    return cell, origin.astype(np.float64), dims, order, starts


def _auto_cell(points: np.ndarray, k: int) -> float:
    n = points.shape[0]
    spans = points.max(axis=0) - points.min(axis=0)
    diag = float(np.linalg.norm(spans))
    vol = float(spans[0] * spans[1] * spans[2])
    if vol > 0.0:
        cell = (vol * max(k, 2) / n) ** (1.0 / 3.0)
    else:
        area = max(float(spans[0] * spans[1]), float(spans[0] * spans[2]),
                   float(spans[1] * spans[2]))
        cell = math.sqrt(area * max(k, 2) / n) if area > 0 else 1.0
    return max(cell, diag / 256.0, 1e-9)


# ---------------------------------------------------------------------------
# Exact kNN: Euclidean, self excluded, ties broken by lower point index.

@njit(cache=True)
def _knn_grid_nb(pts, k, cell, origin, dims, order, starts):  # pragma: no cover
    n = pts.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    idx_out = np.empty((n, k), np.int64)
    d2_out = np.empty((n, k), np.float64)
    maxring = nx
    if ny > maxring:
        maxring = ny
    if nz > maxring:
        maxring = nz
    bd = np.empty(k, np.float64)
    bi = np.empty(k, np.int64)
    for i in range(n):
        cnt = 0
        cx = int((pts[i, 0] - origin[0]) // cell)
        cy = int((pts[i, 1] - origin[1]) // cell)
        cz = int((pts[i, 2] - origin[2]) // cell)
        if cx > nx - 1:
            cx = nx - 1
        if cy > ny - 1:
            cy = ny - 1
        if cz > nz - 1:
            cz = nz - 1
        ring = 0
        while True:
            x0, x1 = cx - ring, cx + ring
            for gx in range(x0, x1 + 1):
                if gx < 0 or gx >= nx:
                    continue
                for gy in range(cy - ring, cy + ring + 1):
                    if gy < 0 or gy >= ny:
                        continue
                    for gz in range(cz - ring, cz + ring + 1):
                        if gz < 0 or gz >= nz:
                            continue
                        dmax = abs(gx - cx)
                        if abs(gy - cy) > dmax:
                            dmax = abs(gy - cy)
                        if abs(gz - cz) > dmax:
                            dmax = abs(gz - cz)
                        if dmax != ring:
                            continue
                        c = (gx * ny + gy) * nz + gz
                        for p in range(starts[c], starts[c + 1]):
                            j = order[p]
                            if j == i:
                                continue
                            dx = pts[i, 0] - pts[j, 0]
                            dy = pts[i, 1] - pts[j, 1]
                            dz = pts[i, 2] - pts[j, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if cnt == k and (d2 > bd[k - 1] or (d2 == bd[k - 1] and j > bi[k - 1])):
                                continue
                            pos = cnt if cnt < k else k - 1
                            while pos > 0 and (bd[pos - 1] > d2 or (bd[pos - 1] == d2 and bi[pos - 1] > j)):
                                bd[pos] = bd[pos - 1]
                                bi[pos] = bi[pos - 1]
                                pos -= 1
                            bd[pos] = d2
                            bi[pos] = j
                            if cnt < k:
                                cnt += 1
            bound = ring * cell
            if cnt >= k and bd[k - 1] < bound * bound:
                break
            if ring > maxring:
                break
            ring += 1
        for t in range(k):
            idx_out[i, t] = bi[t]
            d2_out[i, t] = bd[t]
    return idx_out, d2_out


def _knn_numpy(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = points.shape[0]
    idx_out = np.empty((n, k), np.int64)
    d2_out = np.empty((n, k), np.float64)
    chunk = max(1, min(n, 2_000_000 // max(n, 1)))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        dx = x[s:e, None] - x[None, :]
        dy = y[s:e, None] - y[None, :]
        dz = z[s:e, None] - z[None, :]
        d2 = dx * dx + dy * dy + dz * dz
        d2[np.arange(s, e) - s, np.arange(s, e)] = np.inf
        # stable sort on equal distances keeps the lower point index first
        near = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx_out[s:e] = near
        d2_out[s:e] = np.take_along_axis(d2, near, axis=1)
    return idx_out, d2_out


def knn(points: np.ndarray, k: int, use_numba: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbors. Returns (indices, distances), both (N, k)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 0 < k < n:
        raise ValueError(f"knn requires 0 < k < N, got k={k}, N={n}")
    if _pick(use_numba):
        cell = _auto_cell(points, k)
        cell, origin, dims, order, starts = _build_grid(points, cell)
        idx, d2 = _knn_grid_nb(points, k, cell, origin, dims, order, starts)
    else:
        idx, d2 = _knn_numpy(points, k)
    return idx, np.sqrt(d2)


# ---------------------------------------------------------------------------
# Mask dilation: mark every point within `radius` of a marked point.

@njit(cache=True)
def _dilate_nb(pts, marked, radius, out, cell, origin, dims, order, starts):  # pragma: no cover
    nx, ny, nz = dims[0], dims[1], dims[2]
    r2 = radius * radius
    for t in range(marked.shape[0]):
        m = marked[t]
        px, py, pz = pts[m, 0], pts[m, 1], pts[m, 2]
        x0 = int((px - radius - origin[0]) // cell)
        x1 = int((px + radius - origin[0]) // cell)
        y0 = int((py - radius - origin[1]) // cell)
        y1 = int((py + radius - origin[1]) // cell)
        z0 = int((pz - radius - origin[2]) // cell)
        z1 = int((pz + radius - origin[2]) // cell)
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if z0 < 0:
            z0 = 0
        if x1 > nx - 1:
            x1 = nx - 1
        if y1 > ny - 1:
            y1 = ny - 1
        if z1 > nz - 1:
            z1 = nz - 1
        for gx in range(x0, x1 + 1):
            for gy in range(y0, y1 + 1):
                for gz in range(z0, z1 + 1):
                    c = (gx * ny + gy) * nz + gz
                    for p in range(starts[c], starts[c + 1]):
                        j = order[p]
                        if out[j]:
                            continue
                        dx = pts[j, 0] - px
                        dy = pts[j, 1] - py
                        dz = pts[j, 2] - pz
                        if dx * dx + dy * dy + dz * dz <= r2:
                            out[j] = True


def _dilate_numpy(points: np.ndarray, marked: np.ndarray, radius: float, out: np.ndarray) -> None:
    mpts = points[marked]
    r2 = radius * radius
    n = points.shape[0]
    chunk = max(1, min(n, 4_000_000 // max(mpts.shape[0], 1)))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        dx = points[s:e, 0:1] - mpts[None, :, 0]
        dy = points[s:e, 1:2] - mpts[None, :, 1]
        dz = points[s:e, 2:3] - mpts[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        out[s:e] |= (d2 <= r2).any(axis=1)


def dilate(points: np.ndarray, mask: np.ndarray, radius: float,
           use_numba: bool | None = None) -> np.ndarray:
    """Grow `mask` to cover all points within `radius` of any marked point."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("dilation radius must be nonnegative")
    out = mask.copy()
    if radius == 0.0 or not mask.any() or mask.all():
        return out
    marked = np.flatnonzero(mask).astype(np.int64)
    if _pick(use_numba):
        cell = max(radius, _auto_cell(points, 8))
        cell, origin, dims, order, starts = _build_grid(points, cell)
        _dilate_nb(points, marked, float(radius), out, cell, origin, dims, order, starts)
    else:
        _dilate_numpy(points, marked, float(radius), out)
    return out
