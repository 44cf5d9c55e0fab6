"""Point-cloud geometry substrate: containers, voxelization, exact kNN,
local PCA statistics, azimuthal sector split, and mask dilation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

IGNORE_LABEL = 255


@dataclass
class PointCloud:
    """N labeled 3-D points. Label 255 means ignore."""

    positions: np.ndarray  # (N, 3) float64
    labels: np.ndarray  # (N,) uint16
    cloud_id: str
    source: str = "synthetic"  # synthetic | ingested | augmented
    parent_id: str | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.labels.shape != (self.positions.shape[0],):
            raise ValueError(
                f"labels length {self.labels.shape} does not match N={self.positions.shape[0]}")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        if self.source not in ("synthetic", "ingested", "augmented"):
            raise ValueError(f"unknown source {self.source!r}")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class VoxelGrid:
    """Partition of point indices into cubic cells of side voxel_size.

    Cell key = floor(position / voxel_size), componentwise. One representative
    per occupied cell: the lowest member index. The cell label is the majority
    label of its members, ties broken by the smallest class id.
    """

    voxel_size: float
    cell_keys: np.ndarray  # (M, 3) int64
    rep_index: np.ndarray  # (M,) int64 lowest point index per cell
    rep_label: np.ndarray  # (M,) uint16 majority label per cell
    point_cell: np.ndarray  # (N,) int64 cell row per point
    _occupied: dict | None = field(default=None, repr=False)

    @property
    def num_cells(self) -> int:
        return self.cell_keys.shape[0]

    @property
    def occupied(self) -> dict[tuple[int, int, int], np.ndarray]:
        """Map cell key -> member point indices (built on first access)."""
        if self._occupied is None:
            order = np.argsort(self.point_cell, kind="stable")
            bounds = np.searchsorted(self.point_cell[order], np.arange(self.num_cells + 1))
            self._occupied = {
                tuple(int(v) for v in self.cell_keys[c]): order[bounds[c]:bounds[c + 1]]
                for c in range(self.num_cells)
            }
        return self._occupied


@dataclass
class NeighborIndex:
    """Exact k nearest neighbors per point; self excluded, distances ascending,
    ties broken by the lower point index."""

    k: int
    indices: np.ndarray  # (N, k) int64
    distances: np.ndarray  # (N, k) float64


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        empty3 = np.empty((0, 3), np.int64)
        empty = np.empty(0, np.int64)
        return VoxelGrid(voxel_size, empty3, empty, np.empty(0, np.uint16), empty)
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    uniq, point_cell = np.unique(keys, axis=0, return_inverse=True)
    point_cell = point_cell.reshape(-1).astype(np.int64)
    m = uniq.shape[0]

    rep_index = np.full(m, n, dtype=np.int64)
    np.minimum.at(rep_index, point_cell, np.arange(n, dtype=np.int64))

    # majority label per cell, smallest class id on ties: count (cell, label)
    # pairs, then pick per cell by (count desc, label asc)
    labels = cloud.labels.astype(np.int64)
    pair = point_cell * 65536 + labels
    pair_uniq, pair_count = np.unique(pair, return_counts=True)
    cell_of_pair = pair_uniq // 65536
    label_of_pair = pair_uniq % 65536
    # sort so the winning pair of each cell comes first
    order = np.lexsort((label_of_pair, -pair_count, cell_of_pair))
    first = np.searchsorted(cell_of_pair[order], np.arange(m))
    rep_label = label_of_pair[order][first].astype(np.uint16)

    return VoxelGrid(float(voxel_size), uniq, rep_index, rep_label, point_cell)


def knn(cloud: PointCloud, k: int, use_numba: bool | None = None) -> NeighborIndex:
    n = len(cloud)
    if k >= n:
        raise ValueError(f"knn requires k < N, got k={k}, N={n}")
    idx, dist = _kernels.knn(cloud.positions, k, use_numba=use_numba)
    return NeighborIndex(k, idx, dist)


DENSITY_CAP = 1e12


def local_density(cloud: PointCloud, nn: NeighborIndex) -> np.ndarray:
    """Inverse distance to the k-th nearest neighbor, capped for duplicates."""
    dk = nn.distances[:, -1]
    with np.errstate(divide="ignore"):
        dens = np.where(dk > 0, 1.0 / np.where(dk > 0, dk, 1.0), DENSITY_CAP)
    return np.minimum(dens, DENSITY_CAP)


def local_curvature(cloud: PointCloud, nn: NeighborIndex) -> np.ndarray:
    """Surface-variation curvature from neighborhood PCA.

    For each point, eigen-decompose the covariance of {i} union N_k(i) and
    return lam3 / (lam1 + lam2 + lam3) with eigenvalues clamped at zero;
    coincident neighborhoods give 0. Always in [0, 1/3].
    """
    if nn.k < 3:
        raise ValueError("curvature needs k >= 3")
    n = len(cloud)
    hood = np.concatenate([np.arange(n, dtype=np.int64)[:, None], nn.indices], axis=1)
    pts = cloud.positions[hood]  # (N, k+1, 3)
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    eig = np.linalg.eigvalsh(cov)  # ascending
    eig = np.maximum(eig, 0.0)
    total = eig.sum(axis=1)
    return np.where(total > 0, eig[:, 0] / np.where(total > 0, total, 1.0), 0.0)


def dilate_mask(cloud: PointCloud, mask: np.ndarray, radius: float,
                use_numba: bool | None = None) -> np.ndarray:
    """True wherever any marked point lies within `radius`; radius 0 is identity."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(cloud),):
        raise ValueError(f"mask shape {mask.shape} does not match cloud size {len(cloud)}")
    return _kernels.dilate(cloud.positions, mask, radius, use_numba=use_numba)


def sector_split(cloud: PointCloud, num_sectors: int) -> np.ndarray:
    """Azimuthal sector id per point: floor(S * (atan2(y,x)+pi) / 2pi).

    The top edge wraps to sector 0 rather than clamping, so the +pi and -pi
    representations of the negative-x ray land in the same sector.
    """
    if num_sectors < 2:
        raise ValueError("num_sectors must be >= 2")
    ang = np.arctan2(cloud.positions[:, 1], cloud.positions[:, 0]) + np.pi
    sec = np.floor(num_sectors * ang / (2.0 * np.pi)).astype(np.int64)
    return sec % num_sectors
