"""Per-voxel segmentation network: local-statistics features, an MLP over
voxel representatives, masked cross-entropy, and prediction."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .pointcloud import IGNORE_LABEL, NeighborIndex, PointCloud, VoxelGrid, local_density
from .rng import Stream

FEATURE_DIM = 8
# fixed input normalization so learning rates transfer across scene scales:
# xyz, mean neighbor offset, covariance trace, local density
_INPUT_SCALE = np.array([0.125, 0.125, 0.25, 4.0, 4.0, 4.0, 4.0, 0.25])


def featurize(cloud: PointCloud, grid: VoxelGrid, nn: NeighborIndex) -> np.ndarray:
    """One row per voxel representative: raw xyz, mean neighbor offset,
    neighborhood covariance trace, and local density."""
    reps = grid.rep_index
    pos = cloud.positions
    rep_pos = pos[reps]
    nbr = nn.indices[reps]  # (M, k)
    nbr_pos = pos[nbr]  # (M, k, 3)
    mean_off = nbr_pos.mean(axis=1) - rep_pos
    hood = np.concatenate([rep_pos[:, None, :], nbr_pos], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    trace = (centered ** 2).sum(axis=2).mean(axis=1)
    dens = local_density(cloud, nn)[reps]
    return np.concatenate([rep_pos, mean_off, trace[:, None], dens[:, None]], axis=1)


class SegModel:
    """MLP over per-representative features with leaky-relu hidden layers."""

    def __init__(self, feature_dim: int = FEATURE_DIM, hidden: tuple[int, ...] = (64, 64, 64),
                 class_count: int = 8, seed: int = 0):
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        self.class_count = class_count
        self.params: dict[str, T.Tensor] = {}
        widths = [feature_dim, *hidden, class_count]
        stream = Stream(seed, "seg-init")
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = stream.normal(fan_in * fan_out, std=np.sqrt(2.0 / fan_in)).reshape(fan_in, fan_out)
            self.params[f"seg.w{i}"] = T.Tensor(w, requires_grad=True)
            self.params[f"seg.b{i}"] = T.Tensor(np.zeros(fan_out), requires_grad=True)
        self.num_layers = len(widths) - 1

    def forward(self, feats, detached: bool = False) -> T.Tensor:
        """Unnormalized logits, one row per feature row. With detached=True the
        parameters are treated as constants (same values, nothing taped)."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise T.ShapeError(
                f"forward: features must be (N, {self.feature_dim}), got {feats.shape}")
        h: T.Tensor = T.Tensor(feats * _INPUT_SCALE[:feats.shape[1]])
        for i in range(self.num_layers):
            w, b = self.params[f"seg.w{i}"], self.params[f"seg.b{i}"]
            if detached:
                w, b = T.stop_gradient(w), T.stop_gradient(b)
            h = T.add(T.matmul(h, w), b)
            if i < self.num_layers - 1:
                h = T.leaky_relu(h)
        return h

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_parameter_arrays(self, arrays) -> None:
        for name, p in self.params.items():
            p.data[...] = arrays[name]


def ce_loss(logits: T.Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> T.Tensor:
    """Mean cross-entropy over rows with label != 255 (and mask true).

    No qualifying rows gives an exact constant 0 with no gradient, so heavily
    augmented batches with an empty consistency mask still train.
    """
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != valid.shape:
            raise T.ShapeError(f"ce_loss: mask shape {mask.shape} != labels {valid.shape}")
        valid = valid & mask
    if not valid.any():
        return T.Tensor(0.0)
    sel = T.masked_select(logits, valid)
    y = labels[valid].astype(np.int64)
    # stable log-sum-exp: shift by a constant row max (gradient-free)
    row_max = np.broadcast_to(sel.data.max(axis=1, keepdims=True), sel.data.shape).copy()
    shifted = T.sub(sel, T.Tensor(row_max))
    lse = T.log(T.tsum(T.exp(shifted), axis=1))
    onehot = np.zeros(sel.data.shape)
    onehot[np.arange(y.shape[0]), y] = 1.0
    true_logit = T.tsum(T.mul(shifted, T.Tensor(onehot)), axis=1)
    return T.tmean(T.sub(lse, true_logit))


def predict(model: SegModel, feats) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per row (lowest id on exact ties) and softmax probabilities."""
    logits = model.forward(feats)
    probs = T.softmax(T.stop_gradient(logits)).data
    return np.argmax(probs, axis=1).astype(np.int64), probs
