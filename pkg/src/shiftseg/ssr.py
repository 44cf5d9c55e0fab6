"""Shift-region localization: score augmented latents against the tracked
per-code distributions of a frozen prior and emit complementary region masks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .pointcloud import IGNORE_LABEL
from .scp import CodebookState, PriorAutoencoder, build_encoder_input, nearest_in_class


@dataclass
class PriorSnapshot:
    """Immutable copy of everything localization needs: the frozen encoder
    (MLP parameters or a fixed projection), codes, variances, and threshold."""

    class_count: int
    codes_per_class: int
    latent_dim: int
    codes3: np.ndarray  # (C, k, D)
    variances: np.ndarray  # (C, k, D), >= eps
    initialized: np.ndarray  # (C,)
    threshold: float
    encoder_params: dict[str, np.ndarray] | None = None
    projection: np.ndarray | None = None
    n_enc: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold t must be positive")
        if (self.encoder_params is None) == (self.projection is None):
            raise ValueError("snapshot needs exactly one of encoder_params or projection")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.codes3.tobytes())
        h.update(self.variances.tobytes())
        h.update(self.initialized.tobytes())
        if self.encoder_params is not None:
            for name in sorted(self.encoder_params):
                h.update(name.encode())
                h.update(self.encoder_params[name].tobytes())
        if self.projection is not None:
            h.update(self.projection.tobytes())
        return h.hexdigest()

    def embed(self, rows):
        """Frozen-encoder forward. Accepts a Tensor (stays differentiable
        toward the rows) or an array (plain values)."""
        if self.projection is not None:
            proj = self.projection
            if isinstance(rows, T.Tensor):
                return T.matmul(rows, T.Tensor(proj))
            return np.asarray(rows, dtype=np.float64) @ proj
        out = PriorAutoencoder._mlp(rows, self.encoder_params, "scp.enc", self.n_enc)
        return out if isinstance(rows, T.Tensor) else out.data


def take_snapshot(cb: CodebookState, threshold: float,
                  encoder_params: dict[str, np.ndarray] | None = None,
                  projection: np.ndarray | None = None) -> PriorSnapshot:
    n_enc = 0
    if encoder_params is not None:
        encoder_params = {k: v.copy() for k, v in encoder_params.items()}
        n_enc = sum(1 for k in encoder_params if k.startswith("scp.enc.w"))
    return PriorSnapshot(
        class_count=cb.class_count,
        codes_per_class=cb.codes_per_class,
        latent_dim=cb.latent_dim,
        codes3=cb.codes3().copy(),
        variances=cb.variances.copy(),
        initialized=cb.initialized.copy(),
        threshold=float(threshold),
        encoder_params=encoder_params,
        projection=projection.copy() if projection is not None else None,
        n_enc=n_enc,
    )


def shift_score(snapshot: PriorSnapshot, z_e: np.ndarray,
                classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized diagonal-Mahalanobis distance to the nearest same-class code.

    score = sqrt( sum_d (z_d - e_d)^2 / var_d ) / sqrt(D), so an offset of one
    tracked standard deviation in every channel scores exactly 1. With a
    shared per-code variance this reduces to ||z - e|| / sqrt(var).
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    idx, _ = nearest_in_class(snapshot.codes3, z_e, classes)
    codes = snapshot.codes3[classes, idx]
    var = snapshot.variances[classes, idx]
    score = np.sqrt(((z_e - codes) ** 2 / var).sum(axis=1) / snapshot.latent_dim)
    return score, idx


@dataclass
class ShiftMasks:
    """Per-row region partition for one augmented cloud. On labeled rows,
    scr and ssr are exact complements; ignore-labeled rows are false in both."""

    scr: np.ndarray  # (n,) bool
    ssr: np.ndarray  # (n,) bool
    score: np.ndarray  # (n,) float, 0 on ignore rows
    assigned_class: np.ndarray  # (n,) int64, -1 on ignore rows
    assigned_index: np.ndarray  # (n,) int64, -1 on ignore rows


@dataclass
class LocalizeResult:
    masks: ShiftMasks
    valid_rows: np.ndarray  # rows (into the input) that were embedded, grouped order
    classes: np.ndarray  # class per embedded row
    z_e: np.ndarray  # (m, D) latent per embedded row


def localize(snapshot: PriorSnapshot, probs, coords: np.ndarray,
             labels: np.ndarray, dilation_radius: float = 0.0,
             use_numba: bool | None = None) -> LocalizeResult:
    """Embed rows with the frozen prior encoder, flag rows whose score exceeds
    the threshold, dilate the shifted set over 3-D coordinates, and emit the
    complementary masks. Rows labeled 255 stay out of both masks.

    `probs` may be a Tensor; the returned z_e is then the (differentiable)
    embedding tensor while masks and scores come from its values.
    """
    is_tensor = isinstance(probs, T.Tensor)
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    valid = (labels != IGNORE_LABEL) & (labels < snapshot.class_count)
    scr = np.zeros(n, dtype=bool)
    ssr = np.zeros(n, dtype=bool)
    score = np.zeros(n)
    a_cls = np.full(n, -1, dtype=np.int64)
    a_idx = np.full(n, -1, dtype=np.int64)
    vrows = np.flatnonzero(valid)
    if vrows.size == 0:
        return LocalizeResult(ShiftMasks(scr, ssr, score, a_cls, a_idx),
                              vrows, np.empty(0, np.int64), np.empty((0, snapshot.latent_dim)))
    probs_valid = T.masked_select(probs, valid) if is_tensor \
        else np.asarray(probs, dtype=np.float64)[vrows]
    rows, order, classes = build_encoder_input(probs_valid, coords[vrows], labels[vrows])
    grouped = vrows[order]
    z_e = snapshot.embed(rows)
    z_vals = z_e.data if is_tensor else z_e
    s, idx = shift_score(snapshot, z_vals, classes)
    score[grouped] = s
    a_cls[grouped] = classes
    a_idx[grouped] = idx
    flagged = np.zeros(n, dtype=bool)
    flagged[grouped] = s > snapshot.threshold
    if dilation_radius > 0.0 and flagged.any():
        sub = _kernels.dilate(coords[valid], flagged[valid], dilation_radius,
                              use_numba=use_numba)
        flagged[valid] = sub
    ssr[valid] = flagged[valid]
    scr[valid] = ~flagged[valid]
    return LocalizeResult(ShiftMasks(scr, ssr, score, a_cls, a_idx), grouped, classes, z_e)


def ssr_ratio(masks: ShiftMasks) -> float:
    """Shifted fraction of labeled rows; 0 when nothing is labeled."""
    labeled = masks.scr | masks.ssr
    total = int(labeled.sum())
    return float(masks.ssr.sum() / total) if total else 0.0


def masks_to_json(masks: ShiftMasks, cloud_id: str) -> str:
    doc = {
        "cloud_id": cloud_id,
        "ssr": "".join("1" if b else "0" for b in masks.ssr),
        "scores": [float(v) for v in masks.score],
    }
    return json.dumps(doc)
