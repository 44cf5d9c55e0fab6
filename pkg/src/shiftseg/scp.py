"""Confusion-prior latent learning: class-grouped encoder input, per-class
quantization against a C x k x D codebook, the three-term quantized-autoencoder
objective, per-code EMA variance statistics, and a prototype-table alternative."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Stream

VARIANCE_FLOOR = 1e-6
INIT_VARIANCE = 1.0
# encoder-input coordinate scale: keeps the xyz channels comparable to the
# probability channels so latents encode prediction patterns, not just position
COORD_SCALE = 0.125


class PriorModeError(RuntimeError):
    pass


@dataclass
class CodebookState:
    """Per-class code table plus per-code per-channel EMA variance and usage."""

    class_count: int
    codes_per_class: int
    latent_dim: int
    kind: str = "vqvae"  # vqvae | prototype
    codes: T.Tensor = field(init=False)
    variances: np.ndarray = field(init=False)  # (C, k, D)
    usage: np.ndarray = field(init=False)  # (C, k)
    initialized: np.ndarray = field(init=False)  # (C,)
    eps: float = VARIANCE_FLOOR

    def __post_init__(self):
        c, k, d = self.class_count, self.codes_per_class, self.latent_dim
        self.codes = T.Tensor(np.zeros((c * k, d)), requires_grad=(self.kind == "vqvae"))
        self.variances = np.full((c, k, d), INIT_VARIANCE)
        self.usage = np.zeros((c, k), dtype=np.int64)
        self.initialized = np.zeros(c, dtype=bool)

    def codes3(self) -> np.ndarray:
        return self.codes.data.reshape(self.class_count, self.codes_per_class, self.latent_dim)


@dataclass
class QuantizeResult:
    classes: np.ndarray  # (n,) class per row
    index_in_class: np.ndarray  # (n,) assigned code within the class table
    flat: np.ndarray  # (n,) class * k + index
    z_e: np.ndarray  # (n, D)
    z_q: np.ndarray  # (n, D) assigned code rows
    distance: np.ndarray  # (n,) Euclidean distance to the assigned code


def build_encoder_input(probs, coords: np.ndarray, labels: np.ndarray):
    """[probs || coords] rows regrouped contiguously by class (class 0 first).

    Callers exclude ignore-labeled rows. Returns (rows, order, classes) where
    `order` maps grouped row -> original row and undoes the grouping.
    Accepts probs as an array or a Tensor (the grouping stays differentiable).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if (labels == 255).any():
        raise ValueError("encoder input rows must not carry the ignore label")
    order = np.argsort(labels, kind="stable")
    classes = labels[order]
    coords_g = np.asarray(coords, dtype=np.float64)[order] * COORD_SCALE
    if isinstance(probs, T.Tensor):
        rows = T.concat([T.gather_rows(probs, order), T.Tensor(coords_g)], axis=1)
    else:
        rows = np.concatenate([np.asarray(probs, dtype=np.float64)[order], coords_g], axis=1)
    return rows, order, classes


class PriorAutoencoder:
    """Row-wise encoder (C+3 -> D) and decoder (D -> C with a softmax head)."""

    def __init__(self, class_count: int, latent_dim: int = 64,
                 widths: tuple[int, ...] = (16, 32, 64, 128), beta: float = 0.25,
                 seed: int = 0):
        self.class_count = class_count
        self.latent_dim = latent_dim
        self.widths = tuple(widths)
        self.beta = beta
        self.input_dim = class_count + 3
        self.params: dict[str, T.Tensor] = {}
        stream = Stream(seed, "prior-init")
        enc = [self.input_dim, *widths, latent_dim]
        for i, (a, b) in enumerate(zip(enc[:-1], enc[1:])):
            w = stream.normal(a * b, std=np.sqrt(2.0 / a)).reshape(a, b)
            self.params[f"scp.enc.w{i}"] = T.Tensor(w, requires_grad=True)
            self.params[f"scp.enc.b{i}"] = T.Tensor(np.zeros(b), requires_grad=True)
        dec = [latent_dim, *reversed(widths), class_count]
        for i, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
            w = stream.normal(a * b, std=np.sqrt(2.0 / a)).reshape(a, b)
            self.params[f"scp.dec.w{i}"] = T.Tensor(w, requires_grad=True)
            self.params[f"scp.dec.b{i}"] = T.Tensor(np.zeros(b), requires_grad=True)
        self.n_enc = len(enc) - 1
        self.n_dec = len(dec) - 1

    @staticmethod
    def _mlp(rows, params, prefix: str, layers: int, detached: bool = False):
        h = rows if isinstance(rows, T.Tensor) else T.Tensor(np.asarray(rows, dtype=np.float64))
        for i in range(layers):
            w, b = params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"]
            w = w if isinstance(w, T.Tensor) else T.Tensor(w)
            b = b if isinstance(b, T.Tensor) else T.Tensor(b)
            if detached:
                w, b = T.stop_gradient(w), T.stop_gradient(b)
            h = T.add(T.matmul(h, w), b)
            if i < layers - 1:
                h = T.leaky_relu(h)
        return h

    def encode(self, rows, params=None, detached: bool = False) -> T.Tensor:
        """Latent row per input row; pass frozen arrays via `params` to encode
        against a snapshot without touching live parameters."""
        p = self.params if params is None else params
        first = p["scp.enc.w0"]
        in_dim = (first.data if isinstance(first, T.Tensor) else first).shape[0]
        width = rows.data.shape[1] if isinstance(rows, T.Tensor) else np.asarray(rows).shape[1]
        if width != in_dim:
            raise T.ShapeError(f"encode: rows have width {width}, expected {in_dim}")
        return self._mlp(rows, p, "scp.enc", self.n_enc, detached=detached)

    def decode(self, z, params=None, detached: bool = False) -> T.Tensor:
        p = self.params if params is None else params
        return T.softmax(self._mlp(z, p, "scp.dec", self.n_dec, detached=detached))

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_parameter_arrays(self, arrays) -> None:
        for name, t in self.params.items():
            t.data[...] = arrays[name]


def nearest_in_class(codes3: np.ndarray, z_e: np.ndarray, classes: np.ndarray,
                     restrict: np.ndarray | None = None):
    """Nearest code within each row's class sub-table (ties -> lowest index).

    Returns (index_in_class, distance). `restrict` optionally masks which
    classes may be searched (rows of other classes get index -1, distance inf).
    """
    n = z_e.shape[0]
    idx = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf)
    for c in np.unique(classes):
        if restrict is not None and not restrict[c]:
            continue
        rows = np.flatnonzero(classes == c)
        table = codes3[c]  # (k, D)
        z = z_e[rows]
        best = _pairwise_sq(z, table).argmin(axis=1)
        idx[rows] = best
        diff = z - table[best]
        dist[rows] = np.sqrt((diff * diff).sum(axis=1))
    return idx, dist


def _pairwise_sq(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the expanded form; clamped at 0.
    Identical code rows keep bit-identical distances, so duplicate-code ties
    still resolve to the lowest index. Callers recompute the distance to the
    winning code directly, where cancellation error matters."""
    d2 = ((z * z).sum(axis=1)[:, None]
          - 2.0 * (z @ table.T)
          + (table * table).sum(axis=1)[None, :])
    return np.maximum(d2, 0.0)


def quantize(cb: CodebookState, z_e: np.ndarray, classes: np.ndarray) -> QuantizeResult:
    """Assign each latent row to the nearest code of its own class."""
    z_e = np.asarray(z_e, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    if classes.min(initial=0) < 0 or classes.max(initial=0) >= cb.class_count:
        raise ValueError("row class out of range")
    idx, dist = nearest_in_class(cb.codes3(), z_e, classes)
    flat = classes * cb.codes_per_class + idx
    return QuantizeResult(classes=classes, index_in_class=idx, flat=flat,
                          z_e=z_e, z_q=cb.codes.data[flat].copy(), distance=dist)


def nearest_global(codes2: np.ndarray, initialized: np.ndarray, codes_per_class: int,
                   z_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest code across every initialized class (flat index, distance)."""
    live = np.flatnonzero(np.repeat(initialized, codes_per_class))
    if live.size == 0:
        raise PriorModeError("no initialized codes for a global lookup")
    table = codes2[live]
    z = np.asarray(z_e, dtype=np.float64)
    best = _pairwise_sq(z, table).argmin(axis=1)
    diff = z - table[best]
    return live[best], np.sqrt((diff * diff).sum(axis=1))


def global_nearest(cb: CodebookState, z_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return nearest_global(cb.codes.data, cb.initialized, cb.codes_per_class, z_e)


@dataclass
class VqLosses:
    recon: T.Tensor
    codebook: T.Tensor
    commitment: T.Tensor
    total: T.Tensor
    decoded: T.Tensor


def vq_losses(ae: PriorAutoencoder, cb: CodebookState, z_e: T.Tensor,
              flat: np.ndarray, z_e0: np.ndarray, z_q0: np.ndarray,
              target_probs: np.ndarray) -> VqLosses:
    """Three-term objective: reconstruction + codebook + beta * commitment.

    Gradient reaches the decoder, the assigned codes (codebook term), and the
    encoder (commitment term plus the straight-through reconstruction path).
    Stop-gradient operands are pinned at their selection-time values (z_e0,
    z_q0), so re-evaluating the losses under perturbed parameters with the
    same selection differentiates exactly as the estimator prescribes; the
    straight-through path is the detached quantization residual added onto
    z_e. The reconstruction target is a plain array, already detached from
    the segmentation network.
    """
    z_q_rows = T.gather_rows(cb.codes, flat)
    codebook = T.tmean(T.square(T.sub(T.Tensor(z_e0), z_q_rows)))
    commitment = T.tmean(T.square(T.sub(z_e, T.Tensor(z_q0))))
    decoded = ae.decode(T.add(z_e, T.Tensor(z_q0 - z_e0)))
    recon = T.tmean(T.square(T.sub(decoded, T.Tensor(np.asarray(target_probs, dtype=np.float64)))))
    total = T.add(T.add(recon, codebook), T.scale(commitment, ae.beta))
    return VqLosses(recon, codebook, commitment, total, decoded)


def update_code_stats(cb: CodebookState, qr: QuantizeResult, gamma: float) -> None:
    """EMA per-channel variance update for codes that received >= 2 rows this
    batch (population variance); usage counters grow by row counts."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    order = np.argsort(qr.flat, kind="stable")
    flats = qr.flat[order]
    uniq, starts = np.unique(flats, return_index=True)
    bounds = np.append(starts, flats.shape[0])
    k = cb.codes_per_class
    for u, s, e in zip(uniq, bounds[:-1], bounds[1:]):
        c, j = divmod(int(u), k)
        count = e - s
        cb.usage[c, j] += count
        if count >= 2:
            batch_var = qr.z_e[order[s:e]].var(axis=0)
            cb.variances[c, j] = gamma * cb.variances[c, j] + (1.0 - gamma) * batch_var
    np.maximum(cb.variances, cb.eps, out=cb.variances)


def maybe_init_codebook(cb: CodebookState, z_e: np.ndarray, classes: np.ndarray,
                        stream: Stream) -> None:
    """Initialize each still-empty class sub-table from this batch's rows of
    that class, perturbed with small Gaussian noise (std 0.01)."""
    k, d = cb.codes_per_class, cb.latent_dim
    for c in np.unique(classes):
        if cb.initialized[c]:
            continue
        rows = z_e[classes == c]
        pick = rows[np.arange(k) % rows.shape[0]]
        noise = stream.spawn("class", int(c)).normal(k * d, std=0.01).reshape(k, d)
        cb.codes.data[c * k:(c + 1) * k] = pick + noise
        cb.initialized[c] = True


def reseed_dead_codes(cb: CodebookState, z_e: np.ndarray, classes: np.ndarray,
                      stream: Stream) -> int:
    """Re-seed never-used codes from random current-batch rows of their class;
    their variance resets to the initialization value. Returns reseed count."""
    reseeded = 0
    k = cb.codes_per_class
    for c in range(cb.class_count):
        if not cb.initialized[c]:
            continue
        dead = np.flatnonzero(cb.usage[c] == 0)
        if dead.size == 0:
            continue
        rows = z_e[classes == c]
        if rows.shape[0] == 0:
            continue
        pick = stream.spawn("class", int(c)).integers(dead.size, rows.shape[0])
        cb.codes.data[c * k + dead] = rows[pick]
        cb.variances[c, dead] = INIT_VARIANCE
        reseeded += dead.size
    return reseeded


def prototype_prior_step(cb: CodebookState, projection: np.ndarray, rows: np.ndarray,
                         classes: np.ndarray, gamma: float, stream: Stream) -> QuantizeResult:
    """Prototype-table alternative: project raw rows with a frozen random
    matrix, assign nearest same-class prototype, EMA the prototypes toward
    assigned-row means, and track variances exactly like the quantizer path."""
    if cb.kind != "prototype":
        raise PriorModeError("prototype step requires a prototype-mode codebook")
    z = np.asarray(rows, dtype=np.float64) @ projection
    maybe_init_codebook(cb, z, classes, stream)
    qr = quantize(cb, z, classes)
    k = cb.codes_per_class
    order = np.argsort(qr.flat, kind="stable")
    flats = qr.flat[order]
    uniq, starts = np.unique(flats, return_index=True)
    bounds = np.append(starts, flats.shape[0])
    for u, s, e in zip(uniq, bounds[:-1], bounds[1:]):
        c, j = divmod(int(u), k)
        mean = z[order[s:e]].mean(axis=0)
        cb.codes.data[u] = gamma * cb.codes.data[u] + (1.0 - gamma) * mean
    update_code_stats(cb, qr, gamma)
    return qr


def make_projection(class_count: int, latent_dim: int, seed: int) -> np.ndarray:
    """Frozen random projection (C+3 -> D) for the prototype prior."""
    input_dim = class_count + 3
    return (Stream(seed, "proto-proj").normal(input_dim * latent_dim, std=1.0 / np.sqrt(input_dim))
            .reshape(input_dim, latent_dim))


def export_codebook(cb: CodebookState, path) -> None:
    """Write codes, variances, and usage with shape metadata as JSON."""
    doc = {
        "class_count": cb.class_count,
        "codes_per_class": cb.codes_per_class,
        "latent_dim": cb.latent_dim,
        "kind": cb.kind,
        "initialized": cb.initialized.astype(int).tolist(),
        "codes": cb.codes3().tolist(),
        "variances": cb.variances.tolist(),
        "usage": cb.usage.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def import_codebook(path) -> CodebookState:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    cb = CodebookState(doc["class_count"], doc["codes_per_class"], doc["latent_dim"],
                       kind=doc.get("kind", "vqvae"))
    cb.codes.data[...] = np.asarray(doc["codes"], dtype=np.float64).reshape(cb.codes.data.shape)
    cb.variances[...] = np.asarray(doc["variances"], dtype=np.float64)
    cb.usage[...] = np.asarray(doc["usage"], dtype=np.int64)
    cb.initialized[...] = np.asarray(doc["initialized"], dtype=bool)
    return cb
