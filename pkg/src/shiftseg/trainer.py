"""End-to-end training: per-batch original + augmented passes, online prior
learning, shift-region localization, region-adaptive losses, alternating
seg/autoencoder updates, prior-source strategies, curriculum ceilings, and an
EMA teacher."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import evalsuite, scp, segnet
from . import ssr as ssrmod
from . import tensor as T
from .augment import AugmentConfig, AugmentRecord, PRESET_NAMES, augment_pair
from .dataset import DatasetSplit, SceneSpec, make_split
from .pointcloud import IGNORE_LABEL, PointCloud, knn, voxelize
from .rng import Stream

MODES = ("none", "eas", "eas+scr", "full")
PRIOR_SOURCES = ("online", "offline", "gt")
PRIOR_KINDS = ("vqvae", "prototype")
DISTILL_TARGETS = ("global", "class_conditional", "none")
CURRICULA = ("off", "staged")

RESEED_INTERVAL = 200  # steps between dead-code reseeds


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# dataclass field name <-> JSON key
_JSON_ALIASES = {"lam": "lambda", "latent_dim": "D"}


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter, preset, strategy switch, and seed for one run."""

    # schedule
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    mode: str = "full"  # none | eas | eas+scr | full
    # dataset (synthetic generation defaults)
    scenes: int = 32
    points_per_scene: int = 4096
    class_count: int = 8
    val_fraction: float = 0.25
    # networks
    seg_hidden: tuple = (64, 64, 64)
    encoder_widths: tuple = (16, 32, 64, 128)
    # optimizers
    seg_lr: float = 0.24
    seg_weight_decay: float = 1e-4
    seg_momentum: float = 0.9
    clip_grad_norm: float = 1.0  # global-norm clip for the seg optimizer
    ae_lr: float = 0.001
    # objective
    lam: float = 0.1  # JSON key "lambda"
    beta: float = 0.25
    gamma: float = 0.9
    t: float = 3.0
    k: int = 32
    latent_dim: int = 64  # JSON key "D"
    # geometry
    voxel_size: float = 0.4
    knn_k: int = 16
    dilation_radius: float = 0.5
    # augmentation
    augment_preset: str = "random"
    noise_points: int = 32
    scanmix: bool = True
    num_sectors: int = 6
    # strategies
    prior_source: str = "online"
    offline_prior_path: str | None = None
    prior_kind: str = "vqvae"
    distill_target: str = "global"
    curriculum: str = "off"
    ema_momentum: float | None = None  # None = teacher off
    # bookkeeping
    ckpt_every: int = 0  # epochs between checkpoints; 0 = final only
    eval_every: int = 1  # epochs between validation reports; 0 = final only
    curve_trials: int = 2  # augmentations per val cloud in the final level curve

    def __post_init__(self):
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}"),
            (self.prior_source in PRIOR_SOURCES, f"unknown prior_source {self.prior_source!r}"),
            (self.prior_kind in PRIOR_KINDS, f"unknown prior_kind {self.prior_kind!r}"),
            (self.distill_target in DISTILL_TARGETS, f"unknown distill_target {self.distill_target!r}"),
            (self.curriculum in CURRICULA, f"unknown curriculum {self.curriculum!r}"),
            (self.augment_preset in PRESET_NAMES, f"unknown augment_preset {self.augment_preset!r}"),
            (self.epochs >= 0, "epochs must be nonnegative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (0 < self.gamma < 1, "gamma must be in (0, 1)"),
            (self.t > 0, "t must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.prior_source == "offline" and needs_prior(self.mode) and not self.offline_prior_path:
            raise ConfigError("prior_source=offline requires offline_prior_path")
        object.__setattr__(self, "seg_hidden", tuple(self.seg_hidden))
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))

    def to_json(self) -> dict:
        doc = {}
        for f in fields(self):
            key = _JSON_ALIASES.get(f.name, f.name)
            val = getattr(self, f.name)
            doc[key] = list(val) if isinstance(val, tuple) else val
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        reverse = {v: k for k, v in _JSON_ALIASES.items()}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, val in doc.items():
            name = reverse.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = tuple(val) if isinstance(val, list) else val
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def needs_prior(mode: str) -> bool:
    return mode in ("eas+scr", "full")


def mode_flags(mode: str) -> tuple[bool, bool, bool]:
    """(augmented pass on, region masking on, distillation allowed)."""
    return {
        "none": (False, False, False),
        "eas": (True, False, False),
        "eas+scr": (True, True, False),
        "full": (True, True, True),
    }[mode]


def curriculum_ceiling(epoch: int, cfg: TrainConfig) -> str:
    """Staged augmentation ceiling: epochs split into three equal thirds
    (remainder to the last): light, then moderate, then heavy."""
    if cfg.curriculum != "staged":
        raise ConfigError("curriculum_ceiling requires curriculum=staged")
    third = cfg.epochs // 3
    if epoch < third:
        return "light"
    if epoch < 2 * third:
        return "moderate"
    return "heavy"


def effective_preset(epoch: int, cfg: TrainConfig) -> str:
    if cfg.curriculum == "staged":
        return curriculum_ceiling(epoch, cfg)
    return cfg.augment_preset


def seg_lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from the configured base rate; keeps the late training
    stable where a constant 0.24 oscillates at this scale."""
    if cfg.epochs <= 1:
        return cfg.seg_lr
    return cfg.seg_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def augment_config_for(cfg: TrainConfig, preset: str) -> AugmentConfig:
    if preset == "none":
        return AugmentConfig.for_preset("none")
    return AugmentConfig.for_preset(preset, noise_points=cfg.noise_points,
                                    scanmix=cfg.scanmix, num_sectors=cfg.num_sectors)


# ---------------------------------------------------------------------------
# Prepared data


@dataclass
class PreparedCloud:
    cloud: PointCloud
    feats: np.ndarray  # (M, 8)
    rep_labels: np.ndarray  # (M,) int64 incl. 255
    rep_coords: np.ndarray  # (M, 3)
    record: AugmentRecord | None = None


def prepare_cloud(cloud: PointCloud, cfg: TrainConfig,
                  record: AugmentRecord | None = None) -> PreparedCloud:
    grid = voxelize(cloud, cfg.voxel_size)
    k_eff = min(cfg.knn_k, len(cloud) - 1)
    nn = knn(cloud, k_eff)
    feats = segnet.featurize(cloud, grid, nn)
    return PreparedCloud(cloud, feats, grid.rep_label.astype(np.int64),
                         cloud.positions[grid.rep_index], record)


@dataclass
class PreparedBatch:
    originals: list[PreparedCloud]
    augmented: list[PreparedCloud] | None
    preset: str


# ---------------------------------------------------------------------------
# Training state


@dataclass
class TrainState:
    cfg: TrainConfig
    model: segnet.SegModel
    prior: scp.PriorAutoencoder | None
    projection: np.ndarray | None
    cb: scp.CodebookState | None
    seg_opt: T.Optimizer
    ae_opt: T.Optimizer | None
    teacher: dict[str, np.ndarray] | None
    step: int = 0
    epoch: int = 0
    cache: dict = field(default_factory=dict)
    stats_trace: list | None = None  # optional (flat, z_e) capture per step


def init_state(cfg: TrainConfig) -> TrainState:
    model = segnet.SegModel(segnet.FEATURE_DIM, cfg.seg_hidden, cfg.class_count, seed=cfg.seed)
    seg_opt = T.Optimizer(model.params, "sgd-momentum", lr=cfg.seg_lr,
                          weight_decay=cfg.seg_weight_decay, momentum=cfg.seg_momentum,
                          max_grad_norm=cfg.clip_grad_norm)
    prior = None
    projection = None
    cb = None
    ae_opt = None
    if needs_prior(cfg.mode):
        if cfg.prior_source == "offline":
            prior, projection, cb = load_prior(cfg)
        elif cfg.prior_kind == "vqvae":
            prior = scp.PriorAutoencoder(cfg.class_count, cfg.latent_dim,
                                         cfg.encoder_widths, cfg.beta, seed=cfg.seed)
            cb = scp.CodebookState(cfg.class_count, cfg.k, cfg.latent_dim)
            ae_params = dict(prior.params)
            ae_params["scp.codes"] = cb.codes
            ae_opt = T.Optimizer(ae_params, "adam", lr=cfg.ae_lr)
        else:
            projection = scp.make_projection(cfg.class_count, cfg.latent_dim, cfg.seed)
            cb = scp.CodebookState(cfg.class_count, cfg.k, cfg.latent_dim, kind="prototype")
    teacher = model.parameter_arrays() if cfg.ema_momentum is not None else None
    return TrainState(cfg, model, prior, projection, cb, seg_opt, ae_opt, teacher)


def load_prior(cfg: TrainConfig):
    """Frozen prior for prior_source=offline: a completed run's checkpoint
    directory holding weights + codebook export."""
    path = cfg.offline_prior_path
    cb = scp.import_codebook(os.path.join(path, "codebook.json"))
    if cb.kind == "prototype":
        arrays = T.load_checkpoint(os.path.join(path, "weights.a3wt"))
        return None, arrays["proto.projection"], cb
    prior = scp.PriorAutoencoder(cb.class_count, cb.latent_dim, cfg.encoder_widths,
                                 cfg.beta, seed=cfg.seed)
    arrays = T.load_checkpoint(os.path.join(path, "weights.a3wt"))
    prior.load_parameter_arrays({k: v for k, v in arrays.items() if k in prior.params})
    return prior, None, cb


# ---------------------------------------------------------------------------
# Step losses. The forward graph is built once per step; every discrete choice
# of the step (quantizer assignments, region masks, distillation targets) is
# captured in a StepSelection on the first pass and treated as a pinned
# constant afterwards, which is also exactly what finite-difference checks
# against L_total and the quantized-autoencoder objective need.


@dataclass
class ScpSelection:
    rows: np.ndarray  # grouped [probs || coords] input rows
    classes: np.ndarray
    flat: np.ndarray | None  # pinned code assignment (vqvae)
    target: np.ndarray  # pinned reconstruction target rows (n, C)
    z_e0: np.ndarray  # latents at selection time
    z_q0: np.ndarray | None = None  # assigned code values at selection time


@dataclass
class SsrSelection:
    valid_grouped: np.ndarray  # rep-row indices in grouped (class-sorted) order
    ssr_grouped: np.ndarray  # per grouped row, post dilation
    scr_full: np.ndarray  # per rep row
    distill_targets: np.ndarray | None  # (m, D) pinned code values for SSR rows
    masks: ssrmod.ShiftMasks


@dataclass
class StepSelection:
    preset: str
    scp_sel: ScpSelection | None = None
    ssr_sel: list[SsrSelection] | None = None
    snapshot: ssrmod.PriorSnapshot | None = None
    ssr_rows_total: int = 0
    labeled_rows_total: int = 0


@dataclass
class LossBundle:
    ce: T.Tensor
    ce_aug: T.Tensor | None  # raw augmented CE (part of the loss in eas mode)
    ce_scr: T.Tensor | None
    distill: T.Tensor | None
    total: T.Tensor
    vq: scp.VqLosses | None
    ce_aug_value: float | None  # logged raw augmented CE in masked modes


def _mean_over(tensors: list[T.Tensor]) -> T.Tensor:
    acc = tensors[0]
    for t in tensors[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, 1.0 / len(tensors))


def _select_scp(state: TrainState, pb: PreparedBatch, cfg: TrainConfig,
                probs_data: list[np.ndarray]):
    """Online prior bookkeeping for this step: lazy code init, dead-code
    reseeds, quantizer assignment, and the EMA variance update. Returns the
    pinned selection (None when the batch has no labeled rows)."""
    coords = np.concatenate([pc.rep_coords for pc in pb.originals], axis=0)
    labels = np.concatenate([pc.rep_labels for pc in pb.originals])
    probs = np.concatenate(probs_data, axis=0)
    valid = (labels != IGNORE_LABEL) & (labels < cfg.class_count)
    probs_v, coords_v, labels_v = probs[valid], coords[valid], labels[valid]
    if cfg.prior_source == "gt":
        onehot = np.zeros((labels_v.shape[0], cfg.class_count))
        onehot[np.arange(labels_v.shape[0]), labels_v] = 1.0
        probs_v = onehot
    rows, _, classes = scp.build_encoder_input(probs_v, coords_v, labels_v)
    if rows.shape[0] == 0:
        return None, None
    z_live = None
    if cfg.prior_kind == "vqvae":
        z_live = state.prior.encode(T.Tensor(rows))
        z0 = z_live.data
        scp.maybe_init_codebook(state.cb, z0, classes, Stream(cfg.seed, "cbinit"))
        if state.step > 0 and state.step % RESEED_INTERVAL == 0:
            scp.reseed_dead_codes(state.cb, z0, classes,
                                  Stream(cfg.seed, "reseed", state.step))
        qr0 = scp.quantize(state.cb, z0, classes)
        scp.update_code_stats(state.cb, qr0, cfg.gamma)
        sel = ScpSelection(rows, classes, qr0.flat, rows[:, :cfg.class_count].copy(),
                           z0.copy(), qr0.z_q.copy())
    else:
        qr0 = scp.prototype_prior_step(state.cb, state.projection, rows, classes,
                                       cfg.gamma, Stream(cfg.seed, "proto", state.step))
        sel = ScpSelection(rows, classes, None, rows[:, :cfg.class_count].copy(), qr0.z_e)
    if state.stats_trace is not None:
        state.stats_trace.append((qr0.flat.copy(), qr0.z_e.copy()))
    return sel, z_live


def step_losses(state: TrainState, pb: PreparedBatch, cfg: TrainConfig,
                sel: StepSelection | None = None) -> tuple[LossBundle, StepSelection]:
    """Build this step's loss graphs. With sel=None, performs the selection
    pass (including prior statistics updates); with a selection given, the
    call is pure in the parameters and reuses every pinned choice."""
    aug_on, mask_on, distill_allowed = mode_flags(cfg.mode)
    distill_on = distill_allowed and cfg.distill_target != "none" and cfg.lam != 0.0
    selecting = sel is None
    if selecting:
        sel = StepSelection(pb.preset)

    logits_orig = [state.model.forward(pc.feats) for pc in pb.originals]
    ce = _mean_over([segnet.ce_loss(lg, pc.rep_labels)
                     for lg, pc in zip(logits_orig, pb.originals)])
    total = ce
    ce_aug = None
    ce_scr = None
    distill = None
    ce_aug_value = None

    # online prior learning sees the same original-pass forward as the CE loss
    scp_z_live = None
    if selecting and needs_prior(cfg.mode) and cfg.prior_source != "offline":
        probs_data = [T.softmax(T.stop_gradient(lg)).data for lg in logits_orig]
        sel.scp_sel, scp_z_live = _select_scp(state, pb, cfg, probs_data)
    if selecting and needs_prior(cfg.mode):
        enc_params = state.prior.parameter_arrays() if state.prior is not None else None
        sel.snapshot = ssrmod.take_snapshot(state.cb, cfg.t, encoder_params=enc_params,
                                            projection=state.projection)

    if aug_on:
        aug_logits = [state.model.forward(pc.feats) for pc in pb.augmented]
        if not mask_on:
            ce_aug = _mean_over([segnet.ce_loss(lg, pc.rep_labels)
                                 for lg, pc in zip(aug_logits, pb.augmented)])
            total = T.add(total, ce_aug)
        else:
            ce_aug_value = float(np.mean(
                [segnet.ce_loss(T.stop_gradient(lg), pc.rep_labels).item()
                 for lg, pc in zip(aug_logits, pb.augmented)]))
            z_tensors: list[T.Tensor] = []
            if selecting:
                sel.ssr_sel = []
                flat_codes = sel.snapshot.codes3.reshape(-1, sel.snapshot.latent_dim)
                for lg, pc in zip(aug_logits, pb.augmented):
                    loc = ssrmod.localize(sel.snapshot, T.softmax(lg), pc.rep_coords,
                                          pc.rep_labels, cfg.dilation_radius)
                    z_vals = loc.z_e.data if isinstance(loc.z_e, T.Tensor) else loc.z_e
                    ssr_grouped = loc.masks.ssr[loc.valid_rows]
                    targets = None
                    if distill_on and ssr_grouped.any():
                        z_rows = z_vals[ssr_grouped]
                        if cfg.distill_target == "global":
                            flats, _ = scp.nearest_global(
                                flat_codes, sel.snapshot.initialized,
                                sel.snapshot.codes_per_class, z_rows)
                            targets = flat_codes[flats]
                        else:
                            cls = loc.classes[ssr_grouped]
                            idx = loc.masks.assigned_index[loc.valid_rows][ssr_grouped]
                            targets = sel.snapshot.codes3[cls, idx]
                    sel.ssr_sel.append(SsrSelection(loc.valid_rows, ssr_grouped,
                                                    loc.masks.scr, targets, loc.masks))
                    z_tensors.append(loc.z_e)
                    sel.ssr_rows_total += int(loc.masks.ssr.sum())
                    sel.labeled_rows_total += int((loc.masks.scr | loc.masks.ssr).sum())
            else:
                for lg, pc, s in zip(aug_logits, pb.augmented, sel.ssr_sel):
                    probs = T.softmax(lg)
                    grouped = T.gather_rows(probs, s.valid_grouped)
                    coords = pc.rep_coords[s.valid_grouped] * scp.COORD_SCALE
                    rows = T.concat([grouped, T.Tensor(coords)], axis=1)
                    z_tensors.append(sel.snapshot.embed(rows))
            ce_scr = _mean_over([
                segnet.ce_loss(lg, pc.rep_labels, mask=s.scr_full)
                for lg, pc, s in zip(aug_logits, pb.augmented, sel.ssr_sel)])
            total = T.add(total, ce_scr)
            if distill_on:
                picked = [T.masked_select(z, s.ssr_grouped)
                          for z, s in zip(z_tensors, sel.ssr_sel)
                          if s.distill_targets is not None and s.ssr_grouped.any()]
                targets = [s.distill_targets for s in sel.ssr_sel
                           if s.distill_targets is not None and s.ssr_grouped.any()]
                if picked:
                    z_all = picked[0] if len(picked) == 1 else T.concat(picked, axis=0)
                    distill = T.tmean(T.square(T.sub(z_all, T.Tensor(np.concatenate(targets)))))
                else:
                    distill = T.Tensor(0.0)
                total = T.add(total, T.scale(distill, cfg.lam))

    vq = None
    if sel.scp_sel is not None and cfg.prior_kind == "vqvae" and cfg.prior_source != "offline":
        z_e = scp_z_live if scp_z_live is not None \
            else state.prior.encode(T.Tensor(sel.scp_sel.rows))
        vq = scp.vq_losses(state.prior, state.cb, z_e, sel.scp_sel.flat,
                           sel.scp_sel.z_e0, sel.scp_sel.z_q0, sel.scp_sel.target)

    return LossBundle(ce, ce_aug, ce_scr, distill, total, vq, ce_aug_value), sel


# ---------------------------------------------------------------------------
# One optimization step


def _check_finite(name: str, value: float, state: TrainState):
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"{name} is not finite at step {state.step} (epoch {state.epoch})")


def prepare_batch(state: TrainState, clouds: list[PointCloud], cfg: TrainConfig,
                  epoch: int, batch_index: int) -> PreparedBatch:
    originals = []
    for cloud in clouds:
        pc = state.cache.get(cloud.cloud_id)
        if pc is None:
            pc = prepare_cloud(cloud, cfg)
            state.cache[cloud.cloud_id] = pc
        originals.append(pc)
    preset = effective_preset(epoch, cfg) if mode_flags(cfg.mode)[0] else "none"
    augmented = None
    if mode_flags(cfg.mode)[0]:
        aug_cfg = augment_config_for(cfg, preset)
        augmented = []
        for i, cloud in enumerate(clouds):
            partner = clouds[(i + 1) % len(clouds)] if aug_cfg.scanmix and len(clouds) > 1 else None
            aug_cloud, rec = augment_pair(
                cloud, aug_cfg, (cfg.seed, "aug", epoch, batch_index, i),
                partner=partner)
            augmented.append(prepare_cloud(aug_cloud, cfg, record=rec))
    return PreparedBatch(originals, augmented, preset)


def train_step(state: TrainState, clouds: list[PointCloud], cfg: TrainConfig,
               epoch: int, batch_index: int) -> dict:
    """One full optimization step; returns the StepLog record."""
    if not clouds:
        raise ValueError("batch must be nonempty")
    pb = prepare_batch(state, clouds, cfg, epoch, batch_index)
    bundle, sel = step_losses(state, pb, cfg)

    log: dict = {"step": state.step, "epoch": epoch, "batch": batch_index,
                 "mode": cfg.mode, "preset": pb.preset,
                 "loss_ce": bundle.ce.item()}
    _check_finite("loss_ce", log["loss_ce"], state)
    if bundle.ce_aug is not None:
        log["loss_ce_aug"] = bundle.ce_aug.item()
        _check_finite("loss_ce_aug", log["loss_ce_aug"], state)
    if bundle.ce_aug_value is not None:
        log["loss_ce_aug"] = bundle.ce_aug_value
    if bundle.ce_scr is not None:
        log["loss_ce_scr"] = bundle.ce_scr.item()
        _check_finite("loss_ce_scr", log["loss_ce_scr"], state)
    if bundle.distill is not None:
        log["loss_distill"] = bundle.distill.item()
        _check_finite("loss_distill", log["loss_distill"], state)
    log["loss_total"] = bundle.total.item()
    _check_finite("loss_total", log["loss_total"], state)

    T.backward(bundle.total)
    state.seg_opt.step()
    if bundle.vq is not None:
        log["vq_recon"] = bundle.vq.recon.item()
        log["vq_codebook"] = bundle.vq.codebook.item()
        log["vq_commitment"] = bundle.vq.commitment.item()
        log["vq_total"] = bundle.vq.total.item()
        _check_finite("vq_total", log["vq_total"], state)
        T.backward(bundle.vq.total)
        state.ae_opt.step()
    if state.cb is not None and needs_prior(cfg.mode):
        log["code_usage"] = int(state.cb.usage.sum())
    if sel.ssr_sel is not None:
        log["ssr_ratio"] = (sel.ssr_rows_total / sel.labeled_rows_total
                            if sel.labeled_rows_total else 0.0)
    if pb.augmented is not None:
        log["aug"] = [pc.record.to_json() for pc in pb.augmented]

    if state.teacher is not None:
        m = cfg.ema_momentum
        for name, p in state.model.params.items():
            state.teacher[name] = m * state.teacher[name] + (1.0 - m) * p.data

    state.step += 1
    return log


# ---------------------------------------------------------------------------
# Checkpointing


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {name: p.data.copy() for name, p in state.model.params.items()}
    arrays.update(state.seg_opt.state_arrays("opt.seg"))
    if state.prior is not None:
        arrays.update(state.prior.parameter_arrays())
    if state.projection is not None:
        arrays["proto.projection"] = state.projection.copy()
    if state.cb is not None:
        arrays["scp.codes"] = state.cb.codes.data.copy()
        arrays["scp.variances"] = state.cb.variances.copy()
        arrays["scp.usage"] = state.cb.usage.astype(np.float64)
        arrays["scp.initialized"] = state.cb.initialized.astype(np.float64)
    if state.ae_opt is not None:
        arrays.update(state.ae_opt.state_arrays("opt.ae"))
    if state.teacher is not None:
        arrays.update({f"teacher.{n}": a.copy() for n, a in state.teacher.items()})
    arrays["meta.step"] = np.array([float(state.step)])
    arrays["meta.epoch"] = np.array([float(state.epoch)])
    return arrays


def save_state(state: TrainState, ckpt_dir: str) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    T.save_checkpoint(os.path.join(ckpt_dir, "weights.a3wt"), state_arrays(state))
    if state.cb is not None:
        scp.export_codebook(state.cb, os.path.join(ckpt_dir, "codebook.json"))
    with open(os.path.join(ckpt_dir, "state.json"), "w", encoding="utf-8") as f:
        json.dump({"step": state.step, "epoch": state.epoch,
                   "config_hash": state.cfg.config_hash()}, f)
        f.write("\n")


def load_state(cfg: TrainConfig, ckpt_dir: str) -> TrainState:
    state = init_state(cfg)
    arrays = T.load_checkpoint(os.path.join(ckpt_dir, "weights.a3wt"))
    state.model.load_parameter_arrays(arrays)
    state.seg_opt.load_state_arrays("opt.seg", arrays)
    if state.prior is not None and "scp.enc.w0" in arrays:
        state.prior.load_parameter_arrays(arrays)
    if state.projection is not None and "proto.projection" in arrays:
        state.projection[...] = arrays["proto.projection"]
    if state.cb is not None and "scp.codes" in arrays:
        state.cb.codes.data[...] = arrays["scp.codes"]
        state.cb.variances[...] = arrays["scp.variances"]
        state.cb.usage[...] = arrays["scp.usage"].astype(np.int64)
        state.cb.initialized[...] = arrays["scp.initialized"] > 0.5
    if state.ae_opt is not None and "opt.ae.t" in arrays:
        state.ae_opt.load_state_arrays("opt.ae", arrays)
    if state.teacher is not None:
        for name in state.teacher:
            state.teacher[name][...] = arrays[f"teacher.{name}"]
    state.step = int(arrays["meta.step"][0])
    state.epoch = int(arrays["meta.epoch"][0])
    return state


# ---------------------------------------------------------------------------
# Full run


def _json_line(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":")) + "\n"


def validation_report(state: TrainState, val_clouds: list[PointCloud],
                      cfg: TrainConfig, epoch: int) -> dict:
    body = evalsuite.evaluate_clouds(state.model, val_clouds, cfg.class_count,
                                     cfg.voxel_size, cfg.knn_k)
    return {"epoch": epoch, "mode": cfg.mode, "seed": cfg.seed,
            "config_hash": state.cfg.config_hash(), **body}


def final_report(state: TrainState, val_clouds: list[PointCloud], cfg: TrainConfig) -> dict:
    doc = validation_report(state, val_clouds, cfg, cfg.epochs)
    doc["final"] = True
    doc["ssr_ratio_by_level"] = None
    doc["teacher_agreement"] = None
    if state.cb is not None and state.cb.initialized.any():
        enc = state.prior.parameter_arrays() if state.prior is not None else None
        snapshot = ssrmod.take_snapshot(state.cb, cfg.t, encoder_params=enc,
                                        projection=state.projection)
        means, _ = evalsuite.ssr_curve(
            state.model, snapshot, val_clouds, list(PRESET_NAMES),
            trials=cfg.curve_trials, seed=cfg.seed, voxel_size=cfg.voxel_size,
            knn_k=cfg.knn_k, dilation_radius=cfg.dilation_radius)
        doc["ssr_ratio_by_level"] = means
    # high-distortion subregion metrics pooled over the validation clouds
    hd_preds = []
    hd_labels = []
    frac = []
    for cloud in val_clouds:
        preds = evalsuite.point_predictions(state.model, cloud, cfg.voxel_size, cfg.knn_k)
        hd = evalsuite.high_distortion_eval(preds, cloud.labels.astype(np.int64), cloud,
                                            class_count=cfg.class_count)
        frac.append(hd["mask_fraction"])
        hd_preds.append(preds)
        hd_labels.append(cloud.labels.astype(np.int64))
    doc["high_distortion_mask_fraction"] = float(np.mean(frac)) if frac else None
    if state.teacher is not None:
        student = np.concatenate(hd_preds)
        teacher_model = segnet.SegModel(segnet.FEATURE_DIM, cfg.seg_hidden,
                                        cfg.class_count, seed=cfg.seed)
        teacher_model.load_parameter_arrays(state.teacher)
        tpred = np.concatenate([
            evalsuite.point_predictions(teacher_model, cloud, cfg.voxel_size, cfg.knn_k)
            for cloud in val_clouds])
        labels = np.concatenate(hd_labels)
        doc["teacher_agreement"] = evalsuite.ssr_agreement(
            student, tpred, labels != IGNORE_LABEL)
    return doc


def run(cfg: TrainConfig, split: DatasetSplit, clouds_by_id: dict[str, PointCloud],
        out_dir: str | None = None, resume_from: str | None = None):
    """Train for cfg.epochs over the split; returns (state, reports).

    With out_dir set, writes steplog.ndjson, per-epoch reports, checkpoints,
    and the final report; fully deterministic given the config seed.
    """
    if not split.train:
        raise ValueError("split has no training clouds")
    state = load_state(cfg, resume_from) if resume_from else init_state(cfg)
    train_clouds = [clouds_by_id[cid] for cid in split.train]
    val_clouds = [clouds_by_id[cid] for cid in split.val]
    reports: list[dict] = []

    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
        log_fh = open(os.path.join(out_dir, "steplog.ndjson"),
                      "a" if resume_from else "w", encoding="utf-8")
    try:
        for epoch in range(state.epoch, cfg.epochs):
            state.epoch = epoch
            state.seg_opt.lr = seg_lr_at(epoch, cfg)
            order = Stream(cfg.seed, "order", epoch).permutation(len(train_clouds))
            for b in range(0, len(order), cfg.batch_size):
                batch = [train_clouds[i] for i in order[b:b + cfg.batch_size]]
                log = train_step(state, batch, cfg, epoch, b // cfg.batch_size)
                if log_fh:
                    log_fh.write(_json_line(log))
            if cfg.eval_every and val_clouds and (epoch + 1) % cfg.eval_every == 0:
                rep = validation_report(state, val_clouds, cfg, epoch)
                reports.append(rep)
                if out_dir:
                    with open(os.path.join(out_dir, "reports", f"epoch_{epoch:04d}.json"),
                              "w", encoding="utf-8") as f:
                        f.write(_json_line(rep))
            if out_dir and cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0:
                state.epoch = epoch + 1
                save_state(state, os.path.join(out_dir, "ckpt", f"epoch_{epoch + 1:04d}"))
        state.epoch = cfg.epochs
        if val_clouds:
            rep = final_report(state, val_clouds, cfg)
            reports.append(rep)
            if out_dir:
                with open(os.path.join(out_dir, "reports", "final.json"),
                          "w", encoding="utf-8") as f:
                    f.write(_json_line(rep))
        if out_dir:
            save_state(state, os.path.join(out_dir, "ckpt", "final"))
    finally:
        if log_fh:
            log_fh.close()
    return state, reports


def default_data(cfg: TrainConfig):
    """Synthetic split straight from the config (no data directory)."""
    template = SceneSpec(seed=0, num_points=cfg.points_per_scene,
                         class_count=cfg.class_count)
    split, scenes = make_split(cfg.seed, cfg.scenes, cfg.val_fraction, template)
    return split, {c.cloud_id: c for c in scenes}
