"""Verification suites run by the CLI: gradient fidelity against finite
differences, quantizer exactness against exhaustive scans, statistics replay,
and metric counting. Each suite returns OracleReports; any failure makes the
command exit nonzero. Setting A3_VERIFY_FAULT=<suite> corrupts that suite's
comparison on purpose (used to test the failure path)."""
from __future__ import annotations

import os

import numpy as np

from . import evalsuite, oracle, scp, trainer
from . import tensor as T
from .dataset import SYNTH_CLASSES, SceneSpec, generate_scene
from .rng import Stream

SUITES = ("grad", "quant", "stats", "metrics")


def _fault(suite: str) -> float:
    return 1e-3 if os.environ.get("A3_VERIFY_FAULT", "") == suite else 0.0


def tiny_config(**overrides) -> trainer.TrainConfig:
    """Small full-pipeline config for gradient checks: 4 classes, 4 codes,
    8 latent channels, one 64-point scene."""
    base = dict(
        epochs=1, batch_size=1, seed=5, mode="full", scenes=1,
        points_per_scene=64, class_count=4, val_fraction=0.5,
        seg_hidden=(6, 5), encoder_widths=(8, 8), k=4, latent_dim=8,
        voxel_size=0.35, knn_k=5, dilation_radius=0.3, t=2.0,
        augment_preset="heavy", noise_points=4, scanmix=False,
        ema_momentum=None, eval_every=0,
    )
    base.update(overrides)
    return trainer.TrainConfig(**base)


def tiny_step(cfg: trainer.TrainConfig | None = None, warm_steps: int = 2):
    """State, prepared batch, and pinned selection for one tiny step.

    A couple of warm-up steps first, so codes are initialized and variances
    tracked; the returned selection has nonempty shift regions.
    """
    cfg = cfg or tiny_config()
    spec = SceneSpec(seed=cfg.seed, num_points=cfg.points_per_scene,
                     class_count=cfg.class_count,
                     enabled_classes=SYNTH_CLASSES[:cfg.class_count],
                     num_cars=1, num_buildings=1, num_trees=0, num_poles=0,
                     num_signs=0, ground_extent=4.0)
    cloud = generate_scene(spec)
    state = trainer.init_state(cfg)
    for step in range(warm_steps):
        trainer.train_step(state, [cloud], cfg, 0, step)
    pb = trainer.prepare_batch(state, [cloud], cfg, 0, warm_steps)
    bundle, sel = trainer.step_losses(state, pb, cfg)
    return state, pb, sel


def _analytic_grads(state, pb, sel, cfg):
    bundle, _ = trainer.step_losses(state, pb, cfg, sel)
    state.seg_opt.zero_grad()
    if state.ae_opt is not None:
        state.ae_opt.zero_grad()
    T.backward(bundle.total)
    seg_grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                 for n, p in state.model.params.items()}
    state.seg_opt.zero_grad()
    vq_grads = {}
    if bundle.vq is not None:
        T.backward(bundle.vq.total)
        for n, p in state.ae_opt.params.items():
            vq_grads[n] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        state.ae_opt.zero_grad()
    return seg_grads, vq_grads


def suite_grad(h: float = 1e-5, rel_tol: float = 1e-4) -> list[oracle.OracleReport]:
    cfg = tiny_config()
    state, pb, sel = tiny_step(cfg)
    seg_grads, vq_grads = _analytic_grads(state, pb, sel, cfg)

    def total_loss():
        bundle, _ = trainer.step_losses(state, pb, cfg, sel)
        return bundle.total.item()

    def vq_loss():
        bundle, _ = trainer.step_losses(state, pb, cfg, sel)
        return bundle.vq.total.item()

    seg_arrays = {n: p.data for n, p in state.model.params.items()}
    fd_seg = oracle.fd_gradient(total_loss, seg_arrays, h=h)
    err_seg, _ = oracle.gradient_errors(seg_grads, fd_seg, rel_tol)

    ae_arrays = {n: p.data for n, p in state.ae_opt.params.items()}
    fd_vq = oracle.fd_gradient(vq_loss, ae_arrays, h=h)
    err_vq, _ = oracle.gradient_errors(vq_grads, fd_vq, rel_tol)

    fault = _fault("grad")
    return [
        oracle.report("grad.total_vs_fd", sum(a.size for a in seg_arrays.values()),
                      0.0, err_seg + fault, rel_tol),
        oracle.report("grad.vq_vs_fd", sum(a.size for a in ae_arrays.values()),
                      0.0, err_vq + fault, rel_tol),
    ]


def suite_quant(cases: int = 10_000) -> list[oracle.OracleReport]:
    c, k, d = 8, 32, 64
    stream = Stream(17, "quant-verify")
    cb = scp.CodebookState(c, k, d)
    cb.codes.data[...] = stream.normal(c * k * d).reshape(c * k, d)
    cb.initialized[...] = True
    # duplicated codes create exact ties
    cb.codes.data[5] = cb.codes.data[2]
    queries = stream.normal(cases * d).reshape(cases, d)
    classes = stream.integers(cases, c)
    qr = scp.quantize(cb, queries, classes)
    code_classes = np.repeat(np.arange(c), k)
    idx, dist = oracle.brute_nn(cb.codes.data, queries, classes, code_classes)
    mismatches = int((qr.flat != idx).sum()) + _fault("quant")
    derr = float(np.max(np.abs(qr.distance - dist)))
    return [
        oracle.report("quant.index_vs_brute", cases, mismatches, 0.0, 0.0),
        oracle.report("quant.distance_vs_brute", cases, derr, 0.0, 1e-9),
    ]


def suite_stats(steps: int = 50) -> list[oracle.OracleReport]:
    c, k, d = 3, 4, 6
    gamma = 0.9
    stream = Stream(23, "stats-verify")
    cb = scp.CodebookState(c, k, d)
    cb.initialized[...] = True
    trace = []
    for _ in range(steps):
        n = 40
        classes = stream.integers(n, c)
        z = stream.normal(n * d).reshape(n, d) * 1.4
        qr = scp.quantize(cb, z, classes)
        scp.update_code_stats(cb, qr, gamma)
        trace.append((qr.flat.copy(), z.copy()))
    replayed = oracle.replay_stats(trace, gamma, (c * k, d))
    err = float(np.max(np.abs(cb.variances.reshape(c * k, d) - replayed))) + _fault("stats")
    return [oracle.report("stats.ema_replay", steps, err, 0.0, 1e-12)]


def suite_metrics(cases: int = 5) -> list[oracle.OracleReport]:
    stream = Stream(31, "metrics-verify")
    worst = 0.0
    for _ in range(cases):
        n, c = 500, 6
        labels = stream.integers(n, c + 1)
        labels = np.where(labels == c, 255, labels)
        preds = stream.integers(n, c)
        per_class, miou, _, _ = evalsuite.iou(preds, labels, c)
        conf = evalsuite.confusion(preds, labels, c)
        ref_pc, ref_miou, ref_conf = oracle.counting_iou(preds, labels, c)
        for cls, v in ref_pc.items():
            worst = max(worst, abs(per_class[cls] - v))
        worst = max(worst, abs(miou - ref_miou), float(np.max(np.abs(conf - ref_conf))))
    worst += _fault("metrics")
    return [oracle.report("metrics.iou_confusion_vs_counting", cases, worst, 0.0, 1e-12)]


def run_suites(names) -> list[oracle.OracleReport]:
    table = {"grad": suite_grad, "quant": suite_quant,
             "stats": suite_stats, "metrics": suite_metrics}
    reports = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown suite {name!r}")
        reports.extend(table[name]())
    return reports
