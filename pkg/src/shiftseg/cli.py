"""Command-line entry point: dataset generation, training, evaluation,
ablation sweeps, and verification.

Exit codes: 0 success, 1 verification or metric failure, 2 usage error.
Output directory layout: OUT/{manifest.json, config.json, steplog.ndjson,
ckpt/, reports/, csv/}.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, evalsuite, oracle, trainer, verify
from .augment import PRESET_NAMES
from .dataset import DatasetSplit, SceneSpec, load_cloud, make_split, save_cloud
from .pointcloud import PointCloud
from .trainer import ConfigError, TrainConfig


class UsageError(Exception):
    pass


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=False)
        f.write("\n")


def _manifest(out_dir: str, cfg_hash: str, seed: int, layout: list[str]) -> None:
    _write_json(os.path.join(out_dir, "manifest.json"), {
        "command": sys.argv,
        "config_hash": cfg_hash,
        "code_version": __version__,
        "seed": seed,
        "layout": layout,
        "created_unix": time.time(),
    })


def _prepare_out(out_dir: str, force: bool) -> None:
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise UsageError(f"output directory {out_dir!r} is not empty (use --force)")
    os.makedirs(out_dir, exist_ok=True)


def _load_config(path: str, mode: str | None = None, seed_env: str | None = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if mode is not None:
        doc["mode"] = mode
    if seed_env:
        doc["seed"] = int(seed_env)
    return TrainConfig.from_json(doc)


def _load_data(data_dir: str):
    with open(os.path.join(data_dir, "split.json"), "r", encoding="utf-8") as f:
        split = DatasetSplit.from_json(json.load(f))
    clouds = {}
    class_count = None
    for cid in split.train + split.val:
        cloud, c = load_cloud(os.path.join(data_dir, f"{cid}.a3pc"), cloud_id=cid)
        clouds[cid] = cloud
        class_count = c if class_count is None else class_count
    return split, clouds, class_count


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    _prepare_out(args.out, args.force)
    template = SceneSpec(seed=0, num_points=args.points, class_count=args.classes)
    split, scenes = make_split(args.seed, args.scenes, args.val_fraction, template)
    for cloud in scenes:
        save_cloud(cloud, os.path.join(args.out, f"{cloud.cloud_id}.a3pc"), args.classes)
    _write_json(os.path.join(args.out, "split.json"), split.to_json())
    _manifest(args.out, "-", args.seed,
              ["split.json", "manifest.json"] + [f"{c.cloud_id}.a3pc" for c in scenes])
    print(f"wrote {len(scenes)} clouds to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, mode=args.mode, seed_env=os.environ.get("A3_SEED"))
    if args.resume:
        if not os.path.isdir(args.out):
            raise UsageError("--resume needs an existing output directory")
    else:
        _prepare_out(args.out, args.force)
    if args.data:
        split, clouds, _ = _load_data(args.data)
    else:
        split, clouds = trainer.default_data(cfg)
    resume_from = None
    if args.resume:
        ckpt_root = os.path.join(args.out, "ckpt")
        epochs = sorted(d for d in os.listdir(ckpt_root) if d.startswith("epoch_"))
        if not epochs:
            raise UsageError("no epoch checkpoint to resume from")
        resume_from = os.path.join(ckpt_root, epochs[-1])
    _write_json(os.path.join(args.out, "config.json"), cfg.to_json())
    state, reports = trainer.run(cfg, split, clouds, out_dir=args.out,
                                 resume_from=resume_from)
    _manifest(args.out, cfg.config_hash(), cfg.seed,
              ["manifest.json", "config.json", "steplog.ndjson", "ckpt/", "reports/"])
    if reports:
        print(f"final val mIoU {reports[-1]['miou']:.4f}")
    return 0


def _eval_level(state, cfg, val_clouds, level: str, seed: int, trials: int):
    from .augment import augment_pair

    preds, labels = [], []
    aug_cfg = evalsuite.level_augment_config(level)
    for ci, cloud in enumerate(val_clouds):
        partner = val_clouds[(ci + 1) % len(val_clouds)] if aug_cfg.scanmix else None
        for t in range(trials):
            aug, _ = augment_pair(cloud, aug_cfg, (seed, "eval", level, ci, t),
                                  partner=partner)
            preds.append(evalsuite.point_predictions(state.model, aug, cfg.voxel_size,
                                                     cfg.knn_k))
            labels.append(aug.labels.astype(np.int64))
    per_class, miou, miou_all, counts = evalsuite.iou(
        np.concatenate(preds), np.concatenate(labels), cfg.class_count)
    return {
        "level": level,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "miou": miou,
        "miou_all": miou_all,
        "true_counts": counts.tolist(),
    }


def cmd_eval(args) -> int:
    if not os.path.isdir(args.ckpt):
        raise UsageError(f"checkpoint directory {args.ckpt!r} not found")
    cfg = _load_config(args.config, seed_env=os.environ.get("A3_SEED"))
    _prepare_out(args.out, args.force)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "csv"), exist_ok=True)
    if args.data:
        split, clouds, _ = _load_data(args.data)
    else:
        split, clouds = trainer.default_data(cfg)
    state = trainer.load_state(cfg, args.ckpt)
    val_clouds = [clouds[c] for c in split.val]
    levels = args.levels.split(",")
    for level in levels:
        if level not in PRESET_NAMES:
            raise UsageError(f"unknown level {level!r}")

    rows = []
    for level in levels:
        rep = _eval_level(state, cfg, val_clouds, level, cfg.seed, args.trials)
        if state.cb is not None and state.cb.initialized.any():
            from . import ssr as ssrmod
            enc = state.prior.parameter_arrays() if state.prior is not None else None
            snapshot = ssrmod.take_snapshot(state.cb, cfg.t, encoder_params=enc,
                                            projection=state.projection)
            means, _ = evalsuite.ssr_curve(
                state.model, snapshot, val_clouds, [level], trials=args.trials,
                seed=cfg.seed, voxel_size=cfg.voxel_size, knn_k=cfg.knn_k,
                dilation_radius=cfg.dilation_radius)
            rep["ssr_ratio"] = means[level]
        else:
            rep["ssr_ratio"] = None
        # clean-geometry high-distortion subregion metrics alongside
        fracs = []
        mious = []
        for cloud in val_clouds:
            p = evalsuite.point_predictions(state.model, cloud, cfg.voxel_size, cfg.knn_k)
            hd = evalsuite.high_distortion_eval(p, cloud.labels.astype(np.int64), cloud,
                                                class_count=cfg.class_count)
            fracs.append(hd["mask_fraction"])
            mious.append(hd["miou"])
        rep["high_distortion_mask_fraction"] = float(np.mean(fracs))
        rep["high_distortion_miou"] = float(np.mean(mious))
        rep["config_hash"] = cfg.config_hash()
        rep["seed"] = cfg.seed
        _write_json(os.path.join(args.out, "reports", f"level_{level}.json"), rep)
        rows.append((level, cfg.seed, rep["ssr_ratio"], rep["miou"]))
        print(f"level {level}: mIoU {rep['miou']:.4f} ssr_ratio {rep['ssr_ratio']}")
    with open(os.path.join(args.out, "csv", "level_sweep.csv"), "w", encoding="utf-8") as f:
        f.write("level,seed,ssr_ratio,miou\n")
        for level, seed, ratio, miou in rows:
            ratio_s = "" if ratio is None else repr(float(ratio))
            f.write(f"{level},{seed},{ratio_s},{repr(float(miou))}\n")
    _manifest(args.out, cfg.config_hash(), cfg.seed,
              ["manifest.json", "reports/", "csv/level_sweep.csv"])
    return 0


SWEEPS = {
    "k": ("k", [16, 32, 64]),
    "D": ("latent_dim", [32, 64, 128]),
    "t": ("t", [2.0, 3.0, 4.0]),
    "lambda": ("lam", [0.02, 0.1, 0.5]),
    "prior": ("prior_source", ["online", "offline", "gt"]),
    "distill": ("distill_target", ["global", "class_conditional", "none"]),
    "curriculum": ("curriculum", ["off", "staged"]),
}


def cmd_ablate(args) -> int:
    if args.sweep not in SWEEPS:
        raise UsageError(f"unknown sweep {args.sweep!r} (choose from {sorted(SWEEPS)})")
    base = _load_config(args.config, seed_env=os.environ.get("A3_SEED"))
    _prepare_out(args.out, args.force)
    os.makedirs(os.path.join(args.out, "csv"), exist_ok=True)
    field, values = SWEEPS[args.sweep]
    if args.data:
        split, clouds, _ = _load_data(args.data)
    else:
        split, clouds = trainer.default_data(base)
    val_clouds = [clouds[c] for c in split.val]

    rows = []
    online_ckpt = None
    for value in values:
        doc = base.to_json()
        key = trainer._JSON_ALIASES.get(field, field)
        doc[key] = value
        if args.sweep == "prior" and value == "offline":
            if online_ckpt is None:
                raise UsageError("prior sweep must run the online cell first")
            doc["offline_prior_path"] = online_ckpt
        cfg = TrainConfig.from_json(doc)
        cell_dir = os.path.join(args.out, f"{args.sweep}_{value}")
        os.makedirs(cell_dir, exist_ok=True)
        _write_json(os.path.join(cell_dir, "config.json"), cfg.to_json())
        state, reports = trainer.run(cfg, split, clouds, out_dir=cell_dir)
        if args.sweep == "prior" and value == "online":
            online_ckpt = os.path.join(cell_dir, "ckpt", "final")
        clean = reports[-1]["miou"] if reports else float("nan")
        heavy = _eval_level(state, cfg, val_clouds, "heavy", cfg.seed, 1)["miou"]
        rows.append((args.sweep, value, clean, heavy))
        print(f"{args.sweep}={value}: clean mIoU {clean:.4f} heavy mIoU {heavy:.4f}")
    with open(os.path.join(args.out, "csv", f"sweep_{args.sweep}.csv"), "w",
              encoding="utf-8") as f:
        f.write("sweep,value,miou_clean,miou_heavy\n")
        for sweep, value, clean, heavy in rows:
            f.write(f"{sweep},{value},{repr(float(clean))},{repr(float(heavy))}\n")
    _manifest(args.out, base.config_hash(), base.seed,
              ["manifest.json", "csv/", "<cell dirs>"])
    return 0


def cmd_verify(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    reports = verify.run_suites(names)
    out = args.out or "verify_out"
    os.makedirs(out, exist_ok=True)
    oracle.write_reports(reports, os.path.join(out, "oracle_report.json"))
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.check} "
              f"(abs {r.max_abs_err:.3g}, rel {r.max_rel_err:.3g}, tol {r.tolerance:.3g})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftseg",
                                description="robust point-cloud segmentation training")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, default=32)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.25)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", default=None, help="dataset directory from `gen`")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=trainer.MODES, default=None)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint across augmentation levels")
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--config", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--levels", default="none,light,moderate,heavy,excessive")
    e.add_argument("--trials", type=int, default=2)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="one-factor sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True)
    a.add_argument("--data", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run oracle verification suites")
    v.add_argument("--suite", choices=list(verify.SUITES) + ["all"], default="all")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
