"""Experiment harness.

Subcommands: synth, train, eval, noise-sweep, ablate, infer, report.
Every command writes the fully-resolved configuration beside its outputs;
rerunning a command from that configuration reproduces them byte for
byte. Errors exit nonzero with one machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import config as cf
from . import dataset as ds
from . import metrics as mt
from . import network as net
from . import phantom as ph
from . import pgmio
from . import projector as pj
from . import training as tr
from .autodiff import Tensor
from .params import load_checkpoint, save_checkpoint
from .volume import Volume, load_image2d, save_mask, save_volume


def _write_resolved(out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    cf.save_config(os.path.join(out_dir, "config.resolved.json"), cfg)


def _load_cfg(args):
    cfg = cf.load_config(args.config) if args.config else cf.resolve_config()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _parse_angle(spec: str):
    if spec == "random":
        return None
    if spec.startswith("fixed:"):
        return float(spec.split(":", 1)[1])
    raise ValueError(f"--angle must be 'random' or 'fixed:<deg>', got {spec!r}")


def _factory_from_config(cfg) -> ds.SampleFactory:
    spec = cf.phantom_spec(cfg)
    reference, ref_mask, _, dvfs = ph.generate_phantom(spec)
    d = cfg["dataset"]
    return ds.prepare_factory(
        reference, ref_mask, dvfs, target_spacing=d["target_spacing_mm"],
        n_components=d["n_components"], input_size=d["input_size"],
        output_size=d["output_size"], base_seed=cfg["seed"],
        detector_pixels=d["detector_pixels"], beam=d["beam"],
        sad_mm=d["sad_mm"], sdd_mm=d["sdd_mm"])


def _load_model(checkpoint_path) -> net.ModelState:
    cfg_json, values = load_checkpoint(checkpoint_path)
    return net.rebuild(net.NetworkConfig.from_json(cfg_json), values)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_cfg(args)
    _write_resolved(args.out, cfg)
    chash = cf.config_hash(cfg)
    spec = cf.phantom_spec(cfg)
    reference, ref_mask, phases, dvfs = ph.generate_phantom(spec)
    ph.save_phantom(os.path.join(args.out, "phantom"), reference, ref_mask,
                    phases, dvfs)
    factory = _factory_from_config(cfg)
    fixed = _parse_angle(args.angle) if args.angle else None
    manifest = ds.build_dataset(factory, cfg["dataset"]["n_samples"], cfg["seed"],
                                os.path.join(args.out, "dataset"),
                                config_hash=chash, fixed_angle=fixed)
    sizes = manifest.split_sizes()
    print(f"synth: {len(manifest.records)} samples "
          f"({sizes['train']}/{sizes['val']}/{sizes['test']} train/val/test) "
          f"-> {os.path.join(args.out, 'dataset')}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    _write_resolved(args.out, cfg)
    manifest = ds.load_manifest(args.manifest)
    model = net.build(cf.network_config(cfg), seed=cfg["seed"])
    tcfg = cf.train_config(cfg)
    log_path = os.path.join(args.out, "train_log.csv")

    def progress(row):
        print(f"epoch {row['epoch']:3d}: lr {row['lr']:.2e} "
              f"train {row['train_total']:.5f} val {row['val_total']:.5f} "
              f"({row['seconds']:.1f}s)")

    best, log = tr.train(model, manifest, tcfg, log_path=log_path,
                         progress=progress if args.verbose else None)
    ckpt_path = os.path.join(args.out, "checkpoint.rtsc")
    save_checkpoint(ckpt_path, best.config.to_json(), best.params)
    print(f"train: best epoch {log.best_epoch} (val {log.best_val:.5f}) "
          f"-> {ckpt_path}")
    return 0


def _eval_samples_for(manifest, split, model, cfg, angle_spec):
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    fixed = _parse_angle(angle_spec)
    if fixed is None:
        return [ds.load_sample(manifest, i) for i in ids]
    # pinned-angle protocol: re-render each projection through the full
    # pipeline with the angle overridden; targets stay those of the corpus
    factory = _factory_from_config(cfg)
    return [factory.make_sample(i, fixed_angle=fixed) for i in ids]


def _dump_slices(out_dir, model, samples):
    os.makedirs(out_dir, exist_ok=True)
    for sample in samples:
        pred_vol, pred_mask = mt.predict_sample(model, sample)
        mid = pred_vol.voxels.shape[0] // 2
        sid = f"s{sample.id:05d}"
        pgmio.write_pgm(os.path.join(out_dir, f"{sid}_pred.pgm"),
                        pred_vol.voxels[mid])
        pgmio.write_pgm(os.path.join(out_dir, f"{sid}_target.pgm"),
                        sample.target_volume.voxels[mid])
        pred_slice = (pred_mask.voxels[mid] if pred_mask is not None
                      else np.zeros_like(sample.target_mask.voxels[mid]))
        pgmio.write_pgm(os.path.join(out_dir, f"{sid}_overlay.pgm"),
                        pgmio.overlay_slice(pred_slice,
                                            sample.target_mask.voxels[mid]))


def cmd_eval(args):
    cfg = _load_cfg(args)
    _write_resolved(args.out, cfg)
    manifest = ds.load_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    if model.config.input_size != cfg["dataset"]["input_size"]:
        raise ValueError(f"checkpoint input size {model.config.input_size} does "
                         f"not match config {cfg['dataset']['input_size']}")
    samples = _eval_samples_for(manifest, args.split, model, cfg, args.angle)
    tag = f"{args.split}:{args.angle}"
    report = mt.evaluate_samples(model, samples, tag)
    path = os.path.join(args.out, f"report_{args.split}.csv")
    report.save_csv(path)
    _dump_slices(os.path.join(args.out, "slices"), model, samples)
    mean, std = report.aggregates()
    print(f"eval[{tag}]: " + " ".join(
        f"{k}={mean[k]:.4f}" for k in ("mae", "psnr_db", "ssim", "dice", "comd_mm")
        if np.isfinite(mean[k])))
    print(f"eval: report -> {path}")
    return 0


def cmd_noise_sweep(args):
    cfg = _load_cfg(args)
    _write_resolved(args.out, cfg)
    manifest = ds.load_manifest(args.manifest)
    model = _load_model(args.checkpoint)
    samples = [ds.load_sample(manifest, i) for i in manifest.ids("test")]
    table_rows = []
    for sigma in cfg["noise_sigmas"]:
        overrides = {}
        for s in samples:
            proj = pj.Projection(s.projection, pj.Geometry(s.angle_deg,
                                 det_pixels=s.projection.shape[::-1],
                                 det_spacing=(1.0, 1.0)))
            noised = pj.add_gaussian_noise(proj, sigma,
                                           seed=[cfg["seed"], s.id,
                                                 int(round(sigma * 10000))])
            overrides[s.id] = noised.pixels
        tag = f"test:sigma={sigma:g}"
        report = mt.evaluate_samples(model, samples, tag,
                                     projection_overrides=overrides)
        report.save_csv(os.path.join(args.out, f"report_sigma{sigma:g}.csv"))
        mean, _ = report.aggregates()
        table_rows.append((sigma, mean))
    table_path = os.path.join(args.out, "noise_table.csv")
    with open(table_path, "w") as f:
        f.write("sigma_ratio," + ",".join(mt.METRIC_COLUMNS) + "\n")
        for sigma, mean in table_rows:
            f.write(f"{sigma:g}," + ",".join(
                mt._fmt_metric(mean[c]) for c in mt.METRIC_COLUMNS) + "\n")
    print(f"noise-sweep: {len(table_rows)} sigma rows -> {table_path}")
    return 0


ABLATION_ROWS = (
    ("baseline", dict(enable_seg_branch=False, enable_aec=False, enable_ure=False)),
    ("seg", dict(enable_seg_branch=True, enable_aec=False, enable_ure=False)),
    ("seg_aec", dict(enable_seg_branch=True, enable_aec=True, enable_ure=False)),
    ("seg_aec_ure", dict(enable_seg_branch=True, enable_aec=True, enable_ure=True)),
)


def cmd_ablate(args):
    cfg = _load_cfg(args)
    _write_resolved(args.out, cfg)
    manifest = ds.load_manifest(args.manifest)
    tcfg = cf.train_config(cfg)
    rows = []
    for name, flags in ABLATION_ROWS:
        row_cfg = json.loads(json.dumps(cfg))
        row_cfg["network"].update(flags)
        row_dir = os.path.join(args.out, name)
        os.makedirs(row_dir, exist_ok=True)
        model = net.build(cf.network_config(row_cfg), seed=cfg["seed"])
        best, log = tr.train(model, manifest, tcfg,
                             log_path=os.path.join(row_dir, "train_log.csv"))
        save_checkpoint(os.path.join(row_dir, "checkpoint.rtsc"),
                        best.config.to_json(), best.params)
        report = mt.evaluate_suite(best, manifest, "test", tag=name)
        report.save_csv(os.path.join(row_dir, "report_test.csv"))
        mean, _ = report.aggregates()
        rows.append((name, flags, mean))
        print(f"ablate[{name}]: done (best epoch {log.best_epoch})")
    table_path = os.path.join(args.out, "ablation_table.csv")
    with open(table_path, "w") as f:
        f.write("row,seg,aec,ure," + ",".join(mt.METRIC_COLUMNS) + "\n")
        for name, flags, mean in rows:
            marks = [("x" if flags["enable_seg_branch"] else ""),
                     ("x" if flags["enable_aec"] else ""),
                     ("x" if flags["enable_ure"] else "")]
            cells = []
            for c in mt.METRIC_COLUMNS:
                if c in ("dice", "comd_mm") and not flags["enable_seg_branch"]:
                    cells.append("")
                else:
                    cells.append(mt._fmt_metric(mean[c]))
            f.write(",".join([name] + marks + cells) + "\n")
    print(f"ablate: 4 rows -> {table_path}")
    return 0


def cmd_infer(args):
    model = _load_model(args.checkpoint)
    pixels, meta = load_image2d(args.projection)
    s = model.config.input_size
    if pixels.shape != (s, s):
        raise ValueError(f"projection shape {pixels.shape} does not match "
                         f"checkpoint input size {s}")
    os.makedirs(args.out, exist_ok=True)

    def run_once():
        with ad.no_grad():
            result = net.forward(model, Tensor(pixels[None, :, :]))
        mask = (mt.binarize_seg(result.seg_probs)
                if result.seg_probs is not None else None)
        cen = mt.centroid_mm(mask) if mask is not None else None
        return result, mask, cen

    if args.reps < 2:
        raise ValueError("--reps must be >= 2 (first pass is a warm-up)")
    timings = []
    result = mask = cen = None
    for rep in range(args.reps):
        t0 = time.perf_counter()
        result, mask, cen = run_once()
        if rep > 0:  # first pass is warm-up, excluded from statistics
            timings.append(time.perf_counter() - t0)
    pred_vol = Volume(result.recon.data[0])
    save_volume(os.path.join(args.out, "pred_vol"), pred_vol)
    if mask is not None:
        save_mask(os.path.join(args.out, "pred_mask"), mask)
    stats = {
        "repetitions_timed": len(timings),
        "median_ms": float(np.median(timings) * 1000) if timings else None,
        "p95_ms": float(np.percentile(timings, 95) * 1000) if timings else None,
        "tumor_centroid_mm": None if cen is None else [float(c) for c in cen],
    }
    with open(os.path.join(args.out, "latency.json"), "w") as f:
        json.dump(stats, f, indent=1)
    print(f"infer: median {stats['median_ms']:.1f} ms, "
          f"p95 {stats['p95_ms']:.1f} ms over {stats['repetitions_timed']} passes"
          if timings else "infer: no timed passes")
    return 0


def cmd_report(args):
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "combined_report.csv")
    with open(table_path, "w") as f:
        f.write("source,tag,n," + ",".join(
            f"{c}_mean,{c}_std" for c in mt.METRIC_COLUMNS) + "\n")
        for path in args.inputs:
            report = mt.load_report(path)
            mean, std = report.aggregates()
            cells = []
            for c in mt.METRIC_COLUMNS:
                cells.append(mt._fmt_metric(mean[c]))
                cells.append(mt._fmt_metric(std[c]))
            f.write(",".join([os.path.basename(path), report.tag,
                              str(len(report.rows))] + cells) + "\n")
            print(f"{os.path.basename(path)} [{report.tag}]: n={len(report.rows)} "
                  + " ".join(f"{c}={mean[c]:.4f}" for c in ("mae", "ssim", "dice")
                             if np.isfinite(mean[c])))
    print(f"report: -> {table_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="svrecon",
        description="Single-projection reconstruction/segmentation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("synth", help="generate phantom and training corpus")
    common(p)
    p.add_argument("--angle", default=None,
                   help="'fixed:<deg>' pins the gantry angle (default random)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the network on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--angle", default="random",
                   help="'random' uses stored projections; 'fixed:<deg>' re-renders")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="evaluate under test-time noise")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("ablate", help="train and score the four flag rows")
    common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="single-projection inference with timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--projection", required=True,
                   help="stem of a stored 2D projection (RTSV1 pair)")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="aggregate stored report CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # one machine-parseable line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
