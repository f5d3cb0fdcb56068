"""Command-line surface: gen-data, train, eval, export-filters, sweep.

Every run is fully determined by its flags, input files, and --seed; outputs
are byte-deterministic. Files are written atomically (temp file + rename), so
a failing command leaves no partial outputs. The manifest written by gen-data
is the single source of truth for datasets; no command globs directories.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from .camera import (CameraDescriptor, generate_scene, linspace_camera, read_cube,
                     sample_camera, subset_camera, write_cube)
from .errors import HyveError, UsageError
from .nets import ModelConfig, build_model, load_model, save_model
from .train import (TaskSpec, TrainConfig, evaluate, mean_oa_by_setting, patches_from_cube,
                    run_camera_agnostic_experiment, run_extension_ablation,
                    run_freeze_ablation, run_g_sweep, train)
from .wroi import gaussian_eval

SUMMARY_HEADER = "experiment,setting,seed,camera,oa,aa,kappa"


def _atomic_write(path, data: bytes):
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".hyve-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path, text: str):
    _atomic_write(path, text.encode())


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# camera specs

_PRESETS = {
    "specim": (397.66, 1003.81, 224),
    "corning": (408.03, 901.26, 249),
}


def parse_cameras(spec_text, base_range, base_channels):
    """Comma-separated camera specs.

    Supported: `specim`, `corning`, `base`, `linspace:w0:w1:n`,
    `subset:stride:offset` (a channel subset of the base grid).
    """
    cameras = []
    base = linspace_camera("camA", base_range[0], base_range[1], base_channels)
    for i, token in enumerate(spec_text.split(",")):
        token = token.strip()
        if token in _PRESETS:
            w0, w1, n = _PRESETS[token]
            cameras.append(linspace_camera(token, w0, w1, n))
        elif token == "base":
            cameras.append(base)
        elif token.startswith("linspace:"):
            _, w0, w1, n = token.split(":")
            cameras.append(linspace_camera("linspace%d" % i, float(w0), float(w1), int(n)))
        elif token.startswith("subset:"):
            parts = token.split(":")
            stride, offset = int(parts[1]), int(parts[2])
            name = parts[3] if len(parts) > 3 else "subset%d_%d" % (stride, offset)
            cameras.append(subset_camera(base, stride, offset, name))
        else:
            raise UsageError("unknown camera spec %r" % token)
    return cameras


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    rng_seed = args.seed
    w0, w1 = (float(t) for t in args.range.split(":"))
    cameras = parse_cameras(args.cameras, (w0, w1), args.base_channels)
    scene_min = min(cam.wavelengths[0] for cam in cameras)
    scene_max = max(cam.wavelengths[-1] for cam in cameras)
    scene_range = (min(w0, scene_min), max(w1, scene_max))
    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "version": 1,
        "classes": args.classes,
        "wavelength_range": [scene_range[0], scene_range[1]],
        "patch_hint": args.tile,
        "cameras": {cam.name: {"wavelengths": [float(x) for x in cam.wavelengths]}
                    for cam in cameras},
        "train": [],
        "test": [],
    }
    for split, count, offset in (("train", args.train_scenes, 0),
                                 ("test", args.test_scenes, 1000)):
        for s in range(count):
            scene_seed = rng_seed + offset + s
            scene = generate_scene(args.classes, args.size, args.size,
                                   scene_range, scene_seed, args.tile,
                                   spectra_seed=rng_seed)
            for ci, cam in enumerate(cameras):
                cube = sample_camera(scene, cam, args.noise,
                                     seed=scene_seed * 1000 + ci + offset)
                fname = "%s_%03d_%s.cube" % (split, s, cam.name)
                write_cube(cube, os.path.join(args.out, fname))
                manifest[split].append({"path": fname, "camera": cam.name,
                                        "scene_seed": scene_seed})
    _write_text(os.path.join(args.out, "manifest.json"),
                json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print("wrote %d train / %d test cubes for %d cameras to %s"
          % (len(manifest["train"]), len(manifest["test"]), len(cameras), args.out))
    return 0


def _load_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.fspath(path)) or "."
    return manifest, base


def _split_cubes(manifest, base, split):
    return [(entry, read_cube(os.path.join(base, entry["path"])))
            for entry in manifest[split]]


def _preprocess_cubes(cubes, preproc, manifest):
    from .camera import linear_interpolate, zero_pad_channels
    cameras = manifest["cameras"]
    if preproc == "none":
        return [c for _, c in cubes]
    if preproc == "zeropad":
        target = max(len(v["wavelengths"]) for v in cameras.values())
        return [zero_pad_channels(c, target) for _, c in cubes]
    if preproc == "interp":
        first = sorted(cameras)[0]
        target = CameraDescriptor(first, np.asarray(cameras[first]["wavelengths"]))
        return [linear_interpolate(c, target) for _, c in cubes]
    raise UsageError("unknown preprocessing %r" % preproc)


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    wavelength_aware = args.arch in ("hyve", "hyve++")
    if wavelength_aware and args.preproc != "none":
        raise UsageError("--arch %s requires --preproc none: wavelength-aware layers "
                         "consume each camera's grid natively" % args.arch)
    manifest, base = _load_manifest(args.data)
    cameras = manifest["cameras"]
    channel_counts = {len(v["wavelengths"]) for v in cameras.values()}
    grids = {tuple(v["wavelengths"]) for v in cameras.values()}
    if not wavelength_aware and args.preproc == "none" and len(grids) > 1:
        raise UsageError("--arch %s with --preproc none cannot consume mixed cameras; "
                         "use --preproc interp or zeropad" % args.arch)
    train_cubes = _preprocess_cubes(_split_cubes(manifest, base, "train"),
                                    args.preproc, manifest)
    test_cubes = _preprocess_cubes(_split_cubes(manifest, base, "test"),
                                   args.preproc, manifest)
    widths = tuple(int(w) for w in args.widths.split(","))
    if wavelength_aware:
        wrange = tuple(manifest["wavelength_range"])
        if args.sigma0 == "paper":
            sigma0 = None
        elif args.sigma0 == "auto":
            from .train import experiment_initial_variance
            sigma0 = experiment_initial_variance(wrange, args.g)
        else:
            sigma0 = float(args.sigma0)
        cfg = ModelConfig(args.arch, manifest["classes"], widths=widths, num_wrois=args.g,
                          wavelength_range=wrange, seed=args.seed,
                          initial_variance=sigma0)
    else:
        c_in = train_cubes[0].data.shape[2]
        cfg = ModelConfig(args.arch, manifest["classes"], widths=widths,
                          c_in=c_in, seed=args.seed)
    model = build_model(cfg)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, seed=args.seed,
                       freeze_gaussians=args.freeze_gaussians, patch_size=args.patch_size,
                       gaussian_lr_scale=args.gaussian_lr_scale)
    train_set = [s for c in train_cubes for s in patches_from_cube(c, args.patch_size)]
    test_set = [s for c in test_cubes for s in patches_from_cube(c, args.patch_size)]
    history = train(model, train_set, tcfg, test_set=test_set)

    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "checkpoint.hyve"),
               extras={"preproc": args.preproc, "epochs": args.epochs})
    lines = ["epoch,split,metric,value"]
    for e, (loss, acc) in enumerate(zip(history.train_loss, history.train_accuracy)):
        lines.append("%d,train,loss,%s" % (e, _fmt(loss)))
        lines.append("%d,train,accuracy,%s" % (e, _fmt(acc)))
    for e, acc in enumerate(history.test_accuracy):
        lines.append("%d,test,accuracy,%s" % (e, _fmt(acc)))
    _write_text(os.path.join(args.out, "history.csv"), "\n".join(lines) + "\n")
    if model.wavelength_aware:
        rows = ["epoch,wroi,mean_nm,variance_nm2"]
        rows += ["%d,%d,%s,%s" % (e, i, _fmt(m), _fmt(v))
                 for e, i, m, v in history.wroi_track]
        _write_text(os.path.join(args.out, "wroi.csv"), "\n".join(rows) + "\n")
    print("final: oa=%s aa=%s kappa=%s" % (_fmt(history.final["oa"]),
                                           _fmt(history.final["aa"]),
                                           _fmt(history.final["kappa"])))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    model, extras = load_model(args.model)
    manifest, base = _load_manifest(args.data)
    preproc = extras.get("preproc", "none")
    cameras = sorted(manifest["cameras"]) if args.camera == "all" else [args.camera]
    for name in cameras:
        if name not in manifest["cameras"]:
            raise UsageError("camera %r not in manifest (%s)"
                             % (name, ", ".join(sorted(manifest["cameras"]))))
    if not model.wavelength_aware and preproc == "none":
        for name in cameras:
            if len(manifest["cameras"][name]["wavelengths"]) != model.config.c_in:
                raise UsageError("camera %r has %d channels; fixed-channel model expects %d"
                                 % (name, len(manifest["cameras"][name]["wavelengths"]),
                                    model.config.c_in))
    rows = [SUMMARY_HEADER]
    patch = args.patch_size
    for name in cameras:
        lam = np.asarray(manifest["cameras"][name]["wavelengths"])
        if model.wavelength_aware:
            model.first.freeze_kernels(lam)  # one synthesis per camera
        entries = [(e, c) for e, c in _split_cubes(manifest, base, "test")
                   if e["camera"] == name]
        cubes = _preprocess_cubes(entries, preproc, manifest)
        samples = [s for c in cubes for s in patches_from_cube(c, patch)]
        metrics = evaluate(model, samples)
        print("%s: oa=%s aa=%s kappa=%s" % (name, _fmt(metrics["oa"]),
                                            _fmt(metrics["aa"]), _fmt(metrics["kappa"])))
        rows.append("eval,%s,%d,%s,%s,%s,%s" % (model.config.first_layer,
                                                model.config.seed, name,
                                                _fmt(metrics["oa"]), _fmt(metrics["aa"]),
                                                _fmt(metrics["kappa"])))
    if args.out:
        _write_text(args.out, "\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# export-filters


def _density_overlap(mu_a, var_a, mu_b, var_b, points=4001):
    """Overlap coefficient of two Gaussian densities: integral of min(f, g)."""
    lo = min(mu_a - 6 * math.sqrt(var_a), mu_b - 6 * math.sqrt(var_b))
    hi = max(mu_a + 6 * math.sqrt(var_a), mu_b + 6 * math.sqrt(var_b))
    x = np.linspace(lo, hi, points)
    fa = gaussian_eval(x, mu_a, var_a)
    fb = gaussian_eval(x, mu_b, var_b)
    return float(np.trapezoid(np.minimum(fa, fb), x))


def _svg_line_chart(series, title, y_label):
    """Dependency-free SVG multi-line chart; one polyline per series."""
    width, height, margin = 640, 360, 50
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f"]
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d">'
             % (width, height),
             '<text x="%d" y="20" font-size="14">%s</text>' % (margin, title),
             '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>'
             % (margin, height - margin, width - margin, height - margin),
             '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>'
             % (margin, margin, margin, height - margin),
             '<text x="%d" y="%d" font-size="11">epoch</text>'
             % (width // 2, height - 12),
             '<text x="12" y="%d" font-size="11" transform="rotate(-90 12 %d)">%s</text>'
             % (height // 2, height // 2, y_label)]
    for i, (name, pts) in enumerate(series):
        color = palette[i % len(palette)]
        coords = " ".join("%.2f,%.2f" % (sx(x), sy(y)) for x, y in pts)
        parts.append('<polyline fill="none" stroke="%s" stroke-width="1.5" points="%s"/>'
                     % (color, coords))
        parts.append('<text x="%d" y="%d" font-size="11" fill="%s">%s</text>'
                     % (width - margin + 4, int(sy(pts[-1][1])), color, name))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_export_filters(args):
    model, _ = load_model(args.model)
    if not model.wavelength_aware:
        raise UsageError("checkpoint %r has no wavelength-aware first layer; "
                         "nothing to export" % args.model)
    layer = model.first
    means = layer.wrois.means.value
    variances = layer.wrois.variances()
    os.makedirs(args.out, exist_ok=True)
    rows = ["wroi,mean_nm,variance_nm2,peak_density"]
    for i in range(layer.num_wrois):
        rows.append("%d,%s,%s,%s" % (i, _fmt(means[i]), _fmt(variances[i]),
                                     _fmt(gaussian_eval(means[i], means[i], variances[i]))))
    _write_text(os.path.join(args.out, "filters.csv"), "\n".join(rows) + "\n")

    overlap_rows = ["wroi_a,wroi_b,overlap,flagged"]
    for a in range(layer.num_wrois):
        for b in range(a + 1, layer.num_wrois):
            ov = _density_overlap(means[a], variances[a], means[b], variances[b])
            overlap_rows.append("%d,%d,%s,%s" % (a, b, _fmt(ov),
                                                 "yes" if ov > 0.5 else "no"))
    _write_text(os.path.join(args.out, "overlap.csv"), "\n".join(overlap_rows) + "\n")

    history_path = args.history
    if history_path is None:
        candidate = os.path.join(os.path.dirname(os.fspath(args.model)) or ".", "wroi.csv")
        history_path = candidate if os.path.exists(candidate) else None
    if history_path:
        with open(history_path) as fh:
            lines = fh.read().strip().splitlines()
        track = {}
        for line in lines[1:]:
            e, i, m, v = line.split(",")
            track.setdefault(int(i), []).append((int(e), float(m), float(v)))
        _write_text(os.path.join(args.out, "trajectory.csv"), "\n".join(lines) + "\n")
        mean_series = [("wroi %d" % i, [(e, m) for e, m, _ in pts])
                       for i, pts in sorted(track.items())]
        var_series = [("wroi %d" % i, [(e, v) for e, _, v in pts])
                      for i, pts in sorted(track.items())]
        _write_text(os.path.join(args.out, "means.svg"),
                    _svg_line_chart(mean_series, "WROI means over epochs", "mean (nm)"))
        _write_text(os.path.join(args.out, "variances.svg"),
                    _svg_line_chart(var_series, "WROI variances over epochs",
                                    "variance (nm^2)"))
    print("exported %d filters to %s" % (layer.num_wrois, args.out))
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args):
    workers = int(os.environ.get("HYVE_THREADS", "1"))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    spec = TaskSpec(classes=args.classes, scene_size=args.size,
                    train_scene_seeds=tuple(range(11, 11 + args.train_scenes)),
                    test_scene_seeds=tuple(range(91, 91 + args.test_scenes)))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, patch_size=spec.tile_size,
                      gaussian_lr_scale=args.gaussian_lr_scale)
    if args.experiment == "g":
        g_values = [int(g) for g in args.g_values.split(",")]
        rows = run_g_sweep(g_values, spec, cfg, seeds=seeds, max_workers=workers)
    elif args.experiment == "freeze":
        rows = run_freeze_ablation(spec, cfg, seeds=seeds, max_workers=workers)
    elif args.experiment == "extension":
        rows = run_extension_ablation(spec, cfg, seeds=seeds, max_workers=workers)
    elif args.experiment == "camera-agnostic":
        rows = run_camera_agnostic_experiment(spec, cfg, seeds=seeds, max_workers=workers)
    else:
        raise UsageError("unknown experiment %r" % args.experiment)
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append("%s,%s,%d,%s,%s,%s,%s" % (r["experiment"], r["setting"], r["seed"],
                                               r["camera"], _fmt(r["oa"]), _fmt(r["aa"]),
                                               _fmt(r["kappa"])))
    _write_text(args.out, "\n".join(lines) + "\n")
    for setting, oa in sorted(mean_oa_by_setting(rows).items()):
        print("%s: mean oa %s" % (setting, _fmt(oa)))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="hyve",
                                     description="wavelength-aware convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic multi-camera cubes")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--range", default="400:1000")
    p.add_argument("--cameras", default="base,subset:2:0")
    p.add_argument("--base-channels", type=int, default=224)
    p.add_argument("--train-scenes", type=int, default=4)
    p.add_argument("--test-scenes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier on a generated dataset")
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=["conv2d", "ds", "hyve", "hyve++"], default="hyve++")
    p.add_argument("--g", type=int, default=5)
    p.add_argument("--freeze-gaussians", action="store_true")
    p.add_argument("--preproc", choices=["none", "interp", "zeropad"], default="none")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--widths", default="25,30,50")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--sigma0", default="auto",
                   help="initial WROI variance (nm^2): 'auto' (overlap-covering), "
                        "'paper' ((1/G)^2 * span), or a number")
    p.add_argument("--gaussian-lr-scale", type=float, default=100.0,
                   help="step-size multiplier for WROI means/variances (raw nm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint per camera")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--camera", default="all")
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-filters", help="export learned WROI filters")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="wroi.csv trajectory file")
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("sweep", help="run an ablation or comparison experiment")
    p.add_argument("--experiment", required=True,
                   choices=["g", "freeze", "extension", "camera-agnostic"])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--g-values", default="1,2,3,5,8")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--train-scenes", type=int, default=4)
    p.add_argument("--test-scenes", type=int, default=2)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--gaussian-lr-scale", type=float, default=100.0)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HyveError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
