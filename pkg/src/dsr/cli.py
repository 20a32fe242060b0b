"""Command-line interface.

Subcommands: build-prior, clean-mask, render, fit, gradcheck, make-fixtures.
Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 run finished
but every sample was skipped. Option precedence: command-line flags, then a
TOML --config file, then built-in defaults. Every run with the same seed and
inputs writes byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

import dsr.io as dsr_io
from dsr.body import BodyParams, forward
from dsr.fitting import FitSchedule, FitTargets, fit
from dsr.fixtures import make_fixture_set, pixel_labels_from_hard
from dsr.gradcheck import run_gradcheck
from dsr.losses import LossWeights
from dsr.masks import process_sample
from dsr.prior import (
    ScanObservation,
    VertexLabelPrior,
    build_prior,
    coarse_vertex_probability,
    mc_vertex_probability,
)
from dsr.raster import RasterConfig, mesh_to_screen, rasterize_hard, render_semantic_channels, visible_vertices

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_SKIPPED = 4


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def _load_config(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return {key.replace("-", "_"): value for key, value in raw.items()}


def _build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="rng seed")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("DSR_THREADS", "1")),
                        help="torch/omp thread count (env DSR_THREADS)")
    common.add_argument("--config", default=None,
                        help="TOML file of flag defaults (flags still win)")

    top = argparse.ArgumentParser(
        prog="dsr", description="differentiable semantic rendering toolkit")
    sub = top.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parsers = []

    p = sub.add_parser("build-prior", parents=[common], formatter_class=fmt,
                       help="aggregate labeled scans into a per-vertex label prior")
    p.add_argument("--scans", required=True,
                   help="directory of <stem>.obj/.camera.json/.labels.png triples")
    p.add_argument("--eps-bg", type=float, default=0.05,
                   help="background probability floor")
    p.add_argument("--out", required=True, help="output prior container")
    p.add_argument("--csv", default=None, help="also export the matrix as CSV")
    p.add_argument("--sigma", type=float, default=1e-5, help="coverage bandwidth")
    p.add_argument("--gamma", type=float, default=0.1, help="depth softmax temperature")
    p.set_defaults(func=cmd_build_prior)
    parsers.append(p)

    p = sub.add_parser("clean-mask", parents=[common], formatter_class=fmt,
                       help="turn a label image + keypoints into fit targets")
    p.add_argument("--mask", required=True, help="20-class palette PNG")
    p.add_argument("--keypoints", required=True, help="keypoint JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--offset", type=int, default=30,
                   help="crop margin around the keypoint box, pixels")
    p.add_argument("--min-pixels", type=int, default=60,
                   help="minimum class area kept in the binary target")
    p.set_defaults(func=cmd_clean_mask)
    parsers.append(p)

    p = sub.add_parser("render", parents=[common], formatter_class=fmt,
                       help="render prior-weighted class images for given parameters")
    p.add_argument("--template", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--mode", required=True, choices=("mc", "c", "hard"))
    p.add_argument("--out", required=True, help="output PFM path (or stem)")
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--sigma", type=float, default=1e-5)
    p.add_argument("--gamma", type=float, default=0.1)
    p.set_defaults(func=cmd_render)
    parsers.append(p)

    p = sub.add_parser("fit", parents=[common], formatter_class=fmt,
                       help="fit body parameters to keypoint and mask targets")
    p.add_argument("--template", required=True)
    p.add_argument("--init", required=True, help="initial parameter JSON")
    p.add_argument("--joints", default=None, help="keypoint JSON (2-D and/or 3-D)")
    p.add_argument("--mc", default=None, help="binary target PNG")
    p.add_argument("--c", default=None, help="4-class target PNG")
    p.add_argument("--prior", default=None, help="prior container (needed with --mc/--c)")
    p.add_argument("--ref", default=None, help="reference parameter JSON for the pose/shape term")
    p.add_argument("--gt", default=None, help="ground-truth parameter JSON for metrics")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=None,
                   help="iterations before mask terms activate (default 10%%)")
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--optimizer", choices=("adaptive-moments", "gradient-descent"),
                   default="adaptive-moments")
    p.add_argument("--mc-metric", choices=("siou", "distm"), default="siou")
    p.add_argument("--w-2d", type=float, default=1.0)
    p.add_argument("--w-3d", type=float, default=1.0)
    p.add_argument("--w-theta", type=float, default=1.0)
    p.add_argument("--w-mc", type=float, default=0.01)
    p.add_argument("--w-c", type=float, default=0.01)
    p.add_argument("--freeze-theta", action="store_true")
    p.add_argument("--freeze-beta", action="store_true")
    p.add_argument("--freeze-camera", action="store_true")
    p.add_argument("--width", type=int, default=96,
                   help="target image width when no mask is given")
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--sigma", type=float, default=1e-5)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--trace", default=None,
                   help="loss trace JSONL (default: <out>.trace.jsonl)")
    p.add_argument("--render-every", type=int, default=None,
                   help="dump renders every N iterations")
    p.add_argument("--render-dir", default=None,
                   help="directory for dumped renders (default: <out dir>/renders)")
    p.set_defaults(func=cmd_fit)
    parsers.append(p)

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt,
                       help="verify analytic gradients against finite differences")
    p.add_argument("--single", action="store_true",
                   help="single-precision data; tolerance loosens to 1e-2")
    p.add_argument("--scale", type=int, default=12,
                   help="edge length in pixels of the randomized raster fixtures")
    p.set_defaults(func=cmd_gradcheck)
    parsers.append(p)

    p = sub.add_parser("make-fixtures", parents=[common], formatter_class=fmt,
                       help="write a synthetic template, scan set, and fit sample")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--size", type=int, default=96, help="square image size")
    p.set_defaults(func=cmd_make_fixtures)
    parsers.append(p)

    return top, parsers


def _apply_config(parsers, config: dict) -> None:
    known: set[str] = set()
    for p in parsers:
        dests = {a.dest for a in p._actions}
        known |= dests
        match = {k: v for k, v in config.items() if k in dests}
        if match:
            p.set_defaults(**match)
    unknown = set(config) - known
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")


def cmd_build_prior(args) -> int:
    scans = dsr_io.find_scans(args.scans)
    if not scans:
        raise ValueError(f"no scan triples found under {args.scans}")
    config = RasterConfig(sigma=args.sigma, gamma=args.gamma)
    first_verts, _ = dsr_io.read_obj(scans[0]["mesh"])
    num_vertices = len(first_verts)

    def observations():
        for scan in scans:
            verts, faces = dsr_io.read_obj(scan["mesh"])
            camera = dsr_io.load_camera(scan["camera"])
            labels = dsr_io.read_label_png(scan["labels"])
            yield ScanObservation(verts, faces, camera, labels)

    prior, counts = build_prior(observations(), num_vertices,
                                eps_bg=args.eps_bg, config=config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dsr_io.save_prior(args.out, prior.probs, list(prior.labels), prior.eps_bg,
                      counts=counts)
    if args.csv:
        dsr_io.export_prior_csv(args.csv, prior.probs, list(prior.labels))
    print(f"prior over {num_vertices} vertices from {len(scans)} scans -> {args.out}")
    return EXIT_OK


def cmd_clean_mask(args) -> int:
    labels = dsr_io.read_label_png(args.mask)
    keypoints = dsr_io.load_keypoints(args.keypoints)
    if "joints2d" not in keypoints:
        raise ValueError(f"{args.keypoints}: no joints2d entry")
    sample = process_sample(labels, keypoints["joints2d"],
                            offset=args.offset, min_pixels=args.min_pixels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.mask).stem
    _json_dump(out / f"{stem}.meta.json", sample.meta())
    if not sample.valid:
        print(f"{stem}: skipped (no confident keypoints)")
        return EXIT_SKIPPED
    dsr_io.write_label_png(out / f"{stem}.c.png", sample.c_mask)
    written = [f"{stem}.meta.json", f"{stem}.c.png"]
    if sample.mc_mask is not None:
        dsr_io.write_label_png(out / f"{stem}.mc.png", sample.mc_mask)
        written.append(f"{stem}.mc.png")
    print(f"{stem}: wrote {', '.join(written)} in {out}")
    return EXIT_OK


def _load_prior_checked(path, num_vertices: int) -> VertexLabelPrior:
    probs, labels, eps_bg = dsr_io.load_prior(path)
    prior = VertexLabelPrior(probs, tuple(labels), eps_bg)
    if prior.num_vertices != num_vertices:
        raise ValueError(f"{path}: prior has {prior.num_vertices} rows, "
                         f"template has {num_vertices} vertices")
    return prior


def cmd_render(args) -> int:
    template = dsr_io.load_template(args.template)
    params = dsr_io.load_params(args.params)
    prior = _load_prior_checked(args.prior, template.vertices.shape[0])
    config = RasterConfig(sigma=args.sigma, gamma=args.gamma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    mesh = forward(template, params)
    verts2d, z = mesh_to_screen(mesh.vertices, params.camera)
    hard = rasterize_hard(verts2d, z, template.faces, args.width, args.height, config)
    written: list[Path] = []
    if args.mode == "hard":
        dsr_io.write_pfm(out, hard.depth.numpy())
        vertex_labels = prior.probs.argmax(axis=1).astype(np.uint8)
        label_img = pixel_labels_from_hard(hard, template.faces.numpy(), vertex_labels)
        label_path = out.with_suffix(".labels.png")
        dsr_io.write_label_png(label_path, label_img)
        written += [out, label_path]
    else:
        visible = visible_vertices(hard, template.faces, mesh.num_vertices)
        if args.mode == "mc":
            rows = torch.tensor(mc_vertex_probability(prior))[:, None]
            background = torch.tensor([0.0])
        else:
            rows = torch.tensor(coarse_vertex_probability(prior))
            background = torch.tensor([1.0, 0.0, 0.0, 0.0])
        soft = render_semantic_channels(verts2d, z, template.faces, rows, visible,
                                        args.width, args.height, config,
                                        background=background)
        image = soft.image.detach().numpy()
        if args.mode == "mc":
            dsr_io.write_pfm(out, image[:, :, 0])
            written.append(out)
        else:
            stem = out.with_suffix("")
            for k in range(image.shape[2]):
                path = Path(f"{stem}.c{k}.pfm")
                dsr_io.write_pfm(path, image[:, :, k])
                written.append(path)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def _read_binary_png(path) -> np.ndarray:
    mask = dsr_io.read_label_png(path)
    if mask.max(initial=0) > 1:
        raise ValueError(f"{path}: binary mask must contain only {{0, 1}}")
    return mask


def cmd_fit(args) -> int:
    template = dsr_io.load_template(args.template)
    params0 = dsr_io.load_params(args.init)
    keypoints = dsr_io.load_keypoints(args.joints) if args.joints else {}
    mc_mask = _read_binary_png(args.mc) if args.mc else None
    c_mask = dsr_io.read_label_png(args.c) if args.c else None
    if c_mask is not None and c_mask.max(initial=0) > 3:
        raise ValueError(f"{args.c}: coarse mask ids must lie in [0, 3]")

    width, height = args.width, args.height
    if mc_mask is not None:
        height, width = mc_mask.shape
    if c_mask is not None:
        if mc_mask is not None and c_mask.shape != mc_mask.shape:
            raise ValueError("--mc and --c images differ in size")
        height, width = c_mask.shape

    prior = None
    if mc_mask is not None or c_mask is not None:
        if args.prior is None:
            raise ValueError("--prior is required when --mc or --c is given")
        prior = _load_prior_checked(args.prior, template.vertices.shape[0])

    ref = dsr_io.load_params(args.ref) if args.ref else None
    targets = FitTargets(
        width=width, height=height,
        joints2d=keypoints.get("joints2d"), joints3d=keypoints.get("joints3d"),
        theta_ref=ref.theta.numpy() if ref else None,
        beta_ref=ref.beta.numpy() if ref else None,
        mc_mask=mc_mask, c_mask=c_mask)
    warmup = args.warmup
    if warmup is not None:
        warmup = min(warmup, args.iters)
    schedule = FitSchedule(
        iterations=args.iters, warmup=warmup, step_size=args.step_size,
        optimizer=args.optimizer, mc_metric=args.mc_metric,
        weights=LossWeights(w_2d=args.w_2d, w_3d=args.w_3d, w_theta=args.w_theta,
                            w_mc=args.w_mc, w_c=args.w_c),
        optimize_theta=not args.freeze_theta,
        optimize_beta=not args.freeze_beta,
        optimize_camera=not args.freeze_camera,
        raster=RasterConfig(sigma=args.sigma, gamma=args.gamma))

    gt_vertices = None
    if args.gt:
        gt_vertices = forward(template, dsr_io.load_params(args.gt)).vertices
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_dir = args.render_dir
    if args.render_every and render_dir is None:
        render_dir = out.parent / "renders"

    result = fit(template, params0, targets, prior=prior, schedule=schedule,
                 gt_vertices=gt_vertices, render_every=args.render_every,
                 render_dir=render_dir)

    trace_path = Path(args.trace) if args.trace else Path(f"{out}.trace.jsonl")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_path.write_text(result.trace_jsonl(), encoding="utf-8")
    p = result.params
    _json_dump(out, {
        "diverged": result.diverged,
        "message": result.message,
        "metrics": result.metrics,
        "params": {
            "beta": [float(x) for x in p.beta],
            "camera": {"s": float(p.camera[0]), "tx": float(p.camera[1]),
                       "ty": float(p.camera[2])},
            "theta": [float(x) for x in p.theta],
        },
    })
    if result.diverged:
        print(f"fit diverged after {len(result.trace)} iterations: {result.message}",
              file=sys.stderr)
        return EXIT_NUMERIC
    last = result.trace[-1]["total"] if result.trace else float("nan")
    print(f"fit finished: {len(result.trace)} iterations, final total {last!r} "
          f"-> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, single=args.single, scale=args.scale)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_make_fixtures(args) -> int:
    paths = make_fixture_set(args.out, num_scans=args.scans, seed=args.seed,
                             width=args.size, height=args.size)
    print(f"fixture set in {args.out}: template={paths['template'].name}, "
          f"scans in {paths['scans'].name}/, sample in {paths['sample'].name}/")
    return EXIT_OK


def _dispatch(argv) -> int:
    # abbreviation must stay off here: this parser only knows --config, so
    # with prefix matching on it would swallow fit's --c argument
    boot = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    boot.add_argument("--config", default=None)
    pre, _ = boot.parse_known_args(argv)
    top, parsers = _build_parser()
    if pre.config:
        _apply_config(parsers, _load_config(pre.config))
    args = top.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    os.environ["OMP_NUM_THREADS"] = str(max(1, args.threads))
    return args.func(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return _dispatch(argv)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
