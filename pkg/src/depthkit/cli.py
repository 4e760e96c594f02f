"""Command-line front end.

Subcommands: ``eval`` (benchmark a prediction set against a manifest),
``loss`` (loss breakdown for one prediction), ``gradcheck`` (finite-
difference verification), ``synth`` (generate synthetic scenes), ``bench``
(patch-kernel throughput).

Exit codes: 0 success, 1 usage error, 2 partial data failure (some records
could not be evaluated), 3 numeric failure (failed gradient check).
Every command is deterministic given ``--seed``; ``--jobs`` parallelism
never changes any numeric output. The DEPTHKIT_JOBS environment variable
supplies the default worker count when ``--jobs`` is not given.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import io as dio
from .augment import GeomAugmentation, compose_warp, warp_depth
from .errors import DegenerateInputError, DepthkitError, UsageError
from .geometry import AngleMap, DepthMap, backproject, rays_to_angles, unproject_rays
from .gradcheck import run_gradient_checks
from .losses import (
    LossValue,
    LossWeights,
    consistency_loss,
    eg_ssi_loss,
    lambda_mse,
    select_patches,
    total_loss,
    uncertainty_l1,
)
from .metrics import (
    AlignmentMode,
    _fmt,
    aggregate,
    ause,
    boundary_f1,
    depth_metrics,
    fscore_auc,
    ray_auc,
    spearman,
)
from .patchkernel import bench_kernel
from .synth import Plane, SceneSpec, Sphere, render

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_NUMERIC = 3

DENSE_GT_FRACTION = 0.99
JOBS_ENV_VAR = "DEPTHKIT_JOBS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_jobs() -> int:
    env = os.environ.get(JOBS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


# ---------------------------------------------------------------------------
# eval


def _evaluate_record(rec: dio.ManifestRecord, manifest: dio.DatasetManifest,
                     align: AlignmentMode) -> dict[str, float]:
    pred = dio.read_depth(rec.pred_depth, scale=manifest.png_scale)
    gt = dio.read_depth(rec.gt_depth, scale=manifest.png_scale)
    camera = dio.read_camera(rec.camera)
    out: dict[str, float] = {}

    dm = depth_metrics(pred, gt, align)
    out.update(dm.as_dict())

    gt_angles = rays_to_angles(unproject_rays(camera))
    gt_cloud = backproject(gt_angles, gt)
    pred_camera = dio.read_camera(rec.pred_camera) if rec.pred_camera else None
    pred_angles = rays_to_angles(unproject_rays(pred_camera)) if pred_camera else gt_angles
    pred_cloud = backproject(pred_angles, pred)
    out["fscore_auc"] = fscore_auc(pred_cloud, gt_cloud, manifest.max_depth)

    if pred_camera is not None:
        out["ray_auc"] = ray_auc(pred_angles, gt_angles)

    if rec.sigma is not None:
        sig = dio.read_depth(rec.sigma, scale=manifest.png_scale)
        pred_sig = DepthMap(pred.values, pred.mask & sig.mask)
        try:
            a, na, _ = ause(pred_sig, gt, np.nan_to_num(sig.values))
            out["ause"] = a
            out["nause"] = na
        except DegenerateInputError:
            out["ause"] = float("nan")
            out["nause"] = float("nan")
        valid = pred_sig.mask & gt.mask
        try:
            err = np.abs(np.log(pred.values[valid]) - np.log(gt.values[valid]))
            out["spearman"] = spearman(sig.values[valid], err)
        except DegenerateInputError:
            out["spearman"] = float("nan")

    if float(gt.mask.mean()) >= DENSE_GT_FRACTION:
        try:
            out["boundary_f1"] = boundary_f1(pred, gt)
        except DegenerateInputError:
            out["boundary_f1"] = float("nan")
    return out


def _per_image_csv(records, results, fields, delimiter=","):
    lines = [delimiter.join(["index", "pred"] + fields)]
    for i, (rec, res) in enumerate(zip(records, results)):
        cells = [str(i), rec.pred_depth.name]
        cells += [_fmt(res.get(f, float("nan"))) if res else "failed" for f in fields]
        lines.append(delimiter.join(cells))
    return "\n".join(lines) + "\n"


def _per_image_kv(records, results, fields):
    blocks = []
    for i, (rec, res) in enumerate(zip(records, results)):
        lines = [f"index {i}", f"pred {rec.pred_depth.name}"]
        if res is None:
            lines.append("status failed")
        else:
            lines += [f"{f} {_fmt(res.get(f, float('nan')))}" for f in fields]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def _per_image_txt(records, results, fields):
    return _per_image_csv(records, results, fields, delimiter="\t")


def cmd_eval(args) -> int:
    manifest = dio.read_manifest(args.manifest)
    align = AlignmentMode.parse(args.align)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or _default_jobs()

    results: list[dict[str, float] | None] = [None] * len(manifest.records)
    failures: list[str] = []

    def work(i: int):
        try:
            results[i] = _evaluate_record(manifest.records[i], manifest, align)
        except (DepthkitError, OSError) as exc:
            failures.append(f"record {i} ({manifest.records[i].pred_depth}): {exc}")

    if jobs == 1:
        for i in range(len(manifest.records)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(work, range(len(manifest.records))))
    failures.sort()

    evaluated = [r for r in results if r is not None]
    if not evaluated:
        print("no record could be evaluated", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_PARTIAL

    report = aggregate(evaluated)
    ext = {"txt": "txt", "csv": "csv", "kv": "kv"}[args.format]
    per_image = {
        "txt": _per_image_txt, "csv": _per_image_csv, "kv": _per_image_kv,
    }[args.format](manifest.records, results, report.fields)
    agg_text = {
        "txt": report.to_text, "csv": report.to_csv, "kv": report.to_kv,
    }[args.format]()
    (out_dir / f"per_image.{ext}").write_text(per_image)
    (out_dir / f"aggregate.{ext}").write_text(agg_text)
    sys.stdout.write(agg_text)

    if failures:
        print(f"{len(failures)} record(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# loss


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError("config must be a mapping")
    return cfg


def _weights_from_config(cfg: dict) -> LossWeights:
    w = cfg.get("weights", {})
    lam = tuple(w.get("lambda", LossWeights().lam))
    return LossWeights(
        lam=lam,
        alpha=float(w.get("alpha", LossWeights().alpha)),
        beta=float(w.get("beta", LossWeights().beta)),
        gamma=float(w.get("gamma", LossWeights().gamma)),
    )


def _shift_augmentation(rng: np.random.Generator, h: int, w: int) -> GeomAugmentation:
    dx, dy = (int(v) for v in rng.integers(-8, 9, 2))
    return GeomAugmentation(1.0, 0.0, 0.0, float(dx), float(dy), w, h)


def cmd_loss(args) -> int:
    cfg = _load_config(args.config)
    weights = _weights_from_config(cfg)
    pcfg = cfg.get("patches", {})
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))

    pred = dio.read_depth(args.pred)
    gt = dio.read_depth(args.gt)
    from PIL import Image

    rgb = np.asarray(Image.open(args.rgb).convert("RGB"))
    if gt.values.shape != pred.values.shape or rgb.shape[:2] != pred.values.shape:
        raise UsageError(
            f"input shapes disagree: pred {pred.values.shape}, gt {gt.values.shape}, "
            f"rgb {rgb.shape[:2]}"
        )
    mask = pred.mask & gt.mask
    want_grad = args.grad

    if args.pred_camera and args.camera:
        pa = rays_to_angles(unproject_rays(dio.read_camera(args.pred_camera)))
        ga = rays_to_angles(unproject_rays(dio.read_camera(args.camera)))
    elif args.camera:
        ga = rays_to_angles(unproject_rays(dio.read_camera(args.camera)))
        pa = ga  # no predicted camera: angular error is zero by convention
    else:
        zeros = np.zeros(pred.values.shape)
        pa = ga = AngleMap(zeros, zeros)
    if pa.theta.shape != pred.values.shape:
        raise UsageError(
            f"camera grid {pa.theta.shape} does not match depth {pred.values.shape}"
        )

    pred_out = np.stack([pa.theta, pa.phi, np.where(mask, pred.log_values(), 0.0)], axis=-1)
    gt_out = np.stack([ga.theta, ga.phi, np.where(mask, gt.log_values(), 0.0)], axis=-1)

    components: dict[str, LossValue] = {}
    notes: dict[str, str] = {}

    def compute(name, fn):
        try:
            components[name] = fn()
        except DegenerateInputError as exc:
            notes[name] = str(exc)

    compute("lambda_mse", lambda: lambda_mse(pred_out, gt_out, mask, weights.lam, want_grad))

    rng = np.random.default_rng(seed)
    a1 = _shift_augmentation(rng, pred.height, pred.width)
    a2 = _shift_augmentation(rng, pred.height, pred.width)
    z1 = warp_depth(a1, pred, "bilinear")
    z2 = warp_depth(a2, gt, "nearest")
    compute("consistency", lambda: consistency_loss(z1, z2, compose_warp(a1, a2), want_grad))

    with np.errstate(divide="ignore", invalid="ignore"):
        pred_inv = np.where(pred.mask, 1.0 / pred.values, 0.0)
        gt_inv = np.where(gt.mask, 1.0 / gt.values, 0.0)
    patches = select_patches(
        rgb,
        seed=seed,
        count=int(pcfg.get("count", 64)),
        min_dim_frac=(float(pcfg.get("min_frac", 0.04)), float(pcfg.get("max_frac", 0.08))),
        quantile=float(pcfg.get("quantile", 0.95)),
    )
    compute("eg_ssi", lambda: eg_ssi_loss(pred_inv, gt_inv, mask, patches, want_grad))

    if args.sigma:
        sigma = dio.read_depth(args.sigma).values
        sigma = np.nan_to_num(sigma)
    else:
        sigma = np.zeros(pred.values.shape)
    zl_pred = np.where(mask, pred.log_values(), 0.0)
    zl_gt = np.where(mask, gt.log_values(), 0.0)
    compute("uncertainty", lambda: uncertainty_l1(sigma, zl_pred, zl_gt, mask, want_grad))

    total = total_loss(components, weights)

    print(f"lambda ({_fmt(weights.lam[0])}, {_fmt(weights.lam[1])}, {_fmt(weights.lam[2])})")
    print(f"alpha_beta_gamma ({_fmt(weights.alpha)}, {_fmt(weights.beta)}, {_fmt(weights.gamma)})")
    print(f"seed {seed}")
    for name in ("lambda_mse", "consistency", "eg_ssi", "uncertainty"):
        if name in components:
            print(f"{name} {_fmt(components[name].value)}")
        else:
            print(f"{name} nan (degenerate: {notes[name]})")
    print(f"total {_fmt(total.value)}")
    if want_grad and total.grads:
        for key in sorted(total.grads):
            print(f"grad_max_abs {key} {_fmt(float(np.abs(total.grads[key]).max()))}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / synth / bench


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=args.seed, tolerance=args.tol, instances=args.instances)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.loss}: max_rel_error={r.max_rel_error:.3e} "
              f"tol={r.tolerance:g} instances={r.instances} {status}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def _random_scene(rng: np.random.Generator, width: int, height: int) -> SceneSpec:
    from .geometry import Intrinsics

    fx = width * rng.uniform(0.8, 1.2)
    camera = Intrinsics(
        fx=fx, fy=fx * rng.uniform(0.95, 1.05),
        cx=width / 2 + rng.uniform(-2, 2), cy=height / 2 + rng.uniform(-2, 2),
        width=width, height=height,
    )
    nx, ny = rng.uniform(-0.2, 0.2, 2)
    background = Plane(normal=(float(nx), float(ny), 1.0), offset=float(rng.uniform(6.0, 10.0)))
    # sphere well in front of the plane so depth edges clear every ratio level
    dirs = unproject_rays(camera).dirs
    center_ray = dirs[height // 2, width // 2]
    dist = rng.uniform(2.5, 3.5)
    center = center_ray * dist + np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.0])
    sphere = Sphere(center=tuple(center), radius=float(rng.uniform(0.6, 1.1)))
    return SceneSpec(primitives=(background, sphere), camera=camera, texture="checker")


def cmd_synth(args) -> int:
    from PIL import Image

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    records = []
    max_depth = 0.0
    for i in range(args.scenes):
        spec = _random_scene(rng, args.width, args.height)
        res = render(spec)
        stem = f"scene_{i:04d}"
        Image.fromarray(res.rgb).save(out_dir / f"{stem}_rgb.png")
        dio.write_depth(res.depth, out_dir / f"{stem}_depth.raw")
        dio.write_camera(spec.camera, out_dir / f"{stem}_camera.txt")
        max_depth = max(max_depth, float(res.depth.values[res.depth.mask].max()))
        records.append(dio.ManifestRecord(
            rgb=out_dir / f"{stem}_rgb.png",
            pred_depth=out_dir / f"{stem}_depth.raw",
            gt_depth=out_dir / f"{stem}_depth.raw",
            camera=out_dir / f"{stem}_camera.txt",
            sigma=None,
            pred_camera=out_dir / f"{stem}_camera.txt",
        ))
    manifest = dio.DatasetManifest(
        records=records, name=f"synth-{args.seed}", max_depth=max_depth, directory=out_dir
    )
    dio.write_manifest(manifest, out_dir / "manifest.tsv")
    print(f"wrote {args.scenes} scenes to {out_dir} (max depth {max_depth:.3f} m)")
    return EXIT_OK


def cmd_bench(args) -> int:
    report = bench_kernel(
        sizes=args.sizes, counts=args.counts, threads=args.threads,
        grid_shape=(args.grid, args.grid), seed=args.seed,
    )
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a prediction manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--align", choices=["none", "median", "ssi"], default="none")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["txt", "csv", "kv"], default="txt")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", help="loss breakdown for one prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--sigma", default=None)
    p.add_argument("--camera", default=None)
    p.add_argument("--pred-camera", dest="pred_camera", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grad", action="store_true")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="patch-kernel throughput")
    p.add_argument("--sizes", type=int, nargs="+", default=[64])
    p.add_argument("--counts", type=int, nargs="+", default=[1024])
    p.add_argument("--threads", type=int, nargs="+", default=[1, 2, 8])
    p.add_argument("--grid", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DepthkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
