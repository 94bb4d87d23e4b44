"""Command line interface.

Subcommands::

    lumifield gen-dataset  synthesize a dataset from a toy field or a grid
    lumifield fit          fit a grid to a dataset
    lumifield extract      distill a grid into a plenoctree
    lumifield render       render a scene, or an octree from dataset cameras
    lumifield eval         PSNR, SSIM and RMSE of predictions against a dataset
    lumifield bench        traversal counters and throughput of an octree

Failures print one line ``lumifield: error: <ErrorClass>: <message>`` to
stderr and exit with status 1.
"""

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time

import numpy as np
from observable import Observable

from lumifield import __version__
from lumifield import dataio
from lumifield import field
from lumifield import geometry
from lumifield import parallel
from lumifield import plenoctree
from lumifield import raymarch
from lumifield import renderer
from lumifield import settings
from lumifield import shmath
from lumifield import toys
from lumifield import training
from lumifield.errors import ConfigError, LumifieldError

logger = logging.getLogger(__name__)


def _write_log(path, header, rows):
    if not path:
        return
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    logger.debug("Wrote %d log rows to %s", len(rows), path)


def _flags(args, names):
    return {name: getattr(args, name, None) for name in names}


def _activation(name, max_radiance, eps=1e-6):
    try:
        return shmath.make_activation(name, max_radiance, eps)
    except ValueError as error:
        raise ConfigError(str(error))


def _check_model(model):
    if model not in raymarch.TRANSMITTANCE_MODELS:
        raise ConfigError("unknown transmittance model {!r}".format(model))
    return model


def _load_source(name, max_radiance, l_max, act):
    """A saved grid, or a toy encoded with the activation used to render it."""
    if os.path.isfile(name):
        return field.load_grid(name)
    try:
        return toys.make_toy(name, max_radiance, l_max, act)
    except ValueError as error:
        raise ConfigError(str(error))


def gen_dataset(args, config):
    """Render ground truth views of a toy field or a saved grid."""
    opts = settings.resolve("gen_dataset", _flags(args, (
        "field", "n_views", "n_val", "n_test", "radius", "res", "width",
        "max_radiance", "lmax", "samples", "model", "activation", "camera",
        "focal", "sensor")), config)
    if os.path.exists(args.out) and not args.force:
        raise ConfigError("output directory {} exists, use --force".format(
            args.out))
    if opts.n_views < 1 or opts.n_val < 0 or opts.n_test < 0:
        raise ConfigError("need n_views >= 1 and non negative n_val, n_test")
    model = _check_model(opts.model)
    act = _activation(opts.activation, opts.max_radiance)
    source = _load_source(opts.field, opts.max_radiance, opts.lmax, act)
    bbox = np.reshape(source.bbox, (2, 3))
    half_diagonal = 0.5 * np.linalg.norm(bbox[1] - bbox[0])
    if opts.radius <= half_diagonal:
        raise ConfigError("camera radius must exceed the bbox half diagonal "
                          "{:.4g}".format(half_diagonal))
    width = opts.width or 2.0 * half_diagonal
    if opts.camera == dataio.ORTHOGRAPHIC:
        intrinsics = {"width": width}
    else:
        intrinsics = {"focal": opts.focal, "sensor": opts.sensor}

    counts = [(dataio.TRAIN, opts.n_views), (dataio.VAL, opts.n_val),
              (dataio.TEST, opts.n_test)]
    positions = dataio.halton_sphere_cameras(sum(n for _, n in counts),
                                             opts.radius)
    center = bbox.mean(axis=0)
    os.makedirs(args.out, exist_ok=True)
    splits = {}
    rows = []
    cursor = 0
    for split, count in counts:
        splits[split] = []
        for index in range(count):
            started = time.perf_counter()
            try:
                camera = dataio.CameraPose.looking_at(
                    opts.camera, center + positions[cursor],
                    (opts.res, opts.res), center, **intrinsics)
            except ValueError as error:
                raise ConfigError(str(error))
            cursor += 1
            rgb, alpha, depth = dataio.render_view(source, camera, act, model,
                                                   opts.samples, args.threads)
            name = dataio.view_name(split, index)
            dataio.write_view(args.out, dataio.View(name, split, camera, rgb,
                                                    alpha, depth, None))
            splits[split].append(name)
            rows.append((name, "{:.4f}".format(time.perf_counter() - started)))
            logger.info("Rendered view %s", name)

    manifest = dataio.DatasetManifest(
        args.out, splits, opts.max_radiance, bbox,
        opts.radius - half_diagonal, opts.radius + half_diagonal,
        dict(kind=opts.camera, resolution=[opts.res, opts.res], **intrinsics))
    dataio.write_manifest(manifest)
    _write_log(args.log, ("view", "seconds"), rows)
    print("wrote {} views to {}".format(len(rows), args.out))
    return 0


def fit(args, config):
    """Fit a grid to the training split of a dataset."""
    opts = settings.resolve("fit", _flags(args, (
        "res", "lmax", "iters", "seed", "batch_rays", "n_coarse", "n_fine",
        "lr_start", "lr_end", "eps", "loss", "beta", "alpha_weight",
        "denominator_gradient", "model", "activation", "interpolation",
        "init_sigma", "log_every")), config)
    manifest = dataio.load_manifest(args.dataset)
    loss_cfg = training.LossConfig(
        lam=manifest.max_radiance, eps=opts.eps,
        term_weights=(1.0, 1.0, opts.alpha_weight), color_loss=opts.loss,
        beta=opts.beta, denominator_gradient=opts.denominator_gradient)
    train_cfg = training.TrainConfig(
        batch_rays=opts.batch_rays, n_coarse=opts.n_coarse,
        n_fine=opts.n_fine, lr_start=opts.lr_start, lr_end=opts.lr_end,
        iterations=opts.iters, seed=opts.seed, model=opts.model,
        activation=opts.activation, max_radiance=manifest.max_radiance,
        logsig_eps=opts.logsig_eps, log_every=opts.log_every)
    train_cfg.make_activation()

    optimizer = training.Adam()
    if args.resume:
        grid, optimizer = training.load_checkpoint(args.resume)
        grid.interpolation = opts.interpolation
    else:
        try:
            grid = field.init_grid(opts.res, manifest.bbox, opts.lmax,
                                   field.Constant(opts.init_sigma),
                                   interpolation=opts.interpolation)
        except ValueError as error:
            raise ConfigError(str(error))
    supplier = training.RaySupplier.from_dataset(args.dataset, dataio.TRAIN)

    events = Observable()
    history = []
    events.on("iteration", history.append)
    try:
        training.fit(supplier, grid, loss_cfg, train_cfg, events,
                     args.threads, optimizer,
                     snapshot_path=args.out + ".diverged",
                     progress=args.progress)
    finally:
        if args.log:
            training.write_history(args.log, history)
    field.save_grid(args.out, grid)
    if args.checkpoint:
        training.save_checkpoint(args.checkpoint, grid, optimizer)
    if history:
        last = history[-1]
        print("iteration {} total {:.6g}".format(last.iteration, last.total))
    print("wrote {}".format(args.out))
    return 0


def extract(args, config):
    """Distill a saved grid into a plenoctree."""
    opts = settings.resolve("extract", _flags(args, (
        "depth", "prune_sigma", "refine_samples", "seed")), config)
    grid = field.load_grid(args.grid, interpolation=field.TRILINEAR)
    cfg = plenoctree.ExtractionConfig(opts.prune_sigma, opts.refine_samples,
                                      opts.depth, opts.seed)
    tree = plenoctree.extract(grid, cfg, args.threads, args.progress)
    plenoctree.save(tree, args.out)
    print("wrote {} with {} leaves ({} SH bytes)".format(
        args.out, tree.n_leaves, tree.sh_nbytes))
    return 0


def render(args, config):
    """Render a scene file, or an octree from the cameras of a dataset."""
    if bool(args.scene) == bool(args.octree):
        raise ConfigError("render needs either --scene or --octree")
    flags = _flags(args, (
        "spp", "seed", "max_transparency_bounces", "sigma_min", "alpha_max",
        "model", "activation", "split"))
    if args.scene:
        scene, scene_cfg = renderer.load_scene(args.scene)
        opts = settings.resolve("render", flags, config,
                                dataclasses.asdict(scene_cfg))
        cfg = dataclasses.replace(
            scene_cfg, spp=opts.spp, seed=opts.seed,
            max_transparency_bounces=opts.max_transparency_bounces)
        rows = []
        image, _ = renderer.render(scene, cfg, args.threads, args.progress,
                                   rows)
        dataio.write_hdr(args.out, image)
        if args.preview:
            dataio.write_preview(args.preview, image)
        _write_log(args.log, ("tile", "seconds"),
                   [(i, "{:.4f}".format(s)) for i, s in rows])
        print("wrote {}".format(args.out))
        return 0

    opts = settings.resolve("render", flags, config)
    if not args.dataset:
        raise ConfigError("--octree rendering needs --dataset")
    manifest = dataio.load_manifest(args.dataset)
    tree = plenoctree.load(args.octree)
    act = _activation(opts.activation, args.max_radiance
                      or manifest.max_radiance)
    model = _check_model(opts.model)
    if opts.split not in dataio.SPLIT_PREFIXES:
        raise ConfigError("unknown split {!r}".format(opts.split))
    views = dataio.load_split(args.dataset, opts.split, manifest)
    rows = []
    for view in views:
        started = time.perf_counter()
        rgb, alpha, depth = renderer.render_luminaire(
            tree, view.camera, act, model, opts.sigma_min, opts.alpha_max,
            args.threads)
        dataio.write_view(args.out, dataio.View(view.name, view.split,
                                                view.camera, rgb, alpha,
                                                depth, None))
        rows.append((view.name, "{:.4f}".format(time.perf_counter()
                                                - started)))
    out_manifest = dataio.DatasetManifest(
        args.out, {opts.split: [v.name for v in views]},
        manifest.max_radiance, manifest.bbox, manifest.near, manifest.far,
        manifest.camera)
    dataio.write_manifest(out_manifest)
    _write_log(args.log, ("view", "seconds"), rows)
    print("wrote {} views to {}".format(len(views), args.out))
    return 0


def evaluate(args, config):  # pylint: disable=unused-argument
    """Score predicted images against the ground truth of a dataset split."""
    manifest = dataio.load_manifest(args.gt_dir)
    split = args.split or dataio.TEST
    if split not in dataio.SPLIT_PREFIXES:
        raise ConfigError("unknown split {!r}".format(split))
    peak = args.peak or manifest.max_radiance
    rows = []
    for name in manifest.splits[split]:
        scores = []
        for folder in ("rgb", "alpha"):
            truth = dataio.read_hdr(os.path.join(args.gt_dir, folder,
                                                 name + ".pfm"))
            predicted = dataio.read_hdr(os.path.join(args.pred_dir, folder,
                                                     name + ".pfm"))
            scores.append((truth, predicted))
        (rgb_gt, rgb_pred), (alpha_gt, alpha_pred) = scores
        rows.append((name, dataio.psnr(rgb_pred, rgb_gt, peak),
                     dataio.ssim(rgb_pred, rgb_gt, peak),
                     renderer.rmse(rgb_pred, rgb_gt),
                     renderer.rmse(alpha_pred, alpha_gt)))
    if not rows:
        raise ConfigError("split {!r} of {} has no views".format(split,
                                                                  args.gt_dir))
    header = ("view", "psnr", "ssim", "rmse", "alpha_rmse")
    means = ("mean",) + tuple(float(np.mean([row[i] for row in rows]))
                              for i in range(1, 5))
    table = rows + [means]
    print("{:<10} {:>10} {:>8} {:>10} {:>10}".format(*header))
    for row in table:
        print("{:<10} {:>10.4f} {:>8.4f} {:>10.6f} {:>10.6f}".format(*row))
    _write_log(args.log, header, [(row[0],) + tuple("{:.9g}".format(v)
                                                     for v in row[1:])
                                  for row in table])
    return 0


def bench_rays(tree, count, seed):
    """Random rays from a sphere around the tree toward points inside it."""
    rng = np.random.default_rng(seed)
    center = tree.bbox.mean(axis=0)
    radius = tree.extent
    starts = center + radius * geometry.normalize(rng.normal(size=(count, 3)))
    targets = tree.bbox[0] + rng.random((count, 3)) * tree.extent
    rays = raymarch.Rays(starts, geometry.normalize(targets - starts))
    return raymarch.clip_to_proxy(rays, geometry.Box(*tree.bbox))


def bench(args, config):
    """Leaves visited and rays per second with and without thresholds."""
    opts = settings.resolve("bench", _flags(args, (
        "rays", "seed", "sigma_min", "alpha_max", "model", "activation",
        "max_radiance")), config)
    tree = plenoctree.load(args.octree)
    act = _activation(opts.activation, opts.max_radiance)
    model = _check_model(opts.model)
    rays = bench_rays(tree, opts.rays, opts.seed)
    slices = parallel.chunk_slices(len(rays), 4096)
    rows = []
    results = {}
    for mode, sigma_min, alpha_max in (("full", 0.0, 1.0),
                                       ("thresholded", opts.sigma_min,
                                        opts.alpha_max)):
        started = time.perf_counter()
        parts = parallel.ordered_map(
            lambda part, s=sigma_min, a=alpha_max: plenoctree.traverse(
                tree, rays[part], act, model, s, a), slices, args.threads)
        seconds = max(time.perf_counter() - started, 1e-12)
        visited = np.concatenate([p.leaves_visited for p in parts])
        results[mode] = np.concatenate([p.radiance for p in parts])
        rows.append((mode, len(rays), float(visited.mean()),
                     len(rays) / seconds))
    reference = results["full"]
    lit = np.linalg.norm(reference, axis=-1) > 1e-6
    deviation = 0.0
    if np.any(lit):
        deviation = float(np.max(
            np.linalg.norm(results["thresholded"][lit] - reference[lit],
                           axis=-1) / np.linalg.norm(reference[lit], axis=-1)))
    print("{:<12} {:>8} {:>12} {:>12}".format("mode", "rays", "mean_leaves",
                                              "rays_per_s"))
    for row in rows:
        print("{:<12} {:>8d} {:>12.3f} {:>12.1f}".format(*row))
    print("leaf lattice {} per axis, max relative radiance change {:.4%}"
          .format(tree.lattice, deviation))
    _write_log(args.log, ("mode", "rays", "mean_leaves", "rays_per_sec"), rows)
    return 0


COMMANDS = {
    "gen-dataset": gen_dataset,
    "fit": fit,
    "extract": extract,
    "render": render,
    "eval": evaluate,
    "bench": bench,
}


def _bool_flag(value):
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError("expected a boolean, got {!r}".format(
        value))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int,
                        help="worker threads (default: $LUMIFIELD_THREADS or "
                             "the number of cores)")
    common.add_argument("--log", help="write CSV progress rows to this file")
    common.add_argument("--config", help="TOML file with per command tables")
    common.add_argument("--progress", action="store_true",
                        help="show progress bars")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")

    parser = argparse.ArgumentParser(
        prog="lumifield",
        description="Fit, distill and render volumetric luminaire fields.")
    parser.add_argument("--version", action="version",
                        version="%(prog)s " + __version__)
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    sub = commands.add_parser("gen-dataset", parents=[common],
                              help="synthesize a dataset")
    sub.add_argument("--field", help="toy name ({}) or grid file".format(
        ", ".join(toys.TOYS)))
    sub.add_argument("--n-views", dest="n_views", type=int,
                     help="training views")
    sub.add_argument("--n-val", dest="n_val", type=int)
    sub.add_argument("--n-test", dest="n_test", type=int)
    sub.add_argument("--radius", type=float, help="camera distance")
    sub.add_argument("--res", type=int, help="image width and height")
    sub.add_argument("--width", type=float,
                     help="orthographic film width (default: bbox diagonal)")
    sub.add_argument("--max-radiance", dest="max_radiance", type=float)
    sub.add_argument("--lmax", type=int)
    sub.add_argument("--samples", type=int, help="march samples per ray")
    sub.add_argument("--model", choices=raymarch.TRANSMITTANCE_MODELS)
    sub.add_argument("--activation")
    sub.add_argument("--camera", choices=dataio.CAMERA_KINDS)
    sub.add_argument("--focal", type=float)
    sub.add_argument("--sensor", type=float)
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")

    sub = commands.add_parser("fit", parents=[common], help="fit a grid")
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--res", type=int, help="grid resolution per axis")
    sub.add_argument("--lmax", type=int)
    sub.add_argument("--iters", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--batch-rays", dest="batch_rays", type=int)
    sub.add_argument("--n-coarse", dest="n_coarse", type=int)
    sub.add_argument("--n-fine", dest="n_fine", type=int)
    sub.add_argument("--lr-start", dest="lr_start", type=float)
    sub.add_argument("--lr-end", dest="lr_end", type=float)
    sub.add_argument("--eps", type=float)
    sub.add_argument("--loss", choices=training.COLOR_LOSSES)
    sub.add_argument("--beta", type=float)
    sub.add_argument("--alpha-weight", dest="alpha_weight", type=float)
    sub.add_argument("--denominator-gradient", dest="denominator_gradient",
                     type=_bool_flag)
    sub.add_argument("--model", choices=raymarch.TRANSMITTANCE_MODELS)
    sub.add_argument("--activation")
    sub.add_argument("--interpolation", choices=field.INTERPOLATIONS)
    sub.add_argument("--init-sigma", dest="init_sigma", type=float)
    sub.add_argument("--log-every", dest="log_every", type=int)
    sub.add_argument("--resume", help="checkpoint to continue from")
    sub.add_argument("--checkpoint", help="also write grid and optimizer "
                                          "state here")
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("extract", parents=[common],
                              help="distill a grid into an octree")
    sub.add_argument("--grid", required=True)
    sub.add_argument("--depth", type=int)
    sub.add_argument("--prune-sigma", dest="prune_sigma", type=float)
    sub.add_argument("--refine-samples", dest="refine_samples", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("render", parents=[common],
                              help="render a scene or an octree")
    sub.add_argument("--scene")
    sub.add_argument("--octree")
    sub.add_argument("--dataset")
    sub.add_argument("--split", choices=tuple(dataio.SPLIT_PREFIXES))
    sub.add_argument("--spp", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--max-transparency-bounces",
                     dest="max_transparency_bounces", type=int)
    sub.add_argument("--sigma-min", dest="sigma_min", type=float)
    sub.add_argument("--alpha-max", dest="alpha_max", type=float)
    sub.add_argument("--model", choices=raymarch.TRANSMITTANCE_MODELS)
    sub.add_argument("--activation")
    sub.add_argument("--max-radiance", dest="max_radiance", type=float)
    sub.add_argument("--preview", help="also write a tonemapped PNG")
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("eval", parents=[common],
                              help="score predictions against a dataset")
    sub.add_argument("--pred-dir", dest="pred_dir", required=True)
    sub.add_argument("--gt-dir", dest="gt_dir", required=True)
    sub.add_argument("--split", choices=tuple(dataio.SPLIT_PREFIXES))
    sub.add_argument("--peak", type=float,
                     help="PSNR peak (default: dataset maximum radiance)")

    sub = commands.add_parser("bench", parents=[common],
                              help="octree traversal counters")
    sub.add_argument("--octree", required=True)
    sub.add_argument("--rays", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--sigma-min", dest="sigma_min", type=float)
    sub.add_argument("--alpha-max", dest="alpha_max", type=float)
    sub.add_argument("--model", choices=raymarch.TRANSMITTANCE_MODELS)
    sub.add_argument("--activation")
    sub.add_argument("--max-radiance", dest="max_radiance", type=float)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = settings.read_config(args.config) if args.config else None
        return COMMANDS[args.command](args, config)
    except (LumifieldError, OSError, ValueError) as error:
        logger.debug("Command %s failed", args.command, exc_info=True)
        sys.stderr.write("lumifield: error: {}: {}\n".format(
            type(error).__name__, error))
        return 1


if __name__ == "__main__":
    sys.exit(main())
