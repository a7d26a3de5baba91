"""Command-line entry point: ``heritage-recon synth|train|mesh|render|eval``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "HERITAGE_RECON_THREADS"

log = logging.getLogger("heritage_recon")


class UsageError(Exception):
    """Invalid arguments or configuration (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- shared helpers -------------------------------------------------------------------

def _versions() -> dict:
    import scipy

    return {"heritage_recon": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, argv: list[str], config=None, extra: dict | None = None) -> Path:
    """Record what produced the artifacts in ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": argv, "versions": _versions(),
           "threads": _thread_count(None), "created_unix": int(time.time())}
    if config is not None:
        doc["config_sha256"] = config.digest()
        doc["config"] = config.to_dict()
    doc.update(extra or {})
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def _thread_count(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def _on_off(v: str) -> bool:
    if v.lower() in ("on", "true", "1", "yes"):
        return True
    if v.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def _float_list(v: str) -> list[float]:
    try:
        return [float(x) for x in v.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {v!r}") from None


def _save_png(path: Path, img: np.ndarray) -> None:
    from .ingest.images import save_png

    save_png(path, np.clip(img, 0.0, 1.0))


# -- synth ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import SCENES, DatasetSpec, make_dataset

    if args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {sorted(SCENES)}")
    try:
        spec = DatasetSpec(n_views=args.views, gray_fraction=args.gray, image_size=args.size, n_val=args.val,
                           n_dense=args.dense_points, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    manifest = make_dataset(SCENES[args.scene](), spec.n_views, spec.gray_fraction, out, spec)
    write_manifest(out, "synth", args.argv, extra={"scene": args.scene})
    n_gray = sum(v["gray"] for v in manifest["synthetic"]["views"].values())
    print(f"wrote {out}: {spec.n_views} training views ({n_gray} gray), {spec.n_val} validation views")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

def build_config(args):
    from .config import RunConfig, override

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    flags = {"scene": args.scene, "out": args.out, "train.iterations": args.iterations,
             "train.batch_rays": args.batch_rays, "train.seed": args.seed, "loss.geo": args.geo,
             "loss.color_loss": args.color_loss, "loss.lam": args.lam,
             "train.image_long_side": args.image_long_side}
    for key, value in flags.items():
        if value is not None:
            cfg = override(cfg, key, value)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = override(cfg, key, value)
    if not cfg.scene:
        raise UsageError("no scene bundle given (config 'scene' or --scene)")
    return cfg


def cmd_train(args) -> int:
    from .ingest.scene import load_bundle
    from .plotting import plot_losses, read_metrics
    from .trainer import NumericalFailure, Trainer

    cfg = build_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = load_bundle(cfg.scene, image_long_side=cfg.train.image_long_side)
    if args.resume:
        trainer = Trainer.resume(cfg, scene, args.resume, out)
    else:
        trainer = Trainer(cfg, scene, out).initialize()
        log_path = out / "metrics.ndjson"
        if log_path.exists():
            log_path.unlink()
    cfg.save(out / "config.json")
    write_manifest(out, "train", args.argv, cfg)
    try:
        result = trainer.run()
    except NumericalFailure as exc:
        # skipped steps leave parameters untouched, so the current state is the last good one
        trainer.save(out / "checkpoints" / "last_good.ckpt")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    records = read_metrics(out / "metrics.ndjson")
    if records:
        plot_losses(records, out / "losses.png")
    print(json.dumps(result))
    return EXIT_OK


# -- mesh -----------------------------------------------------------------------------

def cmd_mesh(args) -> int:
    from dataclasses import replace

    from .meshing.mesh import export_mesh
    from .pipeline import TrainedRun, extract_mesh, mesh_to_original

    if args.resolution < 8:
        raise UsageError("--resolution must be >= 8")
    run = TrainedRun.load(args.checkpoint)
    emb = run.embedding(args.embedding)
    mesh = extract_mesh(run.model, run.bounds, args.resolution, args.filter, embedding=emb)
    if mesh.is_empty:
        print("warning: extracted mesh is empty", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = mesh_to_original(mesh, run.transform)
    export_mesh(world, out / f"{args.name}.ply")
    if world.normals is not None:
        export_mesh(replace(world, colors=0.5 * (world.normals + 1.0)), out / f"{args.name}_normals.ply")
    else:
        export_mesh(world, out / f"{args.name}_normals.ply")
    meta = {"checkpoint": str(args.checkpoint), "resolution": args.resolution, "filter": args.filter,
            "embedding": args.embedding, "iso": 0.0, "frame": "original (normalization undone)",
            "sampling_radius_normalized": run.bounds.sampling_radius, "transform": run.transform.to_json(),
            "vertices": int(len(world.vertices)), "faces": int(len(world.faces))}
    (out / f"{args.name}.meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "mesh", args.argv)
    print(f"wrote {out / (args.name + '.ply')}: {meta['vertices']} vertices, {meta['faces']} faces")
    return EXIT_OK


# -- render ---------------------------------------------------------------------------

def depth_to_image(depth: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Near is bright; empty pixels are black."""
    fg = opacity > 0.5
    img = np.zeros(depth.shape)
    if fg.any():
        lo, hi = depth[fg].min(), depth[fg].max()
        img[fg] = 1.0 - (depth[fg] - lo) / max(hi - lo, 1e-12) * 0.8
    return np.repeat(img[..., None], 3, axis=-1)


def cmd_render(args) -> int:
    from .ingest.scene import load_bundle
    from .pipeline import TrainedRun, render_view

    run = TrainedRun.load(args.checkpoint)
    cfg = run.meta["config"]
    bundle = args.scene or cfg["scene"]
    scene = load_bundle(bundle, image_long_side=cfg["train"]["image_long_side"])
    ids = scene.split_ids(args.split) if not args.image else [int(i) for i in args.image]
    if not ids:
        raise UsageError(f"no images in split {args.split!r}")
    emb = run.embedding(args.embedding)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = {}
    for iid in ids:
        if iid not in scene.images:
            raise UsageError(f"unknown image id {iid}")
        rec = scene.images[iid]
        res = render_view(run, scene.camera(iid), emb)
        stem = Path(rec.name).stem
        _save_png(out / f"{stem}_color.png", res["color"])
        _save_png(out / f"{stem}_depth.png", depth_to_image(res["depth"], res["opacity"]))
        _save_png(out / f"{stem}_normal.png", 0.5 * (res["normal"] + 1.0) * res["opacity"][..., None])
        if rec.pixels is not None:
            mae = np.abs(res["color"] - rec.pixels).reshape(-1, 3).mean(axis=0)
            errors[rec.name] = [float(v) for v in mae]
            print(f"{rec.name}: mean abs error per channel R={mae[0]:.4f} G={mae[1]:.4f} B={mae[2]:.4f}")
    (out / "render_errors.json").write_text(json.dumps(errors, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "render", args.argv)
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------

def load_geometry(path):
    """A mesh when the file has faces, otherwise its vertices as a point set."""
    from .meshing.mesh import read_mesh

    mesh = read_mesh(path)
    return mesh if len(mesh.faces) else mesh.vertices


def selftest() -> int:
    from .evaluation import f1

    value = round(100 * f1(0.730, 0.080), 1)
    print(f"F1(P=73.0, R=8.0) = {value}")
    return EXIT_OK if value == 14.4 else EXIT_RUNTIME


def cmd_eval(args) -> int:
    from .evaluation import EvalError, as_points, evaluate, nearest_distances
    from .plotting import plot_pr_curve

    if args.selftest:
        return selftest()
    if not args.pred or not args.gt:
        raise UsageError("eval needs PRED and GT paths (or --selftest)")
    th = args.thresholds
    if not th or any(t <= 0 for t in th) or any(b < a for a, b in zip(th, th[1:])):
        raise UsageError(f"thresholds must be positive and sorted ascending, got {th}")
    pred, gt = load_geometry(args.pred), load_geometry(args.gt)
    try:
        report = evaluate(pred, gt, th, n_samples=args.samples, seed=args.seed, unit_to_meter=args.unit_to_meter)
    except EvalError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "eval.json")
    table = report.table()
    (out / "eval_table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    # dense curve for the figure
    p = as_points(pred, args.samples, args.seed)
    g = as_points(gt, args.samples, args.seed)
    scale = args.unit_to_meter or 1.0
    dp, dg = nearest_distances(p, g) * scale, nearest_distances(g, p) * scale
    taus = np.linspace(th[-1] / 50, th[-1] * 1.5, 60)
    curve = {"tau": taus.tolist(), "precision": [float(np.mean(dp <= t)) for t in taus],
             "recall": [float(np.mean(dg <= t)) for t in taus]}
    curve["f1"] = [0.0 if a + b == 0 else 2 * a * b / (a + b) for a, b in zip(curve["precision"], curve["recall"])]
    plot_pr_curve(curve, out / "eval_curves.png", Path(args.pred).name)
    write_manifest(out, "eval", args.argv)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heritage-recon", description="Neural surface reconstruction from mixed gray/color photos.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap numeric worker threads (1 = deterministic; env {THREADS_ENV})")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic scene bundle")
    s.add_argument("out")
    s.add_argument("--scene", default="sphere-box")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--gray", type=float, default=0.9, help="fraction of training views converted to gray")
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--val", type=int, default=2)
    s.add_argument("--dense-points", type=int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit the neural scene")
    t.add_argument("config", nargs="?", help="JSON run configuration")
    t.add_argument("--scene")
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--geo", choices=("none", "sparse", "dense"))
    t.add_argument("--color-loss", type=_on_off)
    t.add_argument("--lam", type=float)
    t.add_argument("--image-long-side", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. sampler.n_coarse=32")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mesh", help="extract a colored mesh")
    m.add_argument("checkpoint")
    m.add_argument("--out", default=".")
    m.add_argument("--name", default="mesh")
    m.add_argument("--resolution", type=int, default=128)
    m.add_argument("--filter", choices=("keep-largest", "keep-within", "none"), default="keep-largest")
    m.add_argument("--embedding", default="average", help="'average' or an image id")
    m.set_defaults(func=cmd_mesh)

    r = sub.add_parser("render", help="render color, depth and normal images")
    r.add_argument("checkpoint")
    r.add_argument("--scene", help="bundle (defaults to the one used for training)")
    r.add_argument("--split", default="val")
    r.add_argument("--image", action="append", help="image id to render (repeatable)")
    r.add_argument("--out", default="renders")
    r.add_argument("--embedding", default="average", help="'average' or an image id")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="precision / recall / F1 against ground truth")
    e.add_argument("pred", nargs="?")
    e.add_argument("gt", nargs="?")
    e.add_argument("--thresholds", type=_float_list, default=[0.1, 0.2, 0.3])
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=42)
    e.add_argument("--unit-to-meter", type=float)
    e.add_argument("--out", default="eval")
    e.add_argument("--selftest", action="store_true", help="check the F1 arithmetic and exit")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    from threadpoolctl import threadpool_limits

    from .config import ConfigError

    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        args.argv = list(argv)
        threads = _thread_count(args.threads)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if threads is not None:
        os.environ[THREADS_ENV] = str(threads)
    try:
        if threads is not None:
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
