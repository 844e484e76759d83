"""Command line entry point: ``semsplat <command> ...``.

Commands: synth, train, render, query, update, metrics, grasp. Every command
writes into ``--out-dir`` and never touches its inputs. Failures exit nonzero
with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import Camera, Scene
from .query import QueryEmbedding, heatmap, iou_2d, locate_object, propose_grasp, psnr
from .raster import render
from .semfeat import build_feature_bundle, masks_from_stack
from .synth import SyntheticSpec, generate, write_dataset
from .train import TrainConfig, train, write_loss_csv
from .update import UpdateConfig, update_scene

log = logging.getLogger("semsplat")


class CliError(Exception):
    pass


# manifest -------------------------------------------------------------------

@dataclass
class ViewEntry:
    image: Path
    camera: Path
    features: Path | None = None
    masks: Path | None = None
    gt_labels: Path | None = None
    heldout: bool = False

    def load_camera(self) -> Camera:
        return io.load_camera(self.camera)

    def load_image(self) -> np.ndarray:
        return io.read_image(self.image)


@dataclass
class Manifest:
    name: str
    views: list[ViewEntry]
    heldout_views: list[ViewEntry] = field(default_factory=list)
    point_cloud: Path | None = None
    output_dir: Path | None = None
    object_features: Path | None = None
    root: Path = Path(".")


def _resolve(root: Path, value, what: str, must_exist: bool = True) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    if not path.is_absolute():
        path = root / path
    if must_exist and not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    root = path.parent

    def entries(items, heldout):
        out = []
        for i, v in enumerate(items):
            if "image" not in v or "camera" not in v:
                raise CliError(f"{path}: view {i} needs 'image' and 'camera'")
            out.append(ViewEntry(
                image=_resolve(root, v["image"], "image"),
                camera=_resolve(root, v["camera"], "camera file"),
                features=_resolve(root, v.get("features"), "feature file"),
                masks=_resolve(root, v.get("masks"), "mask file"),
                gt_labels=_resolve(root, v.get("gt_labels"), "label file"),
                heldout=heldout,
            ))
        return out

    views = entries(doc.get("views", []), False)
    if not views:
        raise CliError(f"{path}: manifest lists no views")
    return Manifest(
        name=doc.get("name", path.stem),
        views=views,
        heldout_views=entries(doc.get("heldout_views", []), True),
        point_cloud=_resolve(root, doc.get("point_cloud"), "point cloud"),
        output_dir=_resolve(root, doc.get("output_dir"), "output dir", must_exist=False),
        object_features=_resolve(root, doc.get("object_features"), "object feature file"),
        root=root,
    )


# config ---------------------------------------------------------------------

def _config_section(args, command: str) -> dict:
    """Config-file values for ``command``: its own section if present, else the whole file."""
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    if isinstance(doc.get(command), dict):
        return dict(doc[command])
    return {k: v for k, v in doc.items() if not isinstance(v, dict)}


def _merge(base: dict, **flags) -> dict:
    """Flags win over config-file values; unset flags (None) leave them alone."""
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _out_dir(args, default: str = "out") -> Path:
    return io.ensure_dir(args.out_dir or default)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    conf = _merge(_config_section(args, "synth"), n_objects=args.objects, image_size=args.size,
                  feature_dim=args.feature_dim, n_train_views=args.train_views,
                  n_heldout_views=args.heldout_views, seed=args.seed)
    spec = SyntheticSpec.from_dict(conf)
    manifest = write_dataset(generate(spec), _out_dir(args, "synthetic"))
    print(manifest)
    return 0


def _load_point_cloud(path: Path):
    cloud = io.read_tensor(path).astype(np.float64)
    if cloud.ndim != 2 or cloud.shape[1] not in (3, 6):
        raise CliError(f"{path}: point cloud must be N x 3 or N x 6 (xyz + rgb)")
    colors = cloud[:, 3:6] if cloud.shape[1] == 6 else np.full((len(cloud), 3), 0.5)
    return cloud[:, :3], colors


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    conf = _merge(_config_section(args, "train"), iterations=args.iterations, seed=args.seed,
                  lambda2=args.lambda2)
    components = int(conf.pop("components", 16) if args.components is None else args.components)
    config = TrainConfig.from_dict(conf)
    if manifest.point_cloud is None:
        raise CliError("manifest has no point_cloud")
    points, colors = _load_point_cloud(manifest.point_cloud)
    images = [v.load_image() for v in manifest.views]
    cameras = [v.load_camera() for v in manifest.views]
    bundle = None
    if all(v.features is not None and v.masks is not None for v in manifest.views):
        feats = [io.read_tensor(v.features) for v in manifest.views]
        masks = [masks_from_stack(io.read_tensor(v.masks)) for v in manifest.views]
        bundle = build_feature_bundle(feats, masks, components)
    else:
        log.warning("views without features or masks: training RGB only")
    scene, state = train(points, colors, images, cameras, bundle, config, return_state=True)
    out = _out_dir(args, str(manifest.output_dir or "out"))
    io.save_scene(out / "scene.sgsc", scene)
    write_loss_csv(out / "loss.csv", state.history)
    print(out / "scene.sgsc")
    return 0


def cmd_render(args) -> int:
    scene = io.load_scene(args.scene)
    camera = io.load_camera(args.camera)
    out = render(scene, camera)
    d = _out_dir(args)
    stem = args.name
    io.write_ppm(d / f"{stem}.ppm", out.rgb)
    io.write_pgm(d / f"{stem}_alpha.pgm", out.alpha)
    io.write_tensor(d / f"{stem}_rgb.sgtn", out.rgb)
    io.write_tensor(d / f"{stem}_alpha.sgtn", out.alpha)
    io.write_tensor(d / f"{stem}_depth.sgtn", out.depth)
    io.write_tensor(d / f"{stem}_feature.sgtn", out.feature)
    print(d / f"{stem}.ppm")
    return 0


def _load_query(scene: Scene, path) -> QueryEmbedding:
    return QueryEmbedding.from_raw(io.read_tensor(path), scene)


def _gt_mask(path, label):
    gt = io.read_tensor(path)
    if gt.ndim == 3:
        gt = gt[..., 0]
    return gt == label if label is not None else gt != 0


def cmd_query(args) -> int:
    scene = io.load_scene(args.scene)
    camera = io.load_camera(args.camera)
    query = _load_query(scene, args.embedding)
    heat = heatmap(scene, camera, query)
    d = _out_dir(args)
    io.write_pgm(d / "heatmap.pgm", heat)
    io.write_tensor(d / "heatmap.sgtn", heat)
    report = {"heatmap": str(d / "heatmap.pgm"), "threshold": args.threshold}
    if args.gt:
        report["iou"] = iou_2d(heat, args.threshold, _gt_mask(args.gt, args.gt_label))
    _write_json(d / "query.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_update(args) -> int:
    scene = io.load_scene(args.scene)
    manifest = load_manifest(args.manifest)
    conf = _merge(_config_section(args, "update"), sim_threshold=args.sim_threshold,
                  change_threshold=args.change_threshold, max_steps=args.max_steps)
    config = UpdateConfig.from_dict(conf)
    cameras = [v.load_camera() for v in manifest.views]
    images = [v.load_image() for v in manifest.views]
    result = update_scene(scene, cameras, images, config)
    if not result.changed:
        print("no change detected")
        return 0
    d = _out_dir(args)
    report = result.update.to_dict()
    _write_json(d / "update.json", report)
    if args.write_scene:
        from .update import apply_update
        io.save_scene(d / "scene_updated.sgsc", apply_update(scene, result.update))
    print(json.dumps(report, sort_keys=True))
    return 0


def scene_metrics(scene: Scene, manifest: Manifest, threshold: float = 0.6) -> dict:
    """Per-view PSNR and per-object IoU (when object features and labels exist)."""
    obj_feats = io.read_tensor(manifest.object_features) if manifest.object_features else None
    queries = []
    if obj_feats is not None:
        for f in obj_feats:
            try:
                queries.append(QueryEmbedding.from_raw(f, scene))
            except ValueError:
                queries.append(None)
    views = []
    for v in manifest.views + manifest.heldout_views:
        cam = v.load_camera()
        out = render(scene, cam)
        entry = {"image": v.image.name, "heldout": v.heldout, "psnr": psnr(out.rgb, v.load_image())}
        if queries and v.gt_labels is not None:
            labels = io.read_tensor(v.gt_labels)
            ious = []
            for o, q in enumerate(queries):
                gt = labels == o + 1
                ious.append(iou_2d(heatmap(scene, cam, q, rendered=out), threshold, gt) if q is not None
                            else 0.0)
            entry["iou"] = ious
            entry["mean_iou"] = float(np.mean(ious))
        views.append(entry)

    def mean_of(key, held):
        vals = [v[key] for v in views if v["heldout"] == held and key in v]
        return float(np.mean(vals)) if vals else None

    return {
        "gaussian_count": len(scene),
        "views": views,
        "train_psnr": mean_of("psnr", False),
        "heldout_psnr": mean_of("psnr", True),
        "train_iou": mean_of("mean_iou", False),
        "heldout_iou": mean_of("mean_iou", True),
        "iou_threshold": threshold,
    }


def cmd_metrics(args) -> int:
    scene = io.load_scene(args.scene)
    manifest = load_manifest(args.manifest)
    report = scene_metrics(scene, manifest, args.threshold)
    if args.out_dir:
        _write_json(_out_dir(args) / "metrics.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_grasp(args) -> int:
    scene = io.load_scene(args.scene)
    query = _load_query(scene, args.embedding)
    selected, centroid = locate_object(scene, query, args.sim_threshold)
    grasps = [g.to_dict() for g in propose_grasp(scene, selected, top=args.top)]
    d = _out_dir(args)
    _write_json(d / "grasps.json", grasps)
    print(json.dumps({"selected_count": int(len(selected)), "centroid": centroid.tolist(),
                      "grasps": str(d / "grasps.json")}, sort_keys=True))
    return 0


# parser ---------------------------------------------------------------------

def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    """Global flags. Subcommand copies default to SUPPRESS so a flag given before the
    command is not reset by the subparser."""
    c = argparse.ArgumentParser(add_help=False)

    def d(value):
        return argparse.SUPPRESS if suppress else value

    c.add_argument("--seed", type=int, default=d(None), help="rng seed (default: config value or 0)")
    c.add_argument("--config", default=d(None), help="JSON config file; flags override its values")
    c.add_argument("--out-dir", default=d(None), help="directory for outputs")
    c.add_argument("--threads", type=int, default=d(1), help="worker threads for compiled kernels")
    c.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return c


def build_parser() -> argparse.ArgumentParser:
    top = _common_flags(suppress=False)
    common = _common_flags(suppress=True)

    p = argparse.ArgumentParser(prog="semsplat", description=__doc__.splitlines()[0], parents=[top])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--objects", type=int)
    s.add_argument("--size", type=int, help="image size in pixels")
    s.add_argument("--feature-dim", type=int)
    s.add_argument("--train-views", type=int)
    s.add_argument("--heldout-views", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a scene from a manifest")
    s.add_argument("manifest")
    s.add_argument("--iterations", type=int)
    s.add_argument("--components", type=int, help="PCA components (default 16)")
    s.add_argument("--lambda2", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render a scene from a camera")
    s.add_argument("scene")
    s.add_argument("camera")
    s.add_argument("--name", default="render")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("query", parents=[common], help="similarity heatmap for an embedding")
    s.add_argument("scene")
    s.add_argument("camera")
    s.add_argument("embedding")
    s.add_argument("--threshold", type=float, default=0.6)
    s.add_argument("--gt", help="ground-truth mask or label tensor")
    s.add_argument("--gt-label", type=int, help="object label to compare against in --gt")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("update", parents=[common], help="estimate the motion of a moved object")
    s.add_argument("scene")
    s.add_argument("manifest", help="manifest of the current views")
    s.add_argument("--sim-threshold", type=float)
    s.add_argument("--change-threshold", type=float)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--write-scene", action="store_true")
    s.set_defaults(func=cmd_update)

    s = sub.add_parser("metrics", parents=[common], help="PSNR and IoU of a scene against a manifest")
    s.add_argument("scene")
    s.add_argument("manifest")
    s.add_argument("--threshold", type=float, default=0.6)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("grasp", parents=[common], help="grasp proposals for a queried object")
    s.add_argument("scene")
    s.add_argument("embedding")
    s.add_argument("--sim-threshold", type=float, default=0.85)
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_grasp)
    return p


def _set_threads(n: int) -> None:
    if n < 1:
        raise CliError("--threads must be >= 1")
    import numba

    # the kernels are serial; skip probing for TBB/OpenMP when the pool starts
    if numba.config.THREADING_LAYER == "default":
        numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except Exception as exc:  # reported as structured error
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
