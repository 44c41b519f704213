"""``pmrl`` command line: synth, train, infer, fuse, eval.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import PipelineConfig
from .exceptions import NumericAbort, ParseError, PMRLError
from .fusion import PointCloud, cloud_metrics, fuse, gt_cloud
from .io import read_cameras, read_pfm, read_ply, write_cameras, write_pfm, write_ply
from .pipeline import downsample_nearest, evaluate_maps, infer_view, make_scorer, thresholds
from .synth import generate_scene, read_scene, read_views, render_scene, write_views
from .training import TrainingScene, train

log = logging.getLogger("pmrl")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def scene_dirs(root: Path) -> list[Path]:
    """Scene directories listed by ``manifest.json``, or ``root`` itself if it holds views."""
    manifest = root / "manifest.json"
    if manifest.exists():
        try:
            entries = json.loads(manifest.read_text())["scenes"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(manifest, 0, f"malformed manifest ({exc})") from exc
        return [root / e["path"] for e in entries]
    if (root / "cameras.txt").exists():
        return [root]
    raise FileNotFoundError(f"{root}: neither manifest.json nor cameras.txt found")


def read_maps(directory: Path):
    """``depth_###.pfm`` / ``normal_###.pfm`` for every camera in ``cameras.txt``."""
    cameras = read_cameras(directory / "cameras.txt")
    paths = [(directory / f"depth_{i:03d}.pfm", directory / f"normal_{i:03d}.pfm") for i in range(len(cameras))]
    absent = [str(p) for pair in paths for p in pair if not p.exists()]
    if absent:
        raise FileNotFoundError("missing map files: " + ", ".join(absent))
    depths, normals = [], []
    for (dp, np_), cam in zip(paths, cameras):
        d, n = read_pfm(dp).astype(np.float64), read_pfm(np_).astype(np.float64)
        if d.shape != (cam.height, cam.width) or n.shape != (*d.shape, 3):
            raise ParseError(dp, 0, f"extents {d.shape}/{n.shape} disagree with camera {cam.width}x{cam.height}"
                                    f" (normal map {np_})")
        depths.append(d)
        normals.append(n)
    return depths, normals, cameras


# -- commands -------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, args) -> dict:
    out = Path(args.out)
    scenes = []
    for i in range(cfg.num_scenes):
        seed = cfg.seed * 1000 + i
        scene = generate_scene(seed, cfg.synth)
        name = f"scene_{i:03d}"
        write_views(out / name, render_scene(scene), scene)
        scenes.append({"path": name, "seed": seed, "views": len(scene.cameras)})
    manifest = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "scenes": scenes}
    _write_json(out / "manifest.json", manifest)
    return {"scenes": len(scenes), "out": str(out)}


def cmd_train(cfg: PipelineConfig, args) -> dict:
    dataset = []
    for d in scene_dirs(Path(args.data)):
        dataset.append(TrainingScene(read_views(d), read_scene(d)))
    epochs = cfg.train.epochs if args.epochs is None else args.epochs
    _, history = train(cfg, dataset, out_dir=args.out, resume=args.checkpoint, epochs=epochs)
    last = history[-1].to_dict() if history else {}
    return {"epochs": epochs, "checkpoint": str(Path(args.out) / "checkpoint.pmrl"), "last": last}


def cmd_infer(cfg: PipelineConfig, args) -> dict:
    if not args.baseline and args.checkpoint is None:
        raise PMRLError("infer needs --checkpoint or --baseline")
    scorer = make_scorer(cfg, args.checkpoint, args.baseline)
    src = Path(args.data)
    views, scene = read_views(src), read_scene(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cameras = []
    for ref in range(len(views)):
        res = infer_view(scorer, views, ref, cfg, scene)
        write_pfm(out / f"depth_{ref:03d}.pfm", res.depth)
        write_pfm(out / f"normal_{ref:03d}.pfm", res.normal.reshape(*res.depth.shape, 3))
        cameras.append(res.camera)
        log.info("view %d inferred", ref)
    write_cameras(out / "cameras.txt", cameras)
    info = {"config_hash": cfg.hash(), "baseline": bool(args.baseline),
            "checkpoint": None if args.checkpoint is None else str(args.checkpoint), "views": len(views)}
    _write_json(out / "infer.json", info)
    return info


def cmd_fuse(cfg: PipelineConfig, args) -> dict:
    depths, normals, cameras = read_maps(Path(args.data))
    cloud = fuse(depths, normals, cameras, thresholds(cfg))
    write_ply(args.out, cloud.points, cloud.normals)
    return {"points": len(cloud), "out": str(args.out), "config_hash": cfg.hash()}


def cmd_eval(cfg: PipelineConfig, args) -> dict:
    """Metrics of a map directory (fused here) or a PLY cloud against a scene's GT."""
    gt_dir = Path(args.gt)
    views = read_views(gt_dir)
    tau = cfg.fusion.tau if args.tau is None else args.tau
    pred = Path(args.pred)
    if pred.is_dir():
        depths, normals, cameras = read_maps(pred)
        if len(depths) != len(views):
            raise ParseError(pred / "cameras.txt", 0, f"{len(depths)} maps but {len(views)} GT views in {gt_dir}")
        ev = evaluate_maps(depths, normals, cameras, views, cfg, tau)
        report = {**ev.metrics, "depth": ev.depth}
    else:
        points, normals = read_ply(pred)
        scale = cfg.patchmatch.scales[-1] if args.scale is None else args.scale
        cams = [v.camera.scaled(scale) if scale != 1.0 else v.camera for v in views]
        gd = [downsample_nearest(v.gt_depth, (c.height, c.width)) for v, c in zip(views, cams)]
        gn = [downsample_nearest(v.gt_normal, (c.height, c.width)) for v, c in zip(views, cams)]
        report = cloud_metrics(PointCloud(points, normals), gt_cloud(gd, gn, cams, tau), tau).to_dict()
    report["config_hash"] = cfg.hash()
    if args.out:
        _write_json(Path(args.out), report)
    return report


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "fuse": cmd_fuse, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap on BLAS/data-parallel threads")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pmrl", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    # subcommands accept the common flags too; SUPPRESS keeps top-level values
    sub_common = argparse.ArgumentParser(add_help=False)
    for action in common._actions:
        kwargs = {"help": action.help, "default": argparse.SUPPRESS}
        if isinstance(action, argparse._StoreTrueAction):
            kwargs["action"] = "store_true"
        else:
            kwargs["type"] = action.type
        sub_common.add_argument(*action.option_strings, **kwargs)

    p = sub.add_parser("synth", parents=[sub_common], help="render synthetic scenes and a manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[sub_common], help="train the learned scorer")
    p.add_argument("--data", required=True, help="synth output directory or one scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--epochs", type=int, help="total epochs to reach")

    p = sub.add_parser("infer", parents=[sub_common], help="depth/normal maps for every view of a scene")
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true", help="handcrafted-equivalent scorer, no checkpoint")

    p = sub.add_parser("fuse", parents=[sub_common], help="fuse a map directory into a PLY cloud")
    p.add_argument("--data", required=True, help="directory with depth/normal PFMs and cameras.txt")
    p.add_argument("--out", required=True, help="output .ply")

    p = sub.add_parser("eval", parents=[sub_common], help="accuracy/completeness/F1 against ground truth")
    p.add_argument("--pred", required=True, help="map directory or .ply cloud")
    p.add_argument("--gt", required=True, help="scene directory with GT maps")
    p.add_argument("--tau", type=float, help="distance threshold (default fusion.tau)")
    p.add_argument("--scale", type=float, help="GT raster scale for a .ply prediction (default finest level)")
    p.add_argument("--out", help="metrics JSON path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.dump_config:
            print(cfg.to_json())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_INVALID
        log.info("config %s command %s", cfg.hash(), args.command)
        with threadpool_limits(limits=cfg.threads):
            result = COMMANDS[args.command](cfg, args)
        print(json.dumps(_json_safe(result), sort_keys=True))
        return EXIT_OK
    except NumericAbort as exc:
        print(f"pmrl: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        print(f"pmrl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PMRLError, ValueError) as exc:
        print(f"pmrl: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
