"""``vpk`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 ablation
ordering FAIL.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, metrics
from .autonet import NetSpec, build_network, load_into, save_checkpoint
from .dataio import load_dataset, load_split, save_dataset
from .errors import ShapeMismatch, VolPoseError
from .heatmap import HeatmapVolume, decode_argmax, decode_soft, read_volume, validate_ladder, write_volume
from .skeleton import Skeleton, make_toy_skeleton, read_pose_records
from .trainer import TrainConfig, evaluate, ladder_targets, make_dataset, run_experiment
from .voxelgrid import VoxelGrid, lift_to_3d, voxel_to_metric

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_ABLATION = 0, 1, 2, 3
METRIC_NAMES = ("mpjpe", "recon", "pcp")


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _metric_list(text):
    names = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [n for n in names if n not in METRIC_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"metrics must be drawn from {','.join(METRIC_NAMES)}")
    return names


# -- subcommands --------------------------------------------------------------

def cmd_synth_data(args):
    cfg = TrainConfig(seed=args.seed, n_train=args.n_train, n_test=args.n_test,
                      image_size=args.image_size)
    skeleton = make_toy_skeleton()
    train, test = make_dataset(skeleton, cfg.n_train, cfg.n_test, cfg.seed, cfg)
    save_dataset(args.out, skeleton, train, test)
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")
    return EXIT_OK


def cmd_make_targets(args):
    ladder = validate_ladder(args.ladder)
    w, h, d = args.grid
    if ladder[-1] != d:
        raise VolPoseError(f"last ladder entry {ladder[-1]} must equal grid depth {d}")
    cfg = TrainConfig(ladder=ladder, grid={"w": w, "h": h, "d": d}, sigma=args.sigma,
                      image_size=args.image_size)
    skeleton = Skeleton.load(Path(args.data) / "skeleton.json")
    samples = load_split(args.data, args.split, skeleton, cfg)
    if args.limit is not None:
        samples = samples[:args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for s in samples:
        for depth, chw in zip(ladder, ladder_targets(s, ladder, cfg.sigma)):
            name = f"{s.id}.d{depth}.vol"
            write_volume(out / name, HeatmapVolume.from_chw(chw, depth, skeleton.n_joints))
            index.append({"id": s.id, "d": depth, "file": name,
                          "bbox_px": list(s.grid.bbox), "z_center_mm": s.grid.z_center,
                          "z_half_range_mm": s.grid.z_half_range,
                          "pose_vox": s.pose_vox.tolist()})
    _write_json(out / "targets.json", {"ladder": list(ladder), "grid": [w, h, d],
                                       "sigma": cfg.sigma, "targets": index})
    print(f"wrote {len(index)} target volumes to {args.out}")
    return EXIT_OK


def _load_config(path, steps=None):
    cfg = TrainConfig.load(path)
    if steps is not None:
        cfg = replace(cfg, steps=steps)
        cfg.validate()
    return cfg


def cmd_train(args):
    cfg = _load_config(args.config, args.steps)
    if args.data:
        skeleton, train, test = load_dataset(args.data, cfg)
        cfg = replace(cfg, n_train=len(train), n_test=len(test))
    else:
        skeleton = make_toy_skeleton()
        train, test = make_dataset(skeleton, cfg.n_train, cfg.n_test, cfg.seed, cfg)
    report, network = run_experiment(cfg, skeleton, (train, test))
    if not args.timing:
        report["runtime_s"] = None  # wall time would break byte-identical reruns
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())
    _write_json(out / "network.json", network.spec.to_json())
    skeleton.save(out / "skeleton.json")
    save_checkpoint(out / "checkpoint.vpkt", network.params)
    _write_json(out / "report.json", report)
    print(f"test MPJPE {report['test_mpjpe_mm']:.2f} mm, reconstruction error "
          f"{report['test_recon_err_mm']:.2f} mm")
    return EXIT_OK


def _metric_table(pred, gt, skeleton, wanted):
    out = {}
    if "mpjpe" in wanted:
        out["mpjpe_mm"] = metrics.mpjpe(pred, gt, skeleton.root_index)
    if "recon" in wanted:
        out["recon_err_mm"] = metrics.reconstruction_error(pred, gt, strict=False)
    if "pcp" in wanted:
        out["pcp"] = metrics.pcp3d(pred, gt, skeleton)
    return out


def _print_table(table):
    for key, value in table.items():
        if isinstance(value, dict):
            for group, frac in value.items():
                print(f"{key + '.' + group:<24}{frac:10.4f}")
        else:
            print(f"{key:<24}{value:10.3f}")


def _records_array(path):
    recs = read_pose_records(path)
    if not recs:
        raise VolPoseError(f"{path}: no records")
    arr = [np.asarray(r["coords_mm"], dtype=np.float64) for r in recs]
    shapes = {a.shape for a in arr}
    if len(shapes) != 1:
        raise ShapeMismatch(f"{path}: records disagree on joint count")
    return [r["id"] for r in recs], np.stack(arr)


def cmd_eval(args):
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise _UsageError("--pred and --gt must be given together")
        ids_p, pred = _records_array(args.pred)
        ids_g, gt = _records_array(args.gt)
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs groundtruth {gt.shape}")
        if ids_p != ids_g:
            raise ShapeMismatch("prediction and groundtruth record ids differ")
        skeleton = Skeleton.load(args.skeleton) if args.skeleton else make_toy_skeleton()
        if gt.shape[1] != skeleton.n_joints:
            raise ShapeMismatch(f"poses have {gt.shape[1]} joints, skeleton has {skeleton.n_joints}")
        table = _metric_table(pred, gt, skeleton, args.metrics)
    else:
        if not (args.checkpoint and args.data):
            raise _UsageError("give --checkpoint with --data, or --pred with --gt")
        run_dir = Path(args.checkpoint).parent
        cfg = TrainConfig.load(args.config or run_dir / "config.json")
        spec = NetSpec.from_json(json.loads((run_dir / "network.json").read_text()))
        network = load_into(build_network(spec), args.checkpoint)
        skeleton = Skeleton.load(Path(args.data) / "skeleton.json")
        if skeleton.n_joints != spec.n_joints:
            raise ShapeMismatch(f"network predicts {spec.n_joints} joints, data has {skeleton.n_joints}")
        test = load_split(args.data, "test", skeleton, cfg)
        res = evaluate(network, test, cfg, skeleton)
        table = {}
        if "mpjpe" in args.metrics:
            table["mpjpe_mm"] = res["test_mpjpe_mm"]
        if "recon" in args.metrics:
            table["recon_err_mm"] = res["test_recon_err_mm"]
        if "pcp" in args.metrics:
            table["pcp"] = res["test_pcp"]
    _print_table(table)
    if args.out:
        _write_json(args.out, table)
    return EXIT_OK


def cmd_decode(args):
    vol = read_volume(args.volume)
    decoded = decode_soft(vol) if args.method == "soft" else decode_argmax(vol)
    grid = None
    if args.bbox is not None:
        if len(args.bbox) != 4:
            raise _UsageError("--bbox takes x0,y0,w,h")
        grid = VoxelGrid(vol.w, vol.h, vol.d, args.bbox, z_center=args.z_center,
                         z_half_range=args.z_half_range)
    header = "joint        i        j        k"
    if grid is not None:
        header += "        u_px        v_px        z_mm"
        if args.focal is not None:
            header += "        x_mm        y_mm"
    print(header)
    for n, vc in enumerate(decoded):
        line = f"{n:5d} {vc[0]:8.3f} {vc[1]:8.3f} {vc[2]:8.3f}"
        if grid is not None:
            uv, z = voxel_to_metric(grid, vc)
            line += f" {uv[0]:11.3f} {uv[1]:11.3f} {z:11.3f}"
            if args.focal is not None:
                xyz = lift_to_3d(grid, vc, args.focal, (args.cx, args.cy))
                line += f" {xyz[0]:11.3f} {xyz[1]:11.3f}"
        print(line)
    return EXIT_OK


def cmd_ablation(args):
    base = TrainConfig(steps=args.steps, seed=args.base_seed, n_train=args.n_train, n_test=args.n_test)
    suites = list(ablation.SUITES) if args.suite == "all" else [args.suite]
    out = Path(args.out) if args.out else None
    cache_dir = args.cache or (out / "cache" if out else None)
    cache = ablation.RunCache(cache_dir)
    verdicts = []
    for suite in suites:
        t0 = time.perf_counter()
        result = ablation.run_suite(suite, args.seeds, base, cache)
        print(ablation.format_result(result))
        logging.getLogger(__name__).info("%s finished in %.0f s", suite, time.perf_counter() - t0)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / f"ablation_{suite}.json", result)
        verdicts.append(result["verdict"])
    return EXIT_OK if all(v == "PASS" for v in verdicts) else EXIT_ABLATION


# -- parser -------------------------------------------------------------------

class _UsageError(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="vpk", description="Volumetric 3D pose toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=_positive, default=2000)
    s.add_argument("--n-test", type=_positive, default=200)
    s.add_argument("--image-size", type=_positive, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("make-targets", help="write ladder target volumes for stored samples")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--ladder", type=_ints, default=(1, 16))
    s.add_argument("--grid", type=_ints, default=(16, 16, 16), help="w,h,d")
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--image-size", type=_positive, default=64)
    s.add_argument("--limit", type=_positive, default=16, help="number of samples (default 16)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_targets)

    s = sub.add_parser("train", help="train one configuration and evaluate it")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset directory from synth-data (default: regenerate from the config seed)")
    s.add_argument("--steps", type=_positive, help="override the config's step count")
    s.add_argument("--timing", action="store_true", help="record wall time in report.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint or a pair of pose files")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--config", help="training config (default: config.json beside the checkpoint)")
    s.add_argument("--pred", help="JSON-lines predicted poses")
    s.add_argument("--gt", help="JSON-lines groundtruth poses")
    s.add_argument("--skeleton", help="skeleton.json for --pred/--gt mode (default: toy skeleton)")
    s.add_argument("--metrics", type=_metric_list, default=METRIC_NAMES)
    s.add_argument("--out", help="also write the table as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="print per-joint coordinates of a volume file")
    s.add_argument("--volume", required=True)
    s.add_argument("--method", choices=("argmax", "soft"), default="argmax")
    s.add_argument("--bbox", type=_floats, help="x0,y0,w,h of the grid in pixels")
    s.add_argument("--z-center", type=float, default=0.0)
    s.add_argument("--z-half-range", type=float, default=1000.0)
    s.add_argument("--focal", type=float, help="lift to camera coordinates with this focal length")
    s.add_argument("--cx", type=float, default=500.0)
    s.add_argument("--cy", type=float, default=500.0)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("ablation", help="run paired configurations and check the orderings")
    s.add_argument("--suite", choices=tuple(ablation.SUITES) + ("all",), required=True)
    s.add_argument("--seeds", type=_positive, default=3)
    s.add_argument("--steps", type=_positive, default=ablation.DEFAULT_STEPS)
    s.add_argument("--base-seed", type=int, default=0)
    s.add_argument("--n-train", type=_positive, default=2000)
    s.add_argument("--n-test", type=_positive, default=200)
    s.add_argument("--out", help="directory for ablation_<suite>.json and the run cache")
    s.add_argument("--cache", help="run cache directory (default: <out>/cache)")
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vpk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolPoseError, ValueError, OSError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
