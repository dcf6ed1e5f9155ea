"""Command-line entry point.

Every subcommand reads an optional ``key = value`` config file (``#``
starts a comment) holding :class:`~proto3d.pipeline.PipelineConfig` keys;
``--set key=value`` flags and the dedicated ``--seed``/``--dataset`` flags
override it.  Exit status is 0 on success, 2 on a configuration or usage
error and 1 on any other failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, Proto3DError

log = logging.getLogger("proto3d")

TASKS = ("cluster", "retrieval", "map", "fewshot")


def read_config_file(path):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as fh:
        for num, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {num}", f"expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if not key:
                raise ConfigError(f"line {num}", "empty key")
            out[key] = value
    return out


def build_config(args):
    """Config file, then ``--set`` overrides, then dedicated flags; validated."""
    from .pipeline import PipelineConfig

    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "dataset", None):
        values["dataset"] = args.dataset
    return PipelineConfig.from_mapping(values)


def set_threads(n):
    """Cap numba worker threads at ``n``.

    The pool size is fixed when numba starts, so it is raised to ``n`` first
    if numba has not been imported yet.
    """
    if n < 1:
        raise ConfigError("threads", "must be at least 1")
    if "numba" not in sys.modules:
        have = int(os.environ.get("NUMBA_NUM_THREADS", "0") or 0)
        os.environ["NUMBA_NUM_THREADS"] = str(max(n, have, os.cpu_count() or 1))
    import numba

    cap = numba.config.NUMBA_NUM_THREADS
    if n > cap:
        log.warning("only %d worker threads available; using %d", cap, cap)
    numba.set_num_threads(min(n, cap))


def _dump_json(path, obj):
    from .formats import write_atomic

    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        write_atomic(path, text)


def _load_scenes(config):
    from .formats import read_dataset
    from .pipeline import prepare_scenes

    if not config.dataset:
        raise ConfigError("dataset", "no dataset given (use --dataset or a config file)")
    if not os.path.isdir(config.dataset):
        raise FileNotFoundError(f"dataset directory not found: {config.dataset}")
    raw = read_dataset(config.dataset)
    if not raw:
        from .errors import EmptyDataset

        raise EmptyDataset(f"no scenes under {config.dataset}")
    return prepare_scenes(raw, config)


def _last_iteration(state_dir):
    its = sorted(
        int(n[5:]) for n in os.listdir(state_dir)
        if n.startswith("iter_") and n[5:].isdigit() and os.path.exists(os.path.join(state_dir, n, "report.json"))
    ) if os.path.isdir(state_dir) else []
    if not its:
        raise FileNotFoundError(f"no saved iterations under {state_dir}")
    return its[-1]


def _load_state(args, config, num_scenes):
    from .pipeline import load_state

    it = args.iteration if args.iteration is not None else _last_iteration(args.state)
    state, _ = load_state(args.state, it, config, num_scenes)
    return state


# subcommands

def cmd_synth(args, config):
    from .formats import write_dataset
    from .synth import SynthConfig, generate_scene

    sc = SynthConfig(
        num_views=args.views, grid_min=tuple(config.grid_min), grid_max=tuple(config.grid_max),
        grid_resolution=tuple(config.grid_resolution),
    )
    scenes = [generate_scene(config.seed, sc, i) for i in range(args.scenes)]
    write_dataset(args.out, scenes, {"seed": config.seed, "synth": sc.to_dict()})
    log.info("wrote %d scenes to %s", args.scenes, args.out)


def _lift(scene_path, config):
    from .formats import read_scene
    from .geometry import fuse_views, unproject_image

    views, gt = read_scene(scene_path)
    per = [unproject_image(v, config.grid_spec, visible_only=True) for v in views]
    return views, gt, per, fuse_views(per)


def cmd_lift(args, config):
    from .formats import write_voxel_grid
    from .geometry import VoxelGrid

    _, _, _, (grid, occ) = _lift(args.scene, config)
    write_voxel_grid(args.out, grid)
    if args.occupancy:
        write_voxel_grid(args.occupancy, VoxelGrid(occ.spec, occ.labels[..., None].astype(np.float64)))


def cmd_triangulate(args, config):
    from .detect import Box2D, Proposal, triangulate_boxes
    from .formats import write_proposals
    from .synth import scene_boxes_2d

    views, gt, per, _ = _lift(args.scene, config)
    if args.boxes:
        with open(args.boxes) as fh:
            boxes = [Box2D(*b) for b in json.load(fh)]
    elif gt is not None:
        boxes = scene_boxes_2d(gt, views, jitter=config.jitter, seed=config.seed)
    else:
        raise ConfigError("boxes", "scene has no gt.json; pass --boxes")
    tri = triangulate_boxes(boxes, [(v.intrinsics, v.pose) for v in views], config.grid_spec,
                            min_views=config.min_views or None, occupancies=[o for _, o in per])
    write_proposals(args.out, [Proposal(b, 1.0) for b in tri])


def cmd_em(args, config):
    from .pipeline import load_state, run

    scenes = _load_scenes(config)
    start = None
    todo = args.iters
    if args.resume:
        try:
            last = _last_iteration(args.state)
        except FileNotFoundError:
            last = None
        if last is not None:
            start, _ = load_state(args.state, last, config, len(scenes))
            todo = max(0, args.iters - last)
    os.makedirs(args.state, exist_ok=True)
    from .formats import write_atomic

    write_atomic(os.path.join(args.state, "config.json"), json.dumps(config.to_dict(), indent=1, sort_keys=True))
    _, reports = run(scenes, config, todo, state_dir=args.state, start=start)
    for rep in reports:
        print(json.dumps(rep.to_dict(), sort_keys=True))


def cmd_parse(args, config):
    from .formats import read_scene, scene_parse_json, write_atomic
    from .pipeline import prepare_scene
    from .quantize import parse_scene

    views, gt = read_scene(args.scene)
    sd = prepare_scene(views, gt, config)
    state = _load_state(args, config, None)
    f = None if state.transform.is_identity() else state.transform
    parse = parse_scene(sd.grid, state.detector, state.dictionary, config.rots, occupied=sd.occ.occupied,
                        transform=f, extract=lambda g, box: sd.object_tensor(box))
    text = scene_parse_json(parse) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        write_atomic(args.out, text)


def cmd_eval(args, config):
    from .evaluate import ConfusionMatrix, linmatch_accuracy, mean_ap, precision_at_k
    from .pipeline import eval_objects, few_shot_eval
    from .quantize import assign_all

    scenes = _load_scenes(config)
    state = _load_state(args, config, len(scenes))
    tensors, labels = eval_objects(scenes)
    feats = [state.transform(t) for t in tensors]
    if args.task == "cluster":
        assigns = assign_all(feats, state.dictionary, config.rots)
        value = linmatch_accuracy(ConfusionMatrix.from_labels([a.k_star for a in assigns], labels))
        n = len(feats)
    elif args.task == "retrieval":
        queries, pool = feats[0::2], feats[1::2]
        value = precision_at_k(queries, labels[0::2], pool, labels[1::2], rots=config.rots, k=config.eval_k)
        n = len(queries)
    elif args.task == "map":
        gts = [s.gt.boxes() if s.gt is not None else [] for s in scenes]
        value = mean_ap([list(d) for d in state.detections], gts)
        n = sum(len(g) for g in gts)
    else:
        value, n = few_shot_eval(state, (tensors, labels), config, args.exemplars)
    _dump_json(args.out, {"task": args.task, "value": float(value), "n": int(n), "config": config.to_dict()})


def cmd_mine(args, config):
    from .formats import write_correspondences
    from .mine import build_pools, mine_correspondences

    scenes = _load_scenes(config)
    transform = None
    if args.state:
        state = _load_state(args, config, len(scenes))
        props = [[p.box for p in dets] for dets in state.detections]
        transform = state.transform
    else:
        props = [s.triangulated for s in scenes]
    tensors = [s.object_tensor(b) for s, boxes in zip(scenes, props) for b in boxes]
    if transform is not None:
        tensors = [transform(t) for t in tensors]
    rng = np.random.default_rng([config.seed, 0])
    qi, ti = build_pools(tensors, config.pool_size, rng)
    if not qi or not ti:
        from .errors import EmptyDataset

        raise EmptyDataset("not enough objects to build two pools")
    corrs = mine_correspondences(
        [tensors[i] for i in qi], [tensors[i] for i in ti], config.rots, config.top_n, config.top_retrievals,
        config.negatives_per_positive, args.rounds or config.mining_rounds, int(rng.integers(2 ** 31)),
        config.min_patch_norm,
    )
    write_correspondences(args.out, corrs)


def cmd_render(args, config):
    from PIL import Image

    from .formats import read_scene, read_voxel_grid
    from .geometry import OCCUPIED, UNKNOWN, CameraPose, OccupancyGrid, render_view

    if args.grid:
        grid = read_voxel_grid(args.grid)
        if args.occupancy:
            labels = np.rint(read_voxel_grid(args.occupancy).data[..., 0]).astype(np.uint8)
        else:
            labels = np.where(grid.data[..., -1] > 0, OCCUPIED, UNKNOWN).astype(np.uint8)
        occ = OccupancyGrid(grid.spec, labels)
        if args.scene is None:
            raise ConfigError("scene", "--grid needs --scene for the camera of --view")
        views, _ = read_scene(args.scene)
    else:
        if args.scene is None:
            raise ConfigError("scene", "pass --scene (and optionally --grid)")
        views, _, _, (grid, occ) = _lift(args.scene, config)
    if not 0 <= args.view < len(views):
        raise ConfigError("view", f"scene has {len(views)} views")
    view = views[args.view]
    pose = view.pose
    if args.pose:
        with open(args.pose) as fh:
            pose = CameraPose(np.asarray(json.load(fh), dtype=np.float64).reshape(4, 4))
    rgb, _ = render_view(grid, occ, view.intrinsics, pose)
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(args.out)


COMMANDS = {
    "synth": cmd_synth,
    "lift": cmd_lift,
    "triangulate": cmd_triangulate,
    "em": cmd_em,
    "parse": cmd_parse,
    "eval": cmd_eval,
    "mine": cmd_mine,
    "render": cmd_render,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="proto3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("lift", parents=[common], help="lift and fuse a scene into a VXG1 grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--occupancy", help="also write occupancy labels as a one-channel VXG1 grid")

    p = sub.add_parser("triangulate", parents=[common], help="2D boxes to 3D proposals (JSON lines)")
    p.add_argument("--scene", required=True)
    p.add_argument("--boxes", help="JSON list of [u_min, v_min, u_max, v_max, view]; default: jittered GT")
    p.add_argument("--out", required=True)

    p = sub.add_parser("em", parents=[common], help="bootstrap and run pipeline iterations")
    p.add_argument("--dataset")
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--state", default="state")
    p.add_argument("--resume", action="store_true", help="continue from the last saved iteration")

    p = sub.add_parser("parse", parents=[common], help="parse a scene into prototypes and rotations")
    p.add_argument("--scene", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--iteration", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved state")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--dataset")
    p.add_argument("--state", required=True)
    p.add_argument("--iteration", type=int)
    p.add_argument("--exemplars", type=int, default=2, help="labeled objects per category (fewshot)")
    p.add_argument("--out")

    p = sub.add_parser("mine", parents=[common], help="dump mined correspondences (JSON lines)")
    p.add_argument("--dataset")
    p.add_argument("--state", help="use this state's detections and transform (default: bootstrap boxes)")
    p.add_argument("--iteration", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", parents=[common], help="render a grid from a scene camera to PNG")
    p.add_argument("--scene")
    p.add_argument("--grid", help="VXG1 grid (default: lift --scene)")
    p.add_argument("--occupancy", help="one-channel VXG1 occupancy written by lift")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--pose", help="JSON 4x4 world-to-camera matrix replacing the view's pose")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            set_threads(args.threads)
        config = build_config(args)
        COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"proto3d: config error: {exc}", file=sys.stderr)
        return 2
    except (Proto3DError, OSError, ValueError) as exc:
        print(f"proto3d: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
