"""On-disk formats: scene datasets, binary grids/prototypes/transforms, JSON lines.

Binary files are little-endian.  Voxel-ordered payloads (VXG1 grids and PRO1
prototype tensors) are written with x fastest, then y, then z, channels
innermost, i.e. value (x, y, z, ch) sits at offset ((z*h + y)*w + x)*c + ch.
"""

import json
import os
import struct

import numpy as np
from PIL import Image

from .detect import Box3D, LabeledProposal, Proposal
from .geometry import CameraIntrinsics, CameraPose, GridSpec, PosedImage, VoxelGrid
from .mine import Correspondence, FeatureTransform, Patch
from .quantize import ParseRecord, Prototype, PrototypeDictionary, SceneParse

VXG_MAGIC = b"VXG1"
PRO_MAGIC = b"PRO1"
FTR_MAGIC = b"FTR1"


class FormatError(ValueError):
    pass


def _check_magic(buf, magic, path):
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header")


def _to_file_order(tensor):
    """[x, y, z, c] -> flat f32 in (z, y, x, c) order."""
    return np.ascontiguousarray(np.asarray(tensor).transpose(2, 1, 0, 3), dtype="<f4").ravel()


def _from_file_order(flat, w, h, d, c):
    return np.asarray(flat, dtype="<f4").reshape(d, h, w, c).transpose(2, 1, 0, 3).astype(np.float64)


def write_atomic(path, data):
    """Write bytes or text through a temporary file so readers never see partial files."""
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


# voxel grids

def voxel_grid_bytes(grid):
    w, h, d = grid.spec.resolution
    c = grid.channels
    head = VXG_MAGIC + struct.pack("<4I", w, h, d, c)
    head += struct.pack("<6f", *grid.spec.aabb_min, *grid.spec.aabb_max)
    return head + _to_file_order(grid.data).tobytes()


def write_voxel_grid(path, grid):
    write_atomic(path, voxel_grid_bytes(grid))


def read_voxel_grid(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, VXG_MAGIC, path)
    w, h, d, c = struct.unpack_from("<4I", buf, 4)
    bounds = struct.unpack_from("<6f", buf, 20)
    flat = np.frombuffer(buf, dtype="<f4", offset=44)
    if flat.size != w * h * d * c:
        raise FormatError(f"{path}: payload size does not match header")
    spec = GridSpec(tuple(float(v) for v in bounds[:3]), tuple(float(v) for v in bounds[3:]), (w, h, d))
    return VoxelGrid(spec, _from_file_order(flat, w, h, d, c))


# prototypes

def dictionary_bytes(dictionary):
    protos = dictionary.prototypes
    c = protos[0].tensor.shape[-1] if protos else 0
    out = [PRO_MAGIC, struct.pack("<2I", len(protos), c)]
    for p in protos:
        out.append(struct.pack("<2I", p.id, p.assigned_count))
        out.append(_to_file_order(p.tensor).tobytes())
    return b"".join(out)


def write_dictionary(path, dictionary):
    write_atomic(path, dictionary_bytes(dictionary))


def read_dictionary(path, K_max=50, diversity_thresh=0.8, size=16):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, PRO_MAGIC, path)
    k, c = struct.unpack_from("<2I", buf, 4)
    n = size ** 3 * c
    off = 12
    protos = []
    for _ in range(k):
        pid, count = struct.unpack_from("<2I", buf, off)
        off += 8
        flat = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        off += 4 * n
        protos.append(Prototype(int(pid), _from_file_order(flat, size, size, size, c), int(count)))
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after {k} prototypes")
    return PrototypeDictionary(protos, K_max, diversity_thresh)


# feature transforms

def transform_bytes(transform):
    head = FTR_MAGIC + struct.pack("<2I", transform.c_out, transform.c_in)
    return head + np.asarray(transform.weights, dtype="<f4").tobytes() + np.asarray(transform.bias, dtype="<f4").tobytes()


def write_transform(path, transform):
    write_atomic(path, transform_bytes(transform))


def read_transform(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, FTR_MAGIC, path)
    co, ci = struct.unpack_from("<2I", buf, 4)
    w = np.frombuffer(buf, dtype="<f4", count=co * ci, offset=12).reshape(co, ci)
    b = np.frombuffer(buf, dtype="<f4", count=co, offset=12 + 4 * co * ci)
    return FeatureTransform(w.astype(np.float64), b.astype(np.float64))


def as_f32(a):
    """Round to the precision stored on disk (keeps in-memory and reloaded state identical)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# JSON lines

def dumps_jsonl(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def loads_jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def proposal_record(p):
    if isinstance(p, LabeledProposal):
        return p.to_dict()
    return {"box": p.box.to_list(), "confidence": float(p.confidence)}


def proposal_from_record(r):
    return Proposal(Box3D.from_list(r["box"]), r["confidence"])


def write_proposals(path, proposals):
    write_atomic(path, dumps_jsonl(proposal_record(p) for p in proposals))


def read_proposals(path):
    with open(path) as fh:
        return [proposal_from_record(r) for r in loads_jsonl(fh.read())]


def write_correspondences(path, corrs):
    write_atomic(path, dumps_jsonl(c.to_dict() for c in corrs))


def correspondence_from_record(r, query_pool, target_pool):
    """Rebuild a Correspondence, re-reading patch data from the pools it indexes.

    Target patches are cut from the target turned by the recorded rotation,
    as they were when mined.
    """
    from .mine import PATCH
    from .voxel import rotate_tensor

    def patch(side, pool):
        ref = tuple(r[side]["object"])
        corner = tuple(r[side]["corner"])
        t = pool[ref[1]]
        if side == "target":
            t = rotate_tensor(t, r["rotation_deg"])
        return Patch(ref, corner, np.array(t[corner[0]:corner[0] + PATCH, corner[1]:corner[1] + PATCH,
                                              corner[2]:corner[2] + PATCH], dtype=np.float64))

    return Correspondence(patch("query", query_pool), patch("target", target_pool), r["rotation_deg"],
                          r["verify_score"], r["polarity"])


def scene_parse_json(parse):
    return json.dumps(parse.to_list(), sort_keys=True, indent=1)


def scene_parse_from_json(text):
    return SceneParse([
        ParseRecord(Box3D.from_list(r["box"]), r["prototype"], r["rotation_deg"], r["confidence"])
        for r in json.loads(text)
    ])


# scene datasets

def write_scene(directory, views, gt=None):
    """Write one scene: 8-bit RGB and 16-bit millimeter depth PNGs plus cameras.json."""
    os.makedirs(directory, exist_ok=True)
    cams = []
    for i, v in enumerate(views):
        rgb = np.clip(np.round(v.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(os.path.join(directory, f"view_{i:03d}_rgb.png"))
        mm = np.clip(np.round(v.depth * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(directory, f"view_{i:03d}_depth.png"))
        k = v.intrinsics
        cams.append({
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height,
            "world_to_cam": [float(x) for x in np.asarray(v.pose.transform).ravel()],
        })
    write_atomic(os.path.join(directory, "cameras.json"), json.dumps(cams, indent=1))
    if gt is not None:
        write_atomic(os.path.join(directory, "gt.json"), json.dumps(gt.to_dict(), indent=1))


def read_scene(directory):
    """Read a scene directory; returns ``(views, SceneGT or None)``."""
    from .synth import SceneGT

    with open(os.path.join(directory, "cameras.json")) as fh:
        cams = json.load(fh)
    views = []
    for i, cam in enumerate(cams):
        rgb = np.asarray(Image.open(os.path.join(directory, f"view_{i:03d}_rgb.png")).convert("RGB"),
                         dtype=np.float64) / 255.0
        depth = np.asarray(Image.open(os.path.join(directory, f"view_{i:03d}_depth.png")),
                           dtype=np.float64) / 1000.0
        h, w = depth.shape
        intr = CameraIntrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam.get("width", w), cam.get("height", h))
        pose = CameraPose(np.asarray(cam["world_to_cam"], dtype=np.float64).reshape(4, 4))
        views.append(PosedImage(rgb, depth, intr, pose))
    gt = None
    gt_path = os.path.join(directory, "gt.json")
    if os.path.exists(gt_path):
        with open(gt_path) as fh:
            gt = SceneGT.from_dict(json.load(fh))
    return views, gt


def scene_dir(root, index):
    return os.path.join(root, f"scene_{index:04d}")


def write_dataset(root, scenes, meta):
    """Write scenes under ``root/scene_%04d`` and a ``dataset.json`` with ``meta``."""
    os.makedirs(root, exist_ok=True)
    for i, (views, gt) in enumerate(scenes):
        write_scene(scene_dir(root, i), views, gt)
    write_atomic(os.path.join(root, "dataset.json"), json.dumps(dict(meta, scenes=len(scenes)), indent=1,
                                                                 sort_keys=True))


def read_dataset_meta(root):
    path = os.path.join(root, "dataset.json")
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return json.load(fh)


def list_scenes(root):
    """Scene directories under ``root`` in index order (``root`` itself if it is a scene)."""
    if os.path.exists(os.path.join(root, "cameras.json")):
        return [root]
    return sorted(
        os.path.join(root, n) for n in os.listdir(root)
        if n.startswith("scene_") and os.path.exists(os.path.join(root, n, "cameras.json"))
    )


def read_dataset(root):
    return [read_scene(d) for d in list_scenes(root)]
