"""Corpus plumbing: synthetic dataset generation, the JSON-Lines manifest,
the external-data importer, and precomputation for training.

Each record pairs one scene (ASCII PLY) with one scripted motion
(motion-json-v1) and at least one caption. Scripted motions are
scene-consistent by construction: walking stays on the ground, sitting
perches on the box edge, climbing follows the generated stair profile.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .motion import (MotionSequence, decode_features, default_skeleton,
                     encode_features, read_motion_json, write_motion_json,
                     ROOT_HEIGHT_STAND)
from .fusion import canonical_order, scene_encoding_indices
from .scene import (ScenePointCloud, SceneSpec, fps_indices, read_ply,
                    synth_scene, write_ply)
from .text import synth_caption

SPLITS = ("train", "test")

# (scene kind, motion script, variant) mix cycled over record indices; test
# records are every fifth index so a size-10 corpus splits exactly 8/2.
# Every class has a distinct motion signature (distance, turn direction,
# sway intensity, height profile) so captions are identifiable from motion.
CORPUS_MIX = (
    ("flat", "walk_to", "short"),
    ("stairs", "climb_stairs", ""),
    ("box_room", "sit_on", ""),
    ("corridor", "walk_to", "long"),
    ("flat", "circle", "ccw"),
    ("flat", "wave", "gentle"),
    ("flat", "circle", "cw"),
    ("flat", "wave", "vigorous"),
)


@dataclass(frozen=True)
class Record:
    id: str
    scene: str                 # path relative to the manifest directory
    motion: str
    captions: tuple
    split: str
    scene_kind: str
    motion_script: str
    dynamic: tuple = ()        # optional per-frame interactor clouds

    def to_json(self):
        return json.dumps({
            "id": self.id, "scene": self.scene, "motion": self.motion,
            "captions": list(self.captions), "split": self.split,
            "scene_kind": self.scene_kind,
            "motion_script": self.motion_script,
            "dynamic": list(self.dynamic),
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        known = {"id", "scene", "motion", "captions", "split", "scene_kind",
                 "motion_script", "dynamic"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown manifest keys: {', '.join(unknown)}")
        if d["split"] not in SPLITS:
            raise ValueError(f"record {d.get('id')}: bad split {d['split']!r}")
        if not d["captions"]:
            raise ValueError(f"record {d.get('id')}: no captions")
        return cls(id=d["id"], scene=d["scene"], motion=d["motion"],
                   captions=tuple(d["captions"]), split=d["split"],
                   scene_kind=d["scene_kind"],
                   motion_script=d["motion_script"],
                   dynamic=tuple(d.get("dynamic", ())))


# -- scripted motions ---------------------------------------------------------


def _base_rotations(n, yaw):
    rot = np.zeros((n, 8, 3))
    rot[:, 0, 2] = yaw
    return rot


def _walk_to_motion(n, rng, y_span=0.4, variant="short"):
    if variant == "long":
        x0, x1 = -1.7, 1.1
    else:
        x0, x1 = -0.6, 0.6
    x = np.linspace(x0 + rng.uniform(-0.1, 0.1),
                    x1 + rng.uniform(-0.1, 0.1), n)
    y = np.full(n, rng.uniform(-y_span, y_span))
    root = np.stack([x, y, np.full(n, ROOT_HEIGHT_STAND)], axis=1)
    return MotionSequence(root, _base_rotations(n, np.zeros(n)))


def _circle_motion(n, rng, variant="ccw"):
    r = rng.uniform(0.7, 1.0)
    a0 = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(0.7, 1.0) * 2 * np.pi
    if variant == "cw":
        sweep = -sweep
    theta = a0 + np.linspace(0, sweep, n)
    root = np.stack([r * np.cos(theta), r * np.sin(theta),
                     np.full(n, ROOT_HEIGHT_STAND)], axis=1)
    yaw = theta + (np.pi / 2 if variant != "cw" else -np.pi / 2)
    return MotionSequence(root, _base_rotations(n, yaw))


def _wave_motion(n, rng, variant="gentle"):
    cx, cy = rng.uniform(-0.5, 0.5, size=2)
    yaw = rng.uniform(0, 2 * np.pi)
    root = np.tile([cx, cy, ROOT_HEIGHT_STAND], (n, 1))
    rot = _base_rotations(n, np.full(n, yaw))
    amp, hz = (0.12, 0.5) if variant == "gentle" else (0.5, 1.5)
    t = np.arange(n) / 10.0
    rot[:, 1, 0] = amp * np.sin(2 * np.pi * hz * t)  # spine sway = wave
    return MotionSequence(root, rot)


def _sit_on_motion(n, spec, rng):
    """Approach the box from -y beside it, turn, and sit on its near edge
    (legs folded forward so nothing enters the box volume)."""
    bx, _ = spec.box_center
    sx, _, sz = spec.box_size
    edge_x = bx + sx / 2
    stand_x = edge_x + 0.2
    n_walk, n_turn = 22, 7
    root = np.zeros((n, 3))
    rot = np.zeros((n, 8, 3))
    y0 = -1.6 + rng.uniform(-0.1, 0.1)
    # walk alongside the box
    root[:n_walk, 0] = stand_x
    root[:n_walk, 1] = np.linspace(y0, 0.0, n_walk)
    root[:n_walk, 2] = ROOT_HEIGHT_STAND
    rot[:n_walk, 0, 2] = np.pi / 2
    # turn in place to face +x (away from the box)
    turn = np.linspace(np.pi / 2, 0.0, n_turn + 1)[1:]
    root[n_walk:n_walk + n_turn] = (stand_x, 0.0, ROOT_HEIGHT_STAND)
    rot[n_walk:n_walk + n_turn, 0, 2] = turn
    # fold the knees and lower onto the edge
    n_sit = n - n_walk - n_turn
    bend = np.linspace(0.0, np.pi / 2, n_sit)
    root[n_walk + n_turn:, 0] = stand_x - 0.14 * (bend / (np.pi / 2))
    root[n_walk + n_turn:, 2] = sz + 0.02 + 0.4 * np.cos(bend)
    rot[n_walk + n_turn:, 3, 1] = -bend
    rot[n_walk + n_turn:, 5, 1] = -bend
    return MotionSequence(root, rot)


def _stair_floor_height(x, spec):
    """Tread height under x for the generated staircase."""
    top = spec.num_steps * spec.step_rise
    below = x < 0
    step = np.minimum(np.floor(np.maximum(x, 0.0) / spec.step_run) + 1,
                      spec.num_steps) * spec.step_rise
    return np.where(below, 0.0, np.minimum(step, top))


def _climb_stairs_motion(n, spec, rng):
    top_x = spec.num_steps * spec.step_run
    x = np.linspace(-1.8 + rng.uniform(-0.1, 0.1),
                    min(top_x + 0.4, 1.9), n)
    y = np.full(n, rng.uniform(-0.2, 0.2))
    # clearance: stand on the highest tread within a fore/aft window, plus a
    # small lift over the steps so feet never graze a riser
    window = np.linspace(-0.25, 0.25, 11)
    base = np.max(_stair_floor_height(x[:, None] + window[None, :], spec),
                  axis=1)
    z = ROOT_HEIGHT_STAND + base + np.where(base > 0, 0.06, 0.0)
    root = np.stack([x, y, z], axis=1)
    return MotionSequence(root, _base_rotations(n, np.zeros(n)))


def scripted_motion(scene_kind, motion_script, spec, n_frames, rng,
                    variant=""):
    if motion_script == "walk_to":
        span = 0.4 if scene_kind != "corridor" else 0.3
        return _walk_to_motion(n_frames, rng, span, variant or "short")
    if motion_script == "circle":
        return _circle_motion(n_frames, rng, variant or "ccw")
    if motion_script == "wave":
        return _wave_motion(n_frames, rng, variant or "gentle")
    if motion_script == "sit_on":
        return _sit_on_motion(n_frames, spec, rng)
    if motion_script == "climb_stairs":
        return _climb_stairs_motion(n_frames, spec, rng)
    raise ValueError(f"unknown motion script {motion_script!r}")


def _scene_spec(kind, rng):
    if kind == "stairs":
        return SceneSpec(kind="stairs", extent=4.0,
                         num_steps=int(rng.integers(3, 6)),
                         step_run=float(rng.choice([0.25, 0.3, 0.35])))
    if kind == "box_room":
        return SceneSpec(kind="box_room", extent=4.0,
                         box_center=(float(rng.choice([0.6, 0.8, 1.0])), 0.0))
    if kind == "corridor":
        return SceneSpec(kind="corridor", extent=4.0,
                         corridor_width=float(rng.choice([2.4, 3.0])))
    return SceneSpec(kind=kind, extent=4.0)


# -- generation -----------------------------------------------------------------


def gen_dataset(out_dir, size, seed, n_frames=40):
    """Write `size` records (scenes, motions, captions, manifest) under
    `out_dir`; byte-identical for a fixed (size, seed)."""
    if size < 1:
        raise ValueError("corpus size must be positive")
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "motions"), exist_ok=True)
    records = []
    for i in range(size):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        kind, script, variant = CORPUS_MIX[i % len(CORPUS_MIX)]
        spec = _scene_spec(kind, rng)
        scene = synth_scene(spec)
        motion = scripted_motion(kind, script, spec, n_frames, rng, variant)
        feats = encode_features(motion)
        cap_seed = int(rng.integers(2 ** 31))
        caption = synth_caption(kind, script, cap_seed, variant)
        rid = f"{i:04d}"
        scene_rel = f"scenes/{rid}.ply"
        motion_rel = f"motions/{rid}.json"
        write_ply(os.path.join(out_dir, scene_rel), scene)
        write_motion_json(
            os.path.join(out_dir, motion_rel), feats,
            root_init_pos=(*motion.root_translation[0][:2], 0.0),
            root_init_yaw=float(motion.root_yaw[0]))
        records.append(Record(
            id=rid, scene=scene_rel, motion=motion_rel, captions=(caption,),
            split="test" if i % 5 == 4 else "train",
            scene_kind=kind, motion_script=script))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(Record.from_json(line))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids in manifest")
    return records


# -- loading / precomputation ------------------------------------------------------


@dataclass
class LoadedRecord:
    """One manifest record with everything training and evaluation need."""

    record: Record
    scene: ScenePointCloud          # full cloud, for metrics
    features: np.ndarray            # (N, d_pose) raw motion features
    joints: np.ndarray              # (N, J, 3) ground-truth world joints
    caption: str
    root_init: tuple = ((0.0, 0.0), 0.0)   # world anchor: (x, y), yaw
    point_feats: np.ndarray = field(default=None)   # (M, 6) canonical order
    knn_idx: np.ndarray = field(default=None)
    subset_idx: np.ndarray = field(default=None)
    prop_pos: np.ndarray = field(default=None)
    token_ids: np.ndarray = field(default=None)


def load_records(manifest_path, cfg=None, vocab=None):
    """Read every manifest record, decode motions, and (when a config is
    given) precompute the canonical downsampled scene encoding inputs and
    padded caption tokens."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    loaded = []
    problems = []
    for rec in read_manifest(manifest_path):
        try:
            scene = read_ply(os.path.join(base, rec.scene))
            if rec.dynamic:
                frames = tuple(
                    _cloud_triplet(read_ply(os.path.join(base, p)))
                    for p in rec.dynamic)
                scene = replace(scene, dynamic_frames=frames)
            feats, _, J, root_init = read_motion_json(
                os.path.join(base, rec.motion))
            _, joints, _ = decode_features(feats, root_init[0][:2],
                                           root_init[1], num_joints=J)
        except (OSError, ValueError) as exc:
            problems.append(f"{rec.id}: {exc}")
            continue
        item = LoadedRecord(record=rec, scene=scene, features=feats,
                            joints=joints, caption=rec.captions[0],
                            root_init=(tuple(root_init[0][:2]),
                                       root_init[1]))
        if cfg is not None:
            _precompute(item, cfg, vocab)
        loaded.append(item)
    if problems:
        raise ValueError("manifest records failed to load: "
                         + "; ".join(problems))
    return loaded


def _cloud_triplet(cloud):
    return (cloud.points, cloud.colors, cloud.normals)


def scene_condition_inputs(cloud, n_points, local_k, global_subset):
    """Downsample, canonicalize, and index one scene for conditioning.

    The cloud is put in canonical (lexicographic) order before farthest-point
    sampling, so the result is bitwise independent of the stored point order.
    """
    base = canonical_order(cloud.points)
    all_pts = cloud.points[base]
    all_cols = cloud.colors[base]
    n = min(n_points, cloud.size)
    pick = fps_indices(all_pts, n, start=0)
    pts = all_pts[pick]
    order = canonical_order(pts)
    pts = pts[order]
    cols = all_cols[pick][order]
    feats = np.concatenate([pts, cols], axis=1)
    knn, sub, prop = scene_encoding_indices(pts, k=min(local_k, n),
                                            subset=min(global_subset, n))
    return feats, knn, sub, prop


def _precompute(item, cfg, vocab):
    (item.point_feats, item.knn_idx, item.subset_idx,
     item.prop_pos) = scene_condition_inputs(item.scene, cfg.n_points,
                                             cfg.local_k, cfg.global_subset)
    if vocab is not None:
        item.token_ids = np.asarray(vocab.pad(vocab.encode(item.caption)))


def split_records(loaded, split):
    return [r for r in loaded if r.record.split == split]


def feature_moments(loaded):
    """Per-dimension mean/std over all frames of the given records, floored
    to avoid dividing by (near-)constant channels."""
    allf = np.concatenate([r.features for r in loaded])
    mean = allf.mean(axis=0)
    std = np.maximum(allf.std(axis=0), 1e-3)
    return mean, std


# -- importer -----------------------------------------------------------------------


def import_external(src_dir, out_dir):
    """Validate and normalize an external corpus into manifest form.

    Expected layout under `src_dir`: scenes/<id>.ply, motions/<id>.json
    (either motion-json-v1 or raw {"root_translation", "rotations", "fps"}),
    captions.json mapping id -> list of captions. Returns (records,
    warnings); schema violations raise ValueError listing record ids.
    """
    os.makedirs(out_dir, exist_ok=True)
    scene_dir = os.path.join(src_dir, "scenes")
    motion_dir = os.path.join(src_dir, "motions")
    cap_path = os.path.join(src_dir, "captions.json")
    ids = sorted(os.path.splitext(f)[0]
                 for f in (os.listdir(scene_dir)
                           if os.path.isdir(scene_dir) else [])
                 if f.endswith(".ply"))
    warnings = []
    if not ids:
        write_manifest(os.path.join(out_dir, "manifest.jsonl"), [])
        warnings.append("no scene files found; wrote an empty manifest")
        return [], warnings
    captions = {}
    if os.path.exists(cap_path):
        with open(cap_path, encoding="utf-8") as fh:
            captions = json.load(fh)
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "motions"), exist_ok=True)
    records, problems = [], []
    for i, rid in enumerate(ids):
        try:
            cloud = read_ply(os.path.join(scene_dir, f"{rid}.ply"))
            feats, fps, J, root_init = _load_motion_any(
                os.path.join(motion_dir, f"{rid}.json"))
            caps = captions.get(rid, [])
            if not caps:
                raise ValueError("missing captions")
        except (OSError, ValueError) as exc:
            problems.append(f"{rid}: {exc}")
            continue
        scene_rel = f"scenes/{rid}.ply"
        motion_rel = f"motions/{rid}.json"
        write_ply(os.path.join(out_dir, scene_rel), cloud)
        write_motion_json(os.path.join(out_dir, motion_rel), feats, fps=fps,
                          num_joints=J, root_init_pos=root_init[0],
                          root_init_yaw=root_init[1])
        records.append(Record(
            id=rid, scene=scene_rel, motion=motion_rel, captions=tuple(caps),
            split="test" if i % 5 == 4 else "train",
            scene_kind="imported", motion_script="imported"))
    if problems:
        raise ValueError("invalid records: " + "; ".join(problems))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records, warnings


def _load_motion_any(path):
    """Accept motion-json-v1 directly, or raw joint data re-encoded via the
    skeleton's forward kinematics."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if "layout" in obj:
        feats, fps, J, root_init = read_motion_json(path)
        return feats, fps, J, (tuple(root_init[0]), root_init[1])
    if "root_translation" not in obj or "rotations" not in obj:
        raise ValueError("unrecognized motion schema")
    motion = MotionSequence(np.asarray(obj["root_translation"], dtype=np.float64),
                            np.asarray(obj["rotations"], dtype=np.float64),
                            skeleton=default_skeleton(),
                            fps=float(obj.get("fps", 10.0)))
    feats = encode_features(motion)
    root_init = ((float(motion.root_translation[0, 0]),
                  float(motion.root_translation[0, 1]), 0.0),
                 float(motion.root_yaw[0]))
    return feats, motion.fps, motion.skeleton.joint_count, root_init
