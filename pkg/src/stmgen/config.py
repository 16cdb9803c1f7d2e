"""Run configuration: every tunable with a default, hashed for provenance.

The full hash stamps artifacts; the shape hash covers only the keys that
determine parameter shapes, so evaluation can refuse a checkpoint trained
with an incompatible architecture while tolerating, say, a different batch
size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .fusion import FUSION_KINDS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model architecture
    fusion_kind: str = "parallel_cross"
    d_model: int = 64
    d_text: int = 64
    d_cond: int = 128
    num_blocks: int = 2
    num_joints: int = 8
    # data
    n_frames: int = 40
    max_frames: int = 64
    n_points: int = 2048
    local_k: int = 16
    global_subset: int = 256
    # diffusion schedule
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    # with 100 steps the schedule must reach near-zero terminal alpha-bar
    # (~2e-5 here) or sampling would start from noise levels training
    # never visited
    beta_end: float = 0.2
    # optimization
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 2000
    checkpoint_every: int = 1000
    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_foot: float = 1.0
    # evaluation
    tau_col: float = 0.05
    tau_con: float = 0.05
    k_per_condition: int = 4
    pool_size: int = 8
    match_steps: int = 600
    match_batch: int = 8
    match_lr: float = 3e-3
    match_d_model: int = 32
    match_embed_dim: int = 32
    fid_shrinkage: float = 1e-6

    # keys that fix parameter shapes (and hence checkpoint compatibility)
    SHAPE_KEYS = ("fusion_kind", "d_model", "d_text", "d_cond", "num_blocks",
                  "num_joints", "max_frames", "diffusion_steps",
                  "beta_start", "beta_end")

    def __post_init__(self):
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion_kind!r}")
        for key in ("d_model", "d_text", "d_cond", "num_blocks", "num_joints",
                    "n_frames", "n_points", "diffusion_steps", "batch_size",
                    "train_steps", "k_per_condition", "pool_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.n_frames > self.max_frames:
            raise ValueError("n_frames exceeds max_frames")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def d_pose(self):
        return 6 * self.num_joints + 3

    def config_hash(self):
        return _hash_dict(self.to_dict())

    def shape_hash(self):
        d = self.to_dict()
        return _hash_dict({k: d[k] for k in self.SHAPE_KEYS})


def _hash_dict(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
