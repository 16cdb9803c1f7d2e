"""Model assembly, the deterministic training loop, and sampling.

Every step's batch indices, timesteps, and noise come from a fresh RNG
seeded by (run seed, step index), and parameters/optimizer moments live in
float32 — so resuming from a checkpoint continues the interrupted run
bitwise.
"""

from __future__ import annotations

import os

import numpy as np

from . import nn
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import (feature_moments, load_records,
                      scene_condition_inputs, split_records)
from .diffusion import (Denoiser, GeometricDecoder, build_schedule,
                        p_sample_step, training_loss)
from .fusion import FusionModule
from .text import TextEncoder, Vocabulary, pad_mask, template_lexicon


def default_vocab():
    """The fixed template vocabulary; independent of any particular corpus
    so checkpoints stay portable."""
    return Vocabulary(template_lexicon())


class GenerativeModel(nn.Module):
    """Text encoder + fusion module + diffusion denoiser."""

    def __init__(self, cfg, vocab, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.vocab = vocab
        self.text_enc = self.add_child(
            "text_enc", TextEncoder(len(vocab), cfg.d_text, rng, dtype))
        self.fusion = self.add_child(
            "fusion", FusionModule(cfg.fusion_kind, cfg.d_model, cfg.d_text,
                                   cfg.d_cond, rng, dtype))
        self.denoiser = self.add_child(
            "denoiser", Denoiser(cfg.d_pose, cfg.d_model, cfg.d_cond,
                                 cfg.num_blocks, cfg.max_frames, rng, dtype))
        self.dtype = dtype

    def condition(self, token_ids, point_feats, knn_idx, subset_idx,
                  prop_pos):
        """z_c (B, d_cond) from padded token ids and canonical scene inputs."""
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        F_l = self.text_enc(ids, self.vocab.pad_id)
        mask = pad_mask(ids, self.vocab.pad_id).astype(self.dtype)
        keep = (ids != self.vocab.pad_id).astype(np.float64)
        pts = point_feats
        if isinstance(pts, np.ndarray):
            pts = Tensor(pts.astype(self.dtype))
        return self.fusion.condition(pts, knn_idx, subset_idx, prop_pos,
                                     F_l, mask, keep)


def _stack_training_arrays(records, mean, std):
    """Dense per-record arrays; all scenes must share one downsampled size."""
    sizes = {r.point_feats.shape[0] for r in records}
    if len(sizes) != 1:
        raise ValueError("records have mismatched downsampled cloud sizes; "
                         "lower n_points to the smallest scene")
    x0 = np.stack([(r.features - mean) / std for r in records])
    return {
        "x0": x0.astype(np.float32),
        "flags": np.stack([r.features[:, -2:] for r in records]),
        "pts": np.stack([r.point_feats for r in records]).astype(np.float32),
        "knn": np.stack([r.knn_idx for r in records]),
        "sub": np.stack([r.subset_idx for r in records]),
        "prop": np.stack([r.prop_pos for r in records]),
        "ids": np.stack([r.token_ids for r in records]),
    }


def model_state_arrays(model, opt):
    arrays = {}
    for name, p in model.named_params():
        arrays[name] = p.data
    for i, (name, _) in enumerate(model.named_params()):
        arrays[f"opt.m/{name}"] = opt.m[i]
        arrays[f"opt.v/{name}"] = opt.v[i]
    return arrays


def save_training_checkpoint(path, cfg, model, opt, step, mean, std):
    arrays = model_state_arrays(model, opt)
    arrays["feat_mean"] = np.asarray(mean)
    arrays["feat_std"] = np.asarray(std)
    meta = {
        "fusion_kind": cfg.fusion_kind,
        "schedule": {"T": cfg.diffusion_steps,
                     "beta_start": cfg.beta_start,
                     "beta_end": cfg.beta_end},
        "config_hash": cfg.config_hash(),
        "shape_hash": cfg.shape_hash(),
        "step": step,
    }
    save_checkpoint(path, arrays, meta)


def restore_model(cfg, meta, arrays, vocab=None):
    """Rebuild a GenerativeModel from checkpoint contents, refusing
    checkpoints whose architecture disagrees with the config."""
    if meta["fusion_kind"] != cfg.fusion_kind:
        raise ValueError(
            f"checkpoint fusion variant {meta['fusion_kind']!r} does not "
            f"match config {cfg.fusion_kind!r}")
    if meta["shape_hash"] != cfg.shape_hash():
        raise ValueError("checkpoint was trained with an incompatible "
                         "architecture (shape-key hash mismatch)")
    vocab = vocab or default_vocab()
    model = GenerativeModel(cfg, vocab)
    for name, p in model.named_params():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint parameter {name} has shape "
                             f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(p.dtype)
    return model


def train(cfg, manifest_path, out_dir, resume_from=None):
    """Train on the manifest's train split; writes loss.csv and
    checkpoint(s) under out_dir. Returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    vocab = default_vocab()
    loaded = load_records(manifest_path, cfg, vocab)
    train_recs = split_records(loaded, "train")
    if len(train_recs) < 1:
        raise ValueError("manifest has no train records")
    mean, std = feature_moments(train_recs)
    data = _stack_training_arrays(train_recs, mean, std)
    R = data["x0"].shape[0]

    schedule = build_schedule(cfg.diffusion_steps, cfg.beta_start,
                              cfg.beta_end)
    decoder = GeometricDecoder(cfg.num_joints)
    model = GenerativeModel(cfg, vocab)
    opt = nn.Adam(model.params(), lr=cfg.lr)

    start_step = 0
    log_path = os.path.join(out_dir, "loss.csv")
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if meta["config_hash"] != cfg.config_hash():
            raise ValueError("checkpoint config hash does not match config")
        model = restore_model(cfg, meta, arrays, vocab)
        opt = nn.Adam(model.params(), lr=cfg.lr)
        named = dict(model.named_params())
        for i, name in enumerate(named):
            opt.m[i] = arrays[f"opt.m/{name}"].astype(np.float32)
            opt.v[i] = arrays[f"opt.v/{name}"].astype(np.float32)
        start_step = int(meta["step"])
        opt.step_count = start_step
    if start_step == 0:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("step,motion,position,velocity,foot,total\n")

    final_path = os.path.join(out_dir, "checkpoint.stmd")
    log = open(log_path, "a", encoding="utf-8")
    try:
        for step in range(start_step, cfg.train_steps):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed,
                                                                step)))
            idx = rng.integers(0, R, size=cfg.batch_size)
            t_batch = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
            eps = rng.standard_normal(data["x0"][idx].shape)
            x0 = data["x0"][idx].astype(np.float64)
            ab = schedule.alpha_bars[t_batch - 1][:, None, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

            z_c = model.condition(data["ids"][idx], data["pts"][idx],
                                  data["knn"][idx], data["sub"][idx],
                                  data["prop"][idx])
            total, rep = training_loss(
                model.denoiser, decoder, x0, x_t.astype(np.float32), t_batch,
                z_c, data["flags"][idx], mean, std,
                lambda_pos=cfg.lambda_pos, lambda_vel=cfg.lambda_vel,
                lambda_foot=cfg.lambda_foot)
            opt.zero_grad()
            total.backward()
            opt.step()
            log.write(f"{step},{rep.motion!r},{rep.position!r},"
                      f"{rep.velocity!r},{rep.foot!r},{rep.total!r}\n")
            done = step + 1
            if done % cfg.checkpoint_every == 0 and done != cfg.train_steps:
                save_training_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{done:06d}.stmd"),
                    cfg, model, opt, done, mean, std)
            if done == cfg.train_steps:
                save_training_checkpoint(final_path, cfg, model, opt, done,
                                         mean, std)
    finally:
        log.close()
    return final_path


# -- sampling ---------------------------------------------------------------------


def prepare_scene_inputs(cloud, cfg):
    """Downsample, canonicalize, and index one scene for conditioning."""
    return scene_condition_inputs(cloud, cfg.n_points, cfg.local_k,
                                  cfg.global_subset)


def sample_features(model, cfg, z_c, k, seed, mean, std):
    """Draw k motions conditioned on one z_c row; returns raw (k, N, d_pose)
    features, deterministic per (seed, sample index)."""
    schedule = build_schedule(cfg.diffusion_steps, cfg.beta_start,
                              cfg.beta_end)
    zk = Tensor(np.broadcast_to(z_c.data, (k,) + z_c.data.shape[1:]).copy())
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    shape = (k, cfg.n_frames, cfg.d_pose)
    x = rng.standard_normal(shape)
    with no_grad():
        for t in range(schedule.T, 0, -1):
            x0_hat = model.denoiser(x.astype(np.float32), np.full(k, t),
                                    zk).data.astype(np.float64)
            noise = rng.standard_normal(shape) if t > 1 else None
            x = p_sample_step(x, x0_hat, t, schedule, noise)
    return x * std + mean


def condition_for(model, cfg, cloud, caption):
    feats, knn, sub, prop = prepare_scene_inputs(cloud, cfg)
    ids = np.asarray(model.vocab.pad(model.vocab.encode(caption)))
    with no_grad():
        return model.condition(ids[None, :], feats[None], knn[None],
                               sub[None], prop[None])
