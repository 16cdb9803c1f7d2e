"""DDPM over motion feature sequences: schedule, denoiser, losses, sampler.

The model predicts the clean motion directly (x0-prediction): the denoiser
is a small transformer over frame tokens plus one condition token formed
from the fused scene/text embedding and a sinusoidal timestep embedding.
Sampling iterates the standard DDPM posterior step using the predicted
clean motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import Tensor, concat, mse, no_grad, stack


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables: betas in (0,1), alpha_bar strictly decreasing."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a 1-D array")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """alpha_bar at step t with the t=0 -> 1 convention."""
        if t == 0:
            return 1.0
        return self.alpha_bars[t - 1]


def build_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta interpolation over T steps."""
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def q_sample(x0, t, eps, schedule):
    """Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not (0 <= t <= schedule.T):
        raise ValueError(f"t={t} out of range [0, {schedule.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0's shape")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def p_sample_step(x_t, x0_hat, t, schedule, noise=None):
    """One reverse step from the DDPM posterior q(x_{t-1} | x_t, x0_hat).

    At t=1 the posterior mean equals x0_hat exactly and no noise is added.
    """
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t={t} out of range [1, {schedule.T}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if t == 1:
        # the posterior collapses onto the clean estimate: mean = x0_hat,
        # variance 0; returning it directly avoids a 0/0-adjacent rounding
        return x0_hat.copy()
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_hat + ct * x_t
    if t == 1 or noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * np.asarray(noise)


class Denoiser(nn.Module):
    """Transformer over N_m frame tokens plus one condition token."""

    def __init__(self, d_pose, d_model=64, d_cond=128, num_blocks=2,
                 max_frames=64, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_pose = d_pose
        self.d_model = d_model
        self.in_proj = self.add_child("in_proj",
                                      nn.Linear(d_pose, d_model, rng, dtype))
        self.cond_proj = self.add_child("cond_proj",
                                        nn.Linear(d_cond, d_model, rng, dtype))
        self.t_fc1 = self.add_child("t_fc1", nn.Linear(d_model, d_model, rng, dtype))
        self.t_fc2 = self.add_child("t_fc2", nn.Linear(d_model, d_model, rng, dtype))
        self.blocks = [self.add_child(f"block{i}",
                                      nn.SelfAttentionBlock(d_model, rng, dtype=dtype))
                       for i in range(num_blocks)]
        self.out_ln = self.add_child("out_ln", nn.LayerNorm(d_model, dtype))
        self.out_proj = self.add_child("out_proj",
                                       nn.Linear(d_model, d_pose, rng, dtype))
        self.pos = nn.sinusoidal_embedding(np.arange(max_frames + 1), d_model,
                                           dtype)
        self.dtype = dtype

    def timestep_embedding(self, t_batch):
        emb = nn.sinusoidal_embedding(np.asarray(t_batch, dtype=np.float64),
                                      self.d_model, self.dtype)
        return self.t_fc2(self.t_fc1(Tensor(emb)).gelu())

    def __call__(self, x_t, t_batch, z_c):
        """Predict x0: `x_t` (B, N, d_pose), `t_batch` (B,), `z_c` (B, d_cond)."""
        if isinstance(x_t, np.ndarray):
            x_t = Tensor(x_t.astype(self.dtype))
        B, N, _ = x_t.shape
        tok = self.in_proj(x_t)
        cond = self.cond_proj(z_c) + self.timestep_embedding(t_batch)
        seq = concat([cond.reshape(B, 1, self.d_model), tok], axis=1)
        seq = seq + Tensor(np.broadcast_to(self.pos[:N + 1],
                                           (B, N + 1, self.d_model)).copy())
        for blk in self.blocks:
            seq = blk(seq)
        frames = seq[:, 1:, :]
        return self.out_proj(self.out_ln(frames))


def sample(model, z_c, n_frames, schedule, seed=0, rng=None):
    """Iterative reverse-chain sampling; deterministic given the seed.

    `model(x_t, t_batch, z_c)` must return the x0 prediction. Output is a
    (B, n_frames, d_pose) numpy array of motion features.
    """
    rng = rng or np.random.default_rng(seed)
    B = z_c.shape[0]
    shape = (B, n_frames, model.d_pose)
    x = rng.standard_normal(shape)
    with no_grad():
        for t in range(schedule.T, 0, -1):
            x0_hat = model(x, np.full(B, t), z_c).data.astype(np.float64)
            noise = rng.standard_normal(shape) if t > 1 else None
            x = p_sample_step(x, x0_hat, t, schedule, noise)
    return x


@dataclass
class LossReport:
    motion: float
    position: float
    velocity: float
    foot: float
    total: float

    def as_dict(self):
        return {"motion": self.motion, "position": self.position,
                "velocity": self.velocity, "foot": self.foot,
                "total": self.total}


class GeometricDecoder:
    """Differentiable feature -> world joint position decoder.

    Mirrors motion.decode_features on the autodiff tape so geometric losses
    can train through the reconstruction. Operates on unstandardized
    features (B, N, d_pose) with the motion anchored at the origin.
    """

    def __init__(self, num_joints):
        self.J = num_joints

    def joints(self, feats):
        B, N, _ = feats.shape
        J = self.J
        yaw_vel = feats[:, :, 0]
        planar_vel = feats[:, :, 1:3]
        height = feats[:, :, 3]
        local = feats[:, :, 4:4 + 3 * (J - 1)].reshape(B, N, J - 1, 3)

        zero = Tensor(np.zeros((B, 1), dtype=feats.dtype))
        yaw = concat([zero, yaw_vel[:, :-1]], axis=1).cumsum(axis=1)
        c, s = yaw.cos(), yaw.sin()
        vx, vy = planar_vel[:, :, 0], planar_vel[:, :, 1]
        step_x = c * vx - s * vy
        step_y = s * vx + c * vy
        root_x = concat([zero, step_x[:, :-1]], axis=1).cumsum(axis=1)
        root_y = concat([zero, step_y[:, :-1]], axis=1).cumsum(axis=1)
        root = stack([root_x, root_y, height], axis=-1)          # (B, N, 3)

        lx, ly, lz = local[..., 0], local[..., 1], local[..., 2]
        cj, sj = c.reshape(B, N, 1), s.reshape(B, N, 1)
        wx = cj * lx - sj * ly + root_x.reshape(B, N, 1)
        wy = sj * lx + cj * ly + root_y.reshape(B, N, 1)
        wz = lz + height.reshape(B, N, 1)
        others = stack([wx, wy, wz], axis=-1)                    # (B, N, J-1, 3)
        return concat([root.reshape(B, N, 1, 3), others], axis=2)


def training_loss(model, decoder, x0, x_t, t_batch, z_c, contact_flags,
                  feat_mean=None, feat_std=None,
                  lambda_pos=1.0, lambda_vel=1.0, lambda_foot=1.0,
                  foot_joints=(4, 6), frame_mask=None):
    """Reconstruction loss plus geometric terms on decoded joint positions.

    `x0`/`x_t` are (B, N, d_pose) standardized features; `contact_flags`
    (B, N, 2) are ground-truth foot contacts. Returns (total Tensor,
    LossReport). `frame_mask` (B, N) excludes padded frames.
    """
    pred = model(x_t, t_batch, z_c)
    x0_t = Tensor(np.asarray(x0, dtype=pred.dtype))
    if frame_mask is None:
        w = None
        l_motion = mse(pred, x0_t)
    else:
        w = np.asarray(frame_mask, dtype=pred.dtype)[:, :, None]
        denom = w.sum() * x0.shape[-1]
        diff = (pred - x0_t) * Tensor(w)
        l_motion = (diff * diff).sum() * (1.0 / denom)

    if feat_mean is not None:
        scale = Tensor(np.asarray(feat_std, dtype=pred.dtype))
        offset = Tensor(np.asarray(feat_mean, dtype=pred.dtype))
        pred_raw = pred * scale + offset
        x0_raw = x0_t * scale + offset
    else:
        pred_raw, x0_raw = pred, x0_t

    joints_pred = decoder.joints(pred_raw)
    joints_true = decoder.joints(x0_raw)
    if w is None:
        l_pos = mse(joints_pred, joints_true)
    else:
        wj = w[:, :, :, None]
        d = (joints_pred - joints_true) * Tensor(wj)
        l_pos = (d * d).sum() * (1.0 / (w.sum() * decoder.J * 3))

    vel_pred = joints_pred[:, 1:] - joints_pred[:, :-1]
    vel_true = joints_true[:, 1:] - joints_true[:, :-1]
    if w is None:
        l_vel = mse(vel_pred, vel_true)
        wv = None
    else:
        wv = (w[:, 1:] * w[:, :-1])[:, :, :, None]
        d = (vel_pred - vel_true) * Tensor(wv)
        l_vel = (d * d).sum() * (1.0 / max(wv.sum() * decoder.J * 3, 1.0))

    fj = list(foot_joints)
    foot_vel = vel_pred[:, :, fj, :] - vel_true[:, :, fj, :]
    flags = np.asarray(contact_flags, dtype=pred.dtype)[:, :-1, :, None]
    if wv is not None:
        flags = flags * wv[:, :, :1, :]
    fd = foot_vel * Tensor(flags)
    l_foot = (fd * fd).sum() * (1.0 / max(flags.sum() * 3, 1.0))

    total = (l_motion + lambda_pos * l_pos + lambda_vel * l_vel
             + lambda_foot * l_foot)
    report = LossReport(motion=float(l_motion.item()),
                        position=float(l_pos.item()),
                        velocity=float(l_vel.item()),
                        foot=float(l_foot.item()),
                        total=float(total.item()))
    return total, report
