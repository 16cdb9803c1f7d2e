"""Evaluation metrics: plausibility, diversity, FID, retrieval score.

Physical scores query the scene's oriented point set; diversity scores are
pairwise distances across the samples generated for one condition; FID and
the retrieval score run on embeddings from a contrastively trained
motion/text matching model.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .autodiff import Tensor, no_grad, softmax
from .scene import signed_distances
from .text import TextEncoder

EMBED_DIM = 32
DEFAULT_TAU = 0.05


# -- physical plausibility -------------------------------------------------------


def _frame_clouds(scene, n_frames):
    if scene.dynamic_frames:
        return [scene.frame_cloud(i) for i in range(n_frames)]
    return None


def non_collision_score(joints, scene, tau=DEFAULT_TAU):
    """Fraction of (frame, joint) queries with signed distance >= -tau.

    `joints` is (N, J, 3) world positions; dynamic scenes are evaluated
    against the frame-matched cloud.
    """
    if scene.size == 0:
        raise ValueError("empty scene")
    joints = np.asarray(joints, dtype=np.float64)
    n, j, _ = joints.shape
    per_frame = _frame_clouds(scene, n)
    if per_frame is None:
        _, _, signed = signed_distances(scene, joints.reshape(-1, 3))
    else:
        signed = np.concatenate([
            signed_distances(per_frame[i], joints[i])[2] for i in range(n)])
    return float((signed >= -tau).mean())


def contact_score(joint_sets, scene, tau=DEFAULT_TAU):
    """Fraction of sequences with at least one body point within tau of the
    scene (unsigned distance, <= comparison)."""
    if not joint_sets:
        raise ValueError("empty motion set")
    hits = 0
    for joints in joint_sets:
        joints = np.asarray(joints, dtype=np.float64)
        n = joints.shape[0]
        per_frame = _frame_clouds(scene, n)
        if per_frame is None:
            _, dist, _ = signed_distances(scene, joints.reshape(-1, 3))
        else:
            dist = np.concatenate([
                signed_distances(per_frame[i], joints[i])[1] for i in range(n)])
        hits += bool((dist <= tau).any())
    return hits / len(joint_sets)


# -- diversity -------------------------------------------------------------------


APD_MODES = ("t", "p", "m")


def _pair_distance(a, b):
    """Mean (over frames, and markers for mode "m") Euclidean distance."""
    return float(np.linalg.norm(a - b, axis=-1).mean())


def apd_std(samples, mode):
    """(APD, std) over K >= 2 samples of one condition.

    `samples` is (K, N, 3) root translations for mode "t", (K, N, d) pose
    feature blocks for "p", or (K, N, J, 3) markers for "m". APD is the
    mean pairwise distance; std is the standard deviation across samples of
    each sample's mean deviation from the sample mean.
    """
    if mode not in APD_MODES:
        raise ValueError(f"unknown APD mode {mode!r}")
    samples = np.asarray(samples, dtype=np.float64)
    K = samples.shape[0]
    if K < 2:
        raise ValueError("diversity needs K >= 2 samples")
    total = 0.0
    for i in range(K):
        for j in range(i + 1, K):
            total += _pair_distance(samples[i], samples[j])
    apd = 2.0 * total / (K * (K - 1))
    center = samples.mean(axis=0)
    devs = np.array([_pair_distance(samples[i], center) for i in range(K)])
    return apd, float(devs.std())


def pose_feature_block(features):
    """The non-translation slice of hml-lite-v1 features (drops the root
    yaw-velocity/planar-velocity/height fields)."""
    return np.asarray(features)[..., 4:]


# -- FID -------------------------------------------------------------------------


def frechet_distance(mu1, sigma1, mu2, sigma2, psd_tol=1e-6):
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) via eigendecomposition."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), \
        np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    s1 = (s1 + s1.T) / 2
    s2 = (s2 + s2.T) / 2
    scale = max(np.abs(s1).max(), np.abs(s2).max(), 1.0)
    for s in (s1, s2):
        w = np.linalg.eigvalsh(s)
        if w.min() < -psd_tol * scale:
            raise ValueError("covariance is not PSD within tolerance")
    w1, v1 = np.linalg.eigh(s1)
    w1 = np.clip(w1, 0, None)
    root1 = (v1 * np.sqrt(w1)) @ v1.T
    inner = root1 @ s2 @ root1
    inner = (inner + inner.T) / 2
    wi = np.clip(np.linalg.eigvalsh(inner), 0, None)
    tr_sqrt = np.sqrt(wi).sum()
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2)
                - 2 * tr_sqrt)
    return max(val, 0.0)


def gaussian_moments(embeddings, shrinkage=1e-6):
    e = np.asarray(embeddings, dtype=np.float64)
    mu = e.mean(axis=0)
    cov = np.cov(e, rowvar=False) + shrinkage * np.eye(e.shape[1])
    return mu, cov


def fid(generated, reference, model, shrinkage=1e-6):
    """Frechet distance between Gaussian fits of embedded motion sets."""
    eg = model.embed_motions(generated)
    er = model.embed_motions(reference)
    dim = eg.shape[1]
    if len(eg) < dim + 1 or len(er) < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per side")
    return frechet_distance(*gaussian_moments(eg, shrinkage),
                            *gaussian_moments(er, shrinkage))


# -- retrieval -------------------------------------------------------------------


def r_score(motions, captions, model, pool_size=32, seed=0,
            caption_pool=None):
    """Top-1 retrieval accuracy of the true caption among seeded distractors.

    Ties count as failures. Distractors are drawn (without duplicates in a
    pool) from `caption_pool`, defaulting to the given captions.
    """
    if len(motions) != len(captions):
        raise ValueError("motions and captions must align")
    if len(motions) < 1:
        raise ValueError("empty evaluation set")
    pool_src = list(caption_pool if caption_pool is not None else captions)
    distinct = sorted(set(pool_src))
    if len(distinct) < pool_size:
        raise ValueError(f"need {pool_size} distinct captions, "
                         f"have {len(distinct)}")
    rng = np.random.default_rng(seed)
    m_emb = model.embed_motions(motions)
    text_cache = {c: e for c, e in zip(distinct,
                                       model.embed_texts(distinct))}
    hits = 0
    for i, cap in enumerate(captions):
        others = [c for c in distinct if c != cap]
        picks = rng.choice(len(others), size=pool_size - 1, replace=False)
        sims_true = float(m_emb[i] @ text_cache.get(cap,
                                                    model.embed_texts([cap])[0]))
        sims_dis = np.array([m_emb[i] @ text_cache[others[p]] for p in picks])
        hits += bool(sims_true > sims_dis.max())
    return hits / len(captions)


# -- matching model ----------------------------------------------------------------


class MatchingModel(nn.Module):
    """Contrastive motion/text embedder onto the unit sphere (32-dim).

    The motion branch (frame transformer + mean pool) doubles as the FID
    feature extractor.
    """

    def __init__(self, d_pose, vocab, d_model=32, rng=None, dtype=np.float64,
                 max_frames=64, feat_mean=None, feat_std=None,
                 embed_dim=EMBED_DIM):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.vocab = vocab
        self.d_pose = d_pose
        self.embed_dim = embed_dim
        self.feat_mean = (np.zeros(d_pose) if feat_mean is None
                          else np.asarray(feat_mean, dtype=np.float64))
        self.feat_std = (np.ones(d_pose) if feat_std is None
                         else np.asarray(feat_std, dtype=np.float64))
        self.m_in = self.add_child("m_in", nn.Linear(d_pose, d_model, rng, dtype))
        self.m_block = self.add_child("m_block",
                                      nn.SelfAttentionBlock(d_model, rng, dtype=dtype))
        self.m_out = self.add_child("m_out",
                                    nn.Linear(d_model, embed_dim, rng, dtype))
        self.text_enc = self.add_child("text_enc",
                                       TextEncoder(len(vocab), d_text=d_model,
                                                   rng=rng, dtype=dtype))
        self.t_out = self.add_child("t_out",
                                    nn.Linear(d_model, embed_dim, rng, dtype))
        self.log_scale = self.add_param("log_scale", np.zeros(()), dtype)
        self.pos = nn.sinusoidal_embedding(np.arange(max_frames), d_model, dtype)

    @staticmethod
    def _normalize(x):
        n = ((x * x).sum(axis=-1, keepdims=True) + 1e-12).pow(-0.5)
        return x * n

    def motion_embedding(self, feats):
        """`feats` (B, N, d_pose) raw features -> unit embeddings (B, 32)."""
        feats = (np.asarray(feats, dtype=np.float64) - self.feat_mean) \
            / self.feat_std
        x = self.m_in(Tensor(feats.astype(self.m_in.w.dtype)))
        B, N, d = x.shape
        x = x + Tensor(np.broadcast_to(self.pos[:N], (B, N, d)).copy())
        x = self.m_block(x)
        return self._normalize(self.m_out(x.mean(axis=1)))

    def text_embedding(self, texts):
        ids = np.array([self.vocab.pad(self.vocab.encode(t)) for t in texts])
        feats = self.text_enc(ids, self.vocab.pad_id)
        keep = (ids != self.vocab.pad_id).astype(np.float64)
        w = keep / keep.sum(axis=1, keepdims=True)
        pooled = (feats * Tensor(w[:, :, None].astype(feats.dtype))).sum(axis=1)
        return self._normalize(self.t_out(pooled))

    def embed_motions(self, feats):
        with no_grad():
            return self.motion_embedding(feats).data

    def embed_texts(self, texts):
        with no_grad():
            return self.text_embedding(texts).data


def contrastive_loss(model, feats, texts):
    """Symmetric in-batch InfoNCE; ~ln(batch) at random initialization."""
    me = model.motion_embedding(feats)
    te = model.text_embedding(texts)
    scale = model.log_scale.exp()
    logits = me.matmul(te.transpose()) * scale
    B = logits.shape[0]
    diag = (np.arange(B), np.arange(B))
    l1 = -(softmax(logits, axis=-1)[diag]).log().mean()
    l2 = -(softmax(logits.transpose(), axis=-1)[diag]).log().mean()
    return (l1 + l2) * 0.5


def in_batch_accuracy(model, feats, texts):
    me = model.embed_motions(feats)
    te = model.embed_texts(texts)
    sims = me @ te.T
    return float((sims.argmax(axis=1) == np.arange(len(texts))).mean())


def train_matching_model(feats, captions, vocab, steps=600, batch=8,
                         lr=1e-3, seed=0, d_model=32, feat_mean=None,
                         feat_std=None, embed_dim=EMBED_DIM):
    """Train the contrastive matching model on matched (motion, caption)
    pairs; deterministic given the seed."""
    feats = np.asarray(feats)
    n = len(feats)
    if n < batch:
        raise ValueError("dataset smaller than one batch")
    if len(set(captions)) < 2:
        raise ValueError("degenerate dataset: a single caption")
    rng = np.random.default_rng(seed)
    model = MatchingModel(feats.shape[-1], vocab, d_model=d_model,
                          rng=rng, dtype=np.float64,
                          max_frames=feats.shape[1],
                          feat_mean=feat_mean, feat_std=feat_std,
                          embed_dim=embed_dim)
    opt = nn.Adam(model.params(), lr=lr)
    for step in range(steps):
        srng = np.random.default_rng(np.random.SeedSequence((seed, step)))
        idx = srng.choice(n, size=batch, replace=False)
        loss = contrastive_loss(model, feats[idx], [captions[i] for i in idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model
