"""Multi-condition fusion: scene/text features -> condition vector z_c.

The main path self-enhances both modalities, re-injects raw point
coordinates into the scene features, runs a parallel pair of
cross-attention arms (text queries scene; scene queries text), pools, and
projects to the condition width. Four ablation variants share the same
interface: scene-queried dual fusion, text-queried dual fusion, triple
fusion with.a similarity map, and plain concat + self-attention.

Scene point order: all scene inputs are expected in canonical order (see
:func:`canonical_order`). Because every reduction then runs in that fixed
order, the pooled condition is bitwise invariant to how the caller
originally ordered the points.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .autodiff import Tensor, concat, softmax, take_rows_batched

FUSION_KINDS = ("parallel_cross", "scene_queried", "text_queried", "triple",
                "concat_self")

LOCAL_K = 16
GLOBAL_SUBSET = 256


def canonical_order(points):
    """Permutation sorting points lexicographically by (x, y, z)."""
    pts = np.asarray(points)
    return np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))


def scene_encoding_indices(points, k=LOCAL_K, subset=GLOBAL_SUBSET):
    """Precompute neighbor structure for one cloud (canonical order).

    Returns (knn_idx (M,k), subset_idx (G,), prop_idx (M,)). All ties are
    broken toward the lower canonical index, so the result is a pure
    function of the point multiset.
    """
    pts = np.asarray(points, dtype=np.float64)
    M = len(pts)
    k = min(k, M)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    knn_idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    G = min(subset, M)
    subset_idx = _fps_canonical(pts, G)
    dsub = d2[:, subset_idx]
    prop_idx = subset_idx[np.argmin(dsub, axis=1)]
    # map cloud index -> position inside the subset
    pos = {int(s): i for i, s in enumerate(subset_idx)}
    prop_pos = np.array([pos[int(i)] for i in prop_idx])
    return knn_idx, subset_idx, prop_pos


def _fps_canonical(pts, n):
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0   # canonical order: index 0 is the lexicographic minimum
    mind = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, n):
        nxt = int(mind.argmax())
        chosen[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


class SceneEncoder(nn.Module):
    """Simplified point attention encoder: shared pointwise map, k-NN local
    attention, and one global self-attention block over an FPS subset whose
    update is propagated back by nearest-subset assignment."""

    def __init__(self, d_model, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = self.add_child("fc1", nn.Linear(6, d_model, rng, dtype))
        self.fc2 = self.add_child("fc2", nn.Linear(d_model, d_model, rng, dtype))
        self.local = self.add_child("local",
                                    nn.Attention(d_model, d_model, d_model, rng, dtype))
        self.glob = self.add_child("glob",
                                   nn.SelfAttentionBlock(d_model, rng, dtype=dtype))

    def __call__(self, f_p, knn_idx, subset_idx, prop_pos):
        """`f_p` (B, M, 6) -> features (B, M, d)."""
        if f_p.shape[-2] < 1:
            raise ValueError("empty cloud")
        B, M, _ = f_p.shape
        x = self.fc2(self.fc1(f_p).gelu())
        nbr = take_rows_batched(x, np.broadcast_to(knn_idx, (B,) + knn_idx.shape[-2:]))
        q = x.reshape(B, M, 1, x.shape[-1])
        x = x + self.local(q, nbr).reshape(B, M, x.shape[-1])
        sub = take_rows_batched(x, np.broadcast_to(subset_idx, (B,) + subset_idx.shape[-1:]))
        delta = self.glob(sub) - sub
        x = x + take_rows_batched(delta, np.broadcast_to(prop_pos, (B,) + prop_pos.shape[-1:]))
        return x


def masked_mean(x, mask=None):
    """Mean over axis 1; `mask` (B, L) with 1 for kept rows."""
    if mask is None:
        return x.mean(axis=1)
    w = np.asarray(mask, dtype=x.dtype)
    w = w / w.sum(axis=1, keepdims=True)
    return (x * Tensor(w[:, :, None])).sum(axis=1)


class FusionModule(nn.Module):
    """One fusion strategy behind a common condition-building interface."""

    def __init__(self, kind, d_model=64, d_text=64, d_cond=128, rng=None,
                 dtype=np.float32):
        super().__init__()
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        rng = rng or np.random.default_rng(0)
        self.kind = kind
        self.d_model = d_model
        self.d_cond = d_cond
        self.scene_encoder = self.add_child("scene_encoder",
                                            SceneEncoder(d_model, rng, dtype))
        self.text_proj = self.add_child("text_proj",
                                        nn.Linear(d_text, d_model, rng, dtype))
        self.text_sa = self.add_child("text_sa",
                                      nn.Attention(d_model, d_model, d_model, rng, dtype))
        self.scene_sa = self.add_child("scene_sa",
                                       nn.Attention(d_model, d_model, d_model, rng, dtype))
        self.pos_inject_fc = self.add_child("pos_inject_fc",
                                            nn.Linear(d_model + 6, d_model, rng, dtype))
        if kind in ("parallel_cross", "triple", "text_queried"):
            self.arm_text = self.add_child("arm_text",
                                           nn.CrossFuseBlock(d_model, rng, dtype=dtype))
        if kind in ("parallel_cross", "scene_queried"):
            self.arm_scene = self.add_child("arm_scene",
                                            nn.CrossFuseBlock(d_model, rng, dtype=dtype))
        if kind == "scene_queried":
            self.arm_scene2 = self.add_child("arm_scene2",
                                             nn.CrossFuseBlock(d_model, rng, dtype=dtype))
        if kind == "text_queried":
            self.arm_text2 = self.add_child("arm_text2",
                                            nn.CrossFuseBlock(d_model, rng, dtype=dtype))
        if kind == "concat_self":
            self.mix = self.add_child("mix",
                                      nn.SelfAttentionBlock(d_model, rng, dtype=dtype))
        widths = {"parallel_cross": 3, "scene_queried": 2, "text_queried": 2,
                  "triple": 3, "concat_self": 1}
        self.out = self.add_child("out",
                                  nn.Linear(widths[kind] * d_model, d_cond, rng, dtype))

    # -- pipeline stages ------------------------------------------------------

    def encode_scene(self, f_p, knn_idx, subset_idx, prop_pos):
        return self.scene_encoder(f_p, knn_idx, subset_idx, prop_pos)

    def self_enhance(self, F_p, F_l, text_mask=None):
        """Residual self-attention per modality. Text is projected to the
        shared width first; `text_mask` is additive (B, 1, L)."""
        F_l = self.text_proj(F_l)
        F_l_enh = F_l + self.text_sa(F_l, F_l, mask=text_mask)
        F_p_enh = F_p + self.scene_sa(F_p, F_p)
        return F_p_enh, F_l_enh

    def position_inject(self, F_p_enh, f_p):
        if F_p_enh.shape[-2] != f_p.shape[-2]:
            raise ValueError("row count mismatch between features and raw points")
        return self.pos_inject_fc(concat([F_p_enh, f_p], axis=-1))

    def parallel_cross_fuse(self, F_l_enh, F_pc, text_mask=None):
        """Eq-style parallel arms: F_L queries text, F_P queries scene."""
        F_L = self.arm_text(F_l_enh, F_pc)
        F_P = self.arm_scene(F_pc, F_l_enh, mask=text_mask)
        return F_L, F_P

    def make_condition(self, F_l_enh, F_P, F_L, keep_mask=None):
        parts = [masked_mean(F_l_enh, keep_mask), masked_mean(F_P),
                 masked_mean(F_L, keep_mask)]
        return self.out(concat(parts, axis=-1))

    # -- variants ------------------------------------------------------------

    def fuse(self, F_l_enh, F_pc, text_mask=None, keep_mask=None):
        """Produce z_c (B, d_cond) from enhanced text and injected scene."""
        if self.kind == "parallel_cross":
            F_L, F_P = self.parallel_cross_fuse(F_l_enh, F_pc, text_mask)
            return self.make_condition(F_l_enh, F_P, F_L, keep_mask)
        if self.kind == "scene_queried":
            F_pq = self.arm_scene(F_pc, F_l_enh, mask=text_mask)
            F_P = self.arm_scene2(F_pc, F_pq)
            parts = [masked_mean(F_P), masked_mean(F_l_enh, keep_mask)]
            return self.out(concat(parts, axis=-1))
        if self.kind == "text_queried":
            F_lq = self.arm_text(F_l_enh, F_pc)
            F_L = self.arm_text2(F_l_enh, F_lq)
            parts = [masked_mean(F_L, keep_mask), masked_mean(F_l_enh, keep_mask)]
            return self.out(concat(parts, axis=-1))
        if self.kind == "triple":
            F_L = self.arm_text(F_l_enh, F_pc)
            W = self.similarity_map(F_pc, F_l_enh)
            F_P2 = W.swap_last().matmul(F_pc)   # (B, L, d), convex per token
            parts = [masked_mean(F_P2, keep_mask), masked_mean(F_l_enh, keep_mask),
                     masked_mean(F_L, keep_mask)]
            return self.out(concat(parts, axis=-1))
        # concat_self: stack both token sets and mix with one block
        B, L, _ = F_l_enh.shape
        M = F_pc.shape[-2]
        joint = concat([F_l_enh, F_pc], axis=1)
        if text_mask is not None:
            mask = np.concatenate(
                [np.broadcast_to(text_mask, (B, 1, L)),
                 np.zeros((B, 1, M), dtype=text_mask.dtype)], axis=-1)
        else:
            mask = None
        mixed = self.mix(joint, mask=mask)
        if keep_mask is None:
            keep = np.ones((B, L + M))
        else:
            keep = np.concatenate([np.asarray(keep_mask),
                                   np.ones((B, M))], axis=1)
        return self.out(masked_mean(mixed, keep))

    def similarity_map(self, F_pc, F_l_enh):
        """W (B, M, L): softmax over the scene axis, columns sum to 1.

        Pad-token columns still produce a valid distribution; their fused
        rows are dropped by the pooling mask downstream.
        """
        return softmax(F_pc.matmul(F_l_enh.swap_last()), axis=-2)

    # -- full pipeline ---------------------------------------------------------

    def condition(self, f_p, knn_idx, subset_idx, prop_pos, F_l,
                  text_mask=None, keep_mask=None):
        """End to end: raw points + text features -> z_c (B, d_cond)."""
        F_p = self.encode_scene(f_p, knn_idx, subset_idx, prop_pos)
        F_p_enh, F_l_enh = self.self_enhance(F_p, F_l, text_mask)
        F_pc = self.position_inject(F_p_enh, f_p)
        return self.fuse(F_l_enh, F_pc, text_mask, keep_mask)
