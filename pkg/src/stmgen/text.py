"""Text handling: tokenizer, vocabulary, caption templates, toy encoder.

The encoder is a small trainable stand-in for a pretrained language model:
token embeddings + fixed sinusoidal positions + two self-attention blocks,
with padded positions masked out of attention. It emits token-level
features so downstream fusion can cross-attend per token.
"""

from __future__ import annotations

import re
import string

import numpy as np

from . import nn
from .autodiff import Tensor, take_rows

MAX_LEN = 32
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

MOTION_SCRIPTS = ("walk_to", "sit_on", "climb_stairs", "circle", "wave")

# verb/referent pools; index order matters for the seeded template draws
VERB_POOLS = {
    "walk_to": ("moves towards", "walks towards", "heads to"),
    "sit_on": ("takes a seat on", "sits down on", "lowers onto"),
    "climb_stairs": ("ascends", "walks forward and climbs", "goes up"),
    "circle": ("circles around", "walks in a circle around", "loops around"),
    "wave": ("greets near", "waves near", "waves a hand near"),
}
REFERENT_POOLS = {
    "flat": ("the open ground", "the flat ground"),
    "stairs": ("the staircase", "the stairs"),
    "box_room": ("the low box", "the box"),
    "corridor": ("the hallway", "the corridor"),
    "dynamic_walker": ("the walking person", "the passerby"),
}
# manner qualifiers appended per (script, variant); they change the motion,
# not just the phrasing, so retrieval can tell variants apart
QUALIFIER_POOLS = {
    ("walk_to", "short"): ("for a short distance", "for a few steps"),
    ("walk_to", "long"): ("for a long distance", "for a long stretch"),
    ("circle", "cw"): ("clockwise", "in the clockwise direction"),
    ("circle", "ccw"): ("counterclockwise",
                        "in the counterclockwise direction"),
    ("wave", "gentle"): ("gently", "softly"),
    ("wave", "vigorous"): ("vigorously", "energetically"),
}
SCRIPT_VARIANTS = {
    "walk_to": ("short", "long"),
    "circle": ("cw", "ccw"),
    "wave": ("gentle", "vigorous"),
    "sit_on": ("",),
    "climb_stairs": ("",),
}


def tokenize_words(text):
    """Lowercase, strip punctuation, split on whitespace."""
    text = text.lower()
    text = re.sub(f"[{re.escape(string.punctuation)}]", " ", text)
    return text.split()


def synth_caption(scene_kind, motion_script, seed, variant=""):
    """Deterministic templated caption naming the action, a scene referent,
    and (for scripts with variants) the manner of the motion."""
    if motion_script not in VERB_POOLS:
        raise ValueError(f"unknown motion script {motion_script!r}")
    if scene_kind not in REFERENT_POOLS:
        raise ValueError(f"unknown scene kind {scene_kind!r}")
    if variant and (motion_script, variant) not in QUALIFIER_POOLS:
        raise ValueError(f"unknown variant {variant!r} for {motion_script!r}")
    rng = np.random.default_rng(seed)
    verb = VERB_POOLS[motion_script][rng.integers(len(VERB_POOLS[motion_script]))]
    ref = REFERENT_POOLS[scene_kind][rng.integers(len(REFERENT_POOLS[scene_kind]))]
    text = f"the person {verb} {ref}"
    if variant:
        pool = QUALIFIER_POOLS[(motion_script, variant)]
        text += f" {pool[rng.integers(len(pool))]}"
    return text


def parse_caption(caption):
    """Invert a templated caption back to its (motion_script, scene_kind)."""
    script, kind, _ = caption_class(caption)
    return script, kind


def caption_class(caption):
    """(motion_script, scene_kind, variant) semantic label of a caption.

    Synonymous phrasings map to the same class; variant is "" for scripts
    without manner qualifiers.
    """
    text = " ".join(tokenize_words(caption))
    # longest phrase wins so overlapping templates cannot shadow each other
    verb_hits = [(len(v), script) for script, pool in VERB_POOLS.items()
                 for v in pool if v in text]
    ref_hits = [(len(r), kind) for kind, pool in REFERENT_POOLS.items()
                for r in pool if r in text]
    if not verb_hits or not ref_hits:
        raise ValueError(f"caption does not parse: {caption!r}")
    script = max(verb_hits)[1]
    qual_hits = [(len(q), variant)
                 for (s, variant), pool in QUALIFIER_POOLS.items()
                 if s == script for q in pool if q in text]
    variant = max(qual_hits)[1] if qual_hits else ""
    return script, max(ref_hits)[1], variant


def template_lexicon():
    words = set()
    pools = (list(VERB_POOLS.values()) + list(REFERENT_POOLS.values())
             + list(QUALIFIER_POOLS.values()))
    for pool in pools:
        for phrase in pool:
            words.update(tokenize_words(phrase))
    words.update(["the", "person"])
    return sorted(words)


class Vocabulary:
    """Dense token -> id map; specials first, then sorted corpus tokens."""

    def __init__(self, tokens=None):
        corpus = sorted(set(tokens if tokens is not None else template_lexicon()))
        self.id_to_token = list(SPECIALS) + [t for t in corpus
                                             if t not in SPECIALS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    @property
    def pad_id(self):
        return self.token_to_id[PAD]

    def encode(self, text):
        """Token ids with BOS/EOS, unpadded."""
        unk = self.token_to_id[UNK]
        ids = [self.token_to_id[BOS]]
        ids += [self.token_to_id.get(w, unk) for w in tokenize_words(text)]
        ids.append(self.token_to_id[EOS])
        if len(ids) > MAX_LEN:
            raise ValueError(f"prompt longer than {MAX_LEN} tokens")
        return ids

    def pad(self, ids):
        return ids + [self.pad_id] * (MAX_LEN - len(ids))

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            toks = [line.rstrip("\n") for line in f if line.strip()]
        if toks[:4] != list(SPECIALS):
            raise ValueError("vocabulary file missing special tokens")
        v = cls.__new__(cls)
        v.id_to_token = toks
        v.token_to_id = {t: i for i, t in enumerate(toks)}
        return v


NEG_INF = -1e9


def pad_mask(ids_batch, pad_id):
    """Additive attention mask (B, 1, L): NEG_INF on pad key positions."""
    ids = np.asarray(ids_batch)
    return np.where(ids == pad_id, NEG_INF, 0.0)[:, None, :]


class TextEncoder(nn.Module):
    """Embedding + sinusoidal positions + 2 masked self-attention blocks."""

    def __init__(self, vocab_size, d_text=64, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_text = d_text
        self.embed = self.add_param(
            "embed", rng.standard_normal((vocab_size, d_text)) * 0.05, dtype)
        self.pos = nn.sinusoidal_embedding(np.arange(MAX_LEN), d_text, dtype)
        self.block1 = self.add_child("block1",
                                     nn.SelfAttentionBlock(d_text, rng, dtype=dtype))
        self.block2 = self.add_child("block2",
                                     nn.SelfAttentionBlock(d_text, rng, dtype=dtype))

    def __call__(self, ids_batch, pad_id):
        """Encode padded id batch (B, MAX_LEN) -> features (B, MAX_LEN, d)."""
        ids = np.asarray(ids_batch)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != MAX_LEN:
            raise ValueError(f"ids must be padded to length {MAX_LEN}")
        mask = pad_mask(ids, pad_id)
        x = take_rows(self.embed, ids) + Tensor(
            np.broadcast_to(self.pos, (ids.shape[0], MAX_LEN, self.d_text)).copy())
        x = self.block1(x, mask=mask)
        x = self.block2(x, mask=mask)
        return x
