"""Evaluation driver: sample per test condition, score everything, report.

The report is JSON with a fixed key order so byte-level reproducibility is
trivial to check; a human-readable table accompanies it. The human-rated
plausibility study has no automated counterpart and is flagged as not
computable.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .checkpoint import load_checkpoint
from .dataset import load_records, split_records
from .metrics import (apd_std, contact_score, fid, non_collision_score,
                      pose_feature_block, r_score, train_matching_model)
from .motion import decode_features
from .text import caption_class
from .train import (condition_for, default_vocab, restore_model,
                    sample_features)

REPORT_KEYS = ("non_collision", "contact", "apd_t", "std_t", "apd_p",
               "std_p", "apd_m", "std_m", "fid", "r_score", "n_conditions",
               "k_per_condition", "config_hash")


def report_to_json(report):
    ordered = {k: report[k] for k in REPORT_KEYS}
    return json.dumps(ordered, separators=(",", ":")) + "\n"


def report_from_json(text):
    report = json.loads(text)
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise ValueError(f"report is missing keys: {', '.join(missing)}")
    return report


def report_table(report):
    lines = ["metric            value",
             "----------------  ----------"]
    for k in REPORT_KEYS[:-3]:
        lines.append(f"{k:<16}  {report[k]:.6g}")
    lines.append(f"{'n_conditions':<16}  {report['n_conditions']}")
    lines.append(f"{'k_per_condition':<16}  {report['k_per_condition']}")
    lines.append("p_score           n/a (human-rated; not computable)")
    return "\n".join(lines) + "\n"


def _canonical_captions(captions):
    """One representative caption (lexicographically first) per semantic
    class; unparseable captions represent themselves."""
    canon = {}
    for c in sorted(captions):
        try:
            label = caption_class(c)
        except ValueError:
            label = c
        canon.setdefault(label, c)
    return canon


def _canonical(caption, canon):
    try:
        return canon.get(caption_class(caption), caption)
    except ValueError:
        return caption


def evaluate(cfg, manifest_path, checkpoint_path, out_dir=None, seed=None,
             gt_as_generated=False):
    """Score the checkpoint on the manifest's test split.

    Samples k_per_condition motions per test record, computes every metric,
    and (when out_dir is given) writes report.json plus report.txt.
    `gt_as_generated` scores the ground-truth motions through the same
    machinery, which calibrates the FID floor.
    """
    seed = cfg.seed if seed is None else seed
    if cfg.k_per_condition < 2:
        raise ValueError("k_per_condition must be >= 2 (diversity needs it)")
    vocab = default_vocab()
    loaded = load_records(manifest_path, cfg, vocab)
    train_recs = split_records(loaded, "train")
    test_recs = split_records(loaded, "test")
    if not test_recs:
        raise ValueError("manifest has no test records")

    meta, arrays = load_checkpoint(checkpoint_path)
    model = restore_model(cfg, meta, arrays, vocab)
    mean = arrays["feat_mean"].astype(np.float64)
    std = arrays["feat_std"].astype(np.float64)

    canon = _canonical_captions(
        {c for r in loaded for c in r.record.captions})
    matcher = train_matching_model(
        np.stack([r.features for r in train_recs]),
        [_canonical(r.caption, canon) for r in train_recs], vocab,
        steps=cfg.match_steps, batch=min(cfg.match_batch, len(train_recs)),
        lr=cfg.match_lr, d_model=cfg.match_d_model, seed=seed,
        feat_mean=mean, feat_std=std, embed_dim=cfg.match_embed_dim)

    gen_feats, gen_captions = [], []
    per_cond = {"nc": [], "contact": [], "apd_t": [], "std_t": [],
                "apd_p": [], "std_p": [], "apd_m": [], "std_m": []}
    K = cfg.k_per_condition
    for i, rec in enumerate(test_recs):
        if gt_as_generated:
            feats = np.repeat(rec.features[None], K, axis=0)
        else:
            z_c = condition_for(model, cfg, rec.scene, rec.caption)
            feats = sample_features(model, cfg, z_c, K,
                                    seed=int(np.random.SeedSequence(
                                        (seed, i)).generate_state(1)[0]),
                                    mean=mean, std=std)
        # anchor decoded motions at the record's world start so scene
        # metrics compare like with like
        anchor_xy, anchor_yaw = rec.root_init
        joints = [decode_features(f, anchor_xy, anchor_yaw,
                                  num_joints=cfg.num_joints)[1]
                  for f in feats]
        roots = np.stack([j[:, 0] for j in joints])
        markers = np.stack(joints)
        per_cond["nc"].append(np.mean([
            non_collision_score(j, rec.scene, cfg.tau_col) for j in joints]))
        per_cond["contact"].append(
            contact_score(joints, rec.scene, cfg.tau_con))
        for mode, data in (("t", roots),
                           ("p", pose_feature_block(feats)),
                           ("m", markers)):
            a, s = apd_std(data, mode)
            per_cond[f"apd_{mode}"].append(a)
            per_cond[f"std_{mode}"].append(s)
        gen_feats.extend(feats)
        gen_captions.extend([rec.caption] * K)

    gen_feats = np.stack(gen_feats)
    ref_feats = np.stack([r.features for r in loaded])
    fid_value = fid(gen_feats, ref_feats, matcher,
                    shrinkage=cfg.fid_shrinkage)
    # retrieval is scored over one canonical caption per semantic class so
    # synonymous phrasings of the same instruction never act as distractors
    pool = sorted(canon.values())
    r_captions = [_canonical(c, canon) for c in gen_captions]
    r_value = r_score(gen_feats, r_captions, matcher,
                      pool_size=cfg.pool_size, seed=seed, caption_pool=pool)

    report = {
        "non_collision": float(np.mean(per_cond["nc"])),
        "contact": float(np.mean(per_cond["contact"])),
        "apd_t": float(np.mean(per_cond["apd_t"])),
        "std_t": float(np.mean(per_cond["std_t"])),
        "apd_p": float(np.mean(per_cond["apd_p"])),
        "std_p": float(np.mean(per_cond["std_p"])),
        "apd_m": float(np.mean(per_cond["apd_m"])),
        "std_m": float(np.mean(per_cond["std_m"])),
        "fid": float(fid_value),
        "r_score": float(r_value),
        "n_conditions": len(test_recs),
        "k_per_condition": K,
        "config_hash": cfg.config_hash(),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(report_to_json(report))
        with open(os.path.join(out_dir, "report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(report_table(report))
    return report


def ablate(cfg, manifest_path, variants, out_dir, seed=None):
    """Train and evaluate each fusion variant with identical data order and
    seeds; rows are written incrementally so a late failure preserves the
    completed ones."""
    from .train import train  # local import to keep module load cheap

    if len(variants) < 2:
        raise ValueError("ablation needs at least two variants")
    seed = cfg.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    rows_path = os.path.join(out_dir, "ablation.jsonl")
    rows = []
    with open(rows_path, "w", encoding="utf-8") as fh:
        for variant in variants:
            vcfg = cfg.replace(fusion_kind=variant, seed=seed)
            vdir = os.path.join(out_dir, variant)
            ckpt = train(vcfg, manifest_path, vdir)
            report = evaluate(vcfg, manifest_path, ckpt, out_dir=vdir,
                              seed=seed)
            with open(os.path.join(vdir, "loss.csv"),
                      encoding="utf-8") as lf:
                last = lf.readlines()[-1].strip().split(",")
            row = {"variant": variant, "final_train_loss": float(last[-1])}
            row.update({k: report[k] for k in REPORT_KEYS})
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            fh.flush()
    with open(os.path.join(out_dir, "ablation.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(ablation_table(rows))
    return rows


def ablation_table(rows):
    cols = ["variant", "final_train_loss", "non_collision", "contact",
            "apd_t", "apd_p", "apd_m", "fid", "r_score"]
    widths = {c: max(len(c), 14) for c in cols}
    header = "  ".join(c.ljust(widths[c]) for c in cols)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = [str(row["variant"]).ljust(widths["variant"])]
        cells += [f"{row[c]:.6g}".ljust(widths[c]) for c in cols[1:]]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
