import json
import os
import shutil

import numpy as np
import pytest

from stmgen.checkpoint import load_checkpoint, save_checkpoint
from stmgen.cli import main as cli_main
from stmgen.config import RunConfig
from stmgen.dataset import (Record, gen_dataset, import_external,
                            load_records, read_manifest, split_records,
                            write_manifest)
from stmgen.evaluate import (REPORT_KEYS, ablate, evaluate, report_from_json,
                             report_to_json)
from stmgen.metrics import non_collision_score
from stmgen.motion import decode_features, read_motion_json
from stmgen.text import parse_caption
from stmgen.train import train

TINY = dict(n_points=64, global_subset=32, local_k=8, d_model=16, d_text=16,
            d_cond=24, diffusion_steps=10, batch_size=4, train_steps=6,
            checkpoint_every=3, match_steps=20, match_batch=4,
            match_d_model=16, match_embed_dim=4, k_per_condition=2,
            pool_size=4)


def tiny_cfg(**kw):
    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    gen_dataset(str(d), 15, seed=5)
    return str(d)


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(seed=2)
    ckpt = train(cfg, os.path.join(corpus, "manifest.jsonl"), str(d))
    return cfg, ckpt, str(d)


# -- config ----------------------------------------------------------------------


class TestConfig:
    def test_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_dict({"seed": 1, "bogus_key": 2})

    def test_hash_is_stable_and_sensitive(self):
        a = RunConfig(seed=1)
        assert a.config_hash() == RunConfig(seed=1).config_hash()
        assert a.config_hash() != RunConfig(seed=2).config_hash()

    def test_shape_hash_ignores_non_shape_keys(self):
        a = RunConfig(batch_size=16, lr=1e-4)
        b = RunConfig(batch_size=4, lr=1e-3)
        assert a.shape_hash() == b.shape_hash()
        assert a.shape_hash() != RunConfig(d_model=32).shape_hash()

    def test_save_load_round_trip(self, tmp_path):
        cfg = tiny_cfg(seed=9)
        p = tmp_path / "cfg.json"
        cfg.save(p)
        assert RunConfig.load(p) == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(fusion_kind="nope")
        with pytest.raises(ValueError):
            RunConfig(batch_size=0)
        with pytest.raises(ValueError):
            RunConfig(n_frames=100, max_frames=64)

    def test_pose_width_follows_joint_count(self):
        assert RunConfig(num_joints=8).d_pose == 51
        assert RunConfig(num_joints=23).d_pose == 141


# -- checkpoints -------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "c.stmd"
        arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "b": np.float32([1.5])}
        meta = {"fusion_kind": "triple", "step": 7,
                "schedule": {"T": 10, "beta_start": 1e-4, "beta_end": 0.02},
                "config_hash": "x", "shape_hash": "y"}
        save_checkpoint(p, arrays, meta)
        meta2, arrays2 = load_checkpoint(p)
        assert meta2 == meta
        assert list(arrays2) == ["w", "b"]
        for k in arrays:
            assert np.array_equal(arrays[k], arrays2[k])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.stmd", tmp_path / "b.stmd"
        arrays = {"x": np.random.default_rng(0).normal(
            size=(4, 5)).astype(np.float32)}
        meta = {"step": 1, "fusion_kind": "parallel_cross"}
        save_checkpoint(p1, arrays, meta)
        m, a = load_checkpoint(p1)
        save_checkpoint(p2, a, m)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.stmd"
        p.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "c.stmd"
        save_checkpoint(p, {"w": np.zeros((8, 8), np.float32)}, {"step": 0})
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(p)


# -- dataset generation ---------------------------------------------------------------


class TestGenDataset:
    def test_exact_split_for_size_10(self, tmp_path):
        recs = gen_dataset(str(tmp_path), 10, seed=0)
        splits = [r.split for r in recs]
        assert splits.count("train") == 8
        assert splits.count("test") == 2

    def test_rerun_is_byte_identical(self, tmp_path, corpus):
        gen_dataset(str(tmp_path), 15, seed=5)
        for root, _, files in os.walk(corpus):
            rel = os.path.relpath(root, corpus)
            for f in files:
                a = os.path.join(corpus, rel, f)
                b = os.path.join(str(tmp_path), rel, f)
                with open(a, "rb") as fa, open(b, "rb") as fb:
                    assert fa.read() == fb.read(), f
    def test_captions_parse_back_to_their_record(self, corpus):
        for rec in read_manifest(os.path.join(corpus, "manifest.jsonl")):
            script, kind = parse_caption(rec.captions[0])
            assert script == rec.motion_script
            assert kind == rec.scene_kind

    def test_ground_truth_motions_avoid_collisions(self, corpus):
        loaded = load_records(os.path.join(corpus, "manifest.jsonl"))
        for item in loaded:
            score = non_collision_score(item.joints, item.scene, tau=0.05)
            assert score >= 0.98, item.record.id

    def test_motion_files_decode_to_declared_frames(self, corpus):
        loaded = load_records(os.path.join(corpus, "manifest.jsonl"))
        for item in loaded:
            assert item.features.shape == (40, 51)
            assert item.joints.shape == (40, 8, 3)

    def test_manifest_round_trip_is_byte_identical(self, corpus, tmp_path):
        src = os.path.join(corpus, "manifest.jsonl")
        recs = read_manifest(src)
        dst = tmp_path / "manifest.jsonl"
        write_manifest(dst, recs)
        with open(src, "rb") as fa, open(dst, "rb") as fb:
            assert fa.read() == fb.read()

    def test_manifest_rejects_bad_records(self):
        good = json.loads(Record(
            id="a", scene="s", motion="m", captions=("c",), split="train",
            scene_kind="flat", motion_script="wave").to_json())
        bad = dict(good, split="validation")
        with pytest.raises(ValueError, match="bad split"):
            Record.from_json(json.dumps(bad))
        bad = dict(good, captions=[])
        with pytest.raises(ValueError, match="no captions"):
            Record.from_json(json.dumps(bad))
        bad = dict(good, extra_field=1)
        with pytest.raises(ValueError, match="unknown manifest keys"):
            Record.from_json(json.dumps(bad))

    def test_load_reports_broken_record_id(self, corpus, tmp_path):
        for name in ("scenes", "motions"):
            shutil.copytree(os.path.join(corpus, name), tmp_path / name)
        recs = read_manifest(os.path.join(corpus, "manifest.jsonl"))
        recs[3] = Record(**{**recs[3].__dict__, "motion": "motions/gone.json"})
        write_manifest(tmp_path / "manifest.jsonl", recs)
        with pytest.raises(ValueError, match=recs[3].id):
            load_records(str(tmp_path / "manifest.jsonl"))


# -- importer ---------------------------------------------------------------------


class TestImporter:
    def test_reimport_of_generated_corpus(self, corpus, tmp_path):
        caps = {r.id: list(r.captions)
                for r in read_manifest(os.path.join(corpus, "manifest.jsonl"))}
        src = tmp_path / "src"
        shutil.copytree(os.path.join(corpus, "scenes"), src / "scenes")
        shutil.copytree(os.path.join(corpus, "motions"), src / "motions")
        (src / "captions.json").write_text(json.dumps(caps))
        out = tmp_path / "out"
        records, warnings = import_external(str(src), str(out))
        assert not warnings
        assert len(records) == 15
        orig = read_manifest(os.path.join(corpus, "manifest.jsonl"))
        for a, b in zip(records, orig):
            assert a.id == b.id
            assert a.captions == b.captions
        loaded = load_records(str(out / "manifest.jsonl"))
        assert len(loaded) == 15

    def test_empty_input_warns_and_writes_empty_manifest(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        out = tmp_path / "out"
        out.mkdir()
        records, warnings = import_external(str(src), str(out))
        assert records == []
        assert warnings
        assert read_manifest(out / "manifest.jsonl") == []

    def test_missing_captions_rejected_with_id(self, corpus, tmp_path):
        src = tmp_path / "src"
        shutil.copytree(os.path.join(corpus, "scenes"), src / "scenes")
        shutil.copytree(os.path.join(corpus, "motions"), src / "motions")
        (src / "captions.json").write_text(json.dumps({"0000": ["ok"]}))
        with pytest.raises(ValueError, match="0001"):
            import_external(str(src), str(tmp_path / "out"))

    def test_raw_joint_data_is_reencoded(self, tmp_path):
        src = tmp_path / "src"
        (src / "scenes").mkdir(parents=True)
        (src / "motions").mkdir()
        from stmgen.scene import SceneSpec, synth_scene, write_ply
        write_ply(src / "scenes" / "m0.ply",
                  synth_scene(SceneSpec(kind="flat", extent=2.0)))
        n = 12
        raw = {"root_translation":
               [[0.1 * i, 0.0, 0.8] for i in range(n)],
               "rotations": [[[0.0] * 3] * 8 for _ in range(n)],
               "fps": 10.0}
        (src / "motions" / "m0.json").write_text(json.dumps(raw))
        (src / "captions.json").write_text(
            json.dumps({"m0": ["the person walks towards the open ground"]}))
        out = tmp_path / "out"
        records, _ = import_external(str(src), str(out))
        assert len(records) == 1
        feats, fps, J, root_init = read_motion_json(
            out / "motions" / "m0.json")
        assert feats.shape == (n, 51)
        root, joints, _ = decode_features(feats, root_init[0][:2],
                                          root_init[1])
        assert np.allclose(root[:, 0], [0.1 * i for i in range(n)],
                           atol=1e-9)


# -- training ----------------------------------------------------------------------


class TestTraining:
    def test_loss_log_and_checkpoints_exist(self, trained):
        cfg, ckpt, out = trained
        lines = open(os.path.join(out, "loss.csv")).read().strip().split("\n")
        assert lines[0] == "step,motion,position,velocity,foot,total"
        assert len(lines) == 1 + cfg.train_steps
        row = lines[1].split(",")
        assert int(row[0]) == 0
        assert all(np.isfinite(float(v)) for v in row[1:])
        assert os.path.exists(ckpt)
        assert os.path.exists(os.path.join(out, "checkpoint_000003.stmd"))

    def test_checkpoint_metadata(self, trained):
        cfg, ckpt, _ = trained
        meta, arrays = load_checkpoint(ckpt)
        assert meta["fusion_kind"] == cfg.fusion_kind
        assert meta["config_hash"] == cfg.config_hash()
        assert meta["schedule"] == {"T": cfg.diffusion_steps,
                                    "beta_start": cfg.beta_start,
                                    "beta_end": cfg.beta_end}
        assert meta["step"] == cfg.train_steps
        assert "feat_mean" in arrays and "feat_std" in arrays

    def test_resume_matches_uninterrupted_run_bitwise(self, corpus, trained,
                                                      tmp_path):
        cfg, full_ckpt, out = trained
        mid = os.path.join(out, "checkpoint_000003.stmd")
        resumed = train(cfg, os.path.join(corpus, "manifest.jsonl"),
                        str(tmp_path), resume_from=mid)
        with open(full_ckpt, "rb") as fa, open(resumed, "rb") as fb:
            assert fa.read() == fb.read()

    def test_resume_refuses_mismatched_config(self, corpus, trained,
                                              tmp_path):
        cfg, _, out = trained
        mid = os.path.join(out, "checkpoint_000003.stmd")
        other = cfg.replace(lr=cfg.lr * 2)
        with pytest.raises(ValueError, match="hash"):
            train(other, os.path.join(corpus, "manifest.jsonl"),
                  str(tmp_path), resume_from=mid)

    def test_retrain_is_byte_identical(self, corpus, trained, tmp_path):
        cfg, ckpt, _ = trained
        again = train(cfg, os.path.join(corpus, "manifest.jsonl"),
                      str(tmp_path))
        with open(ckpt, "rb") as fa, open(again, "rb") as fb:
            assert fa.read() == fb.read()


# -- sampling & evaluation -------------------------------------------------------------


class TestSampleEval:
    def test_cli_sample_writes_k_deterministic_files(self, corpus, trained,
                                                     tmp_path):
        cfg, ckpt, _ = trained
        cfg_path = tmp_path / "cfg.json"
        cfg.save(cfg_path)
        scene = os.path.join(corpus, "scenes", "0000.ply")
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            rc = cli_main(["sample", "--config", str(cfg_path),
                           "--checkpoint", ckpt, "--scene", scene,
                           "--caption", "the person walks towards the open ground",
                           "--k", "3", "--out", str(out)])
            assert rc == 0
            files = sorted(os.listdir(out))
            assert files == ["sample_000.json", "sample_001.json",
                             "sample_002.json"]
            outs.append([open(out / f, "rb").read() for f in files])
        assert outs[0] == outs[1]
        feats, _, J, root_init = read_motion_json(
            tmp_path / "s1" / "sample_000.json")
        assert feats.shape == (cfg.n_frames, 51)
        root, _, _ = decode_features(feats, root_init[0][:2], root_init[1])
        assert root[0, 0] == 0.0 and root[0, 1] == 0.0

    def test_report_structure_and_round_trip(self, corpus, trained,
                                             tmp_path):
        cfg, ckpt, _ = trained
        report = evaluate(cfg, os.path.join(corpus, "manifest.jsonl"), ckpt,
                          out_dir=str(tmp_path))
        text = open(tmp_path / "report.json").read()
        assert list(json.loads(text)) == list(REPORT_KEYS)
        assert report_from_json(text) == report
        assert report_to_json(report_from_json(text)) == text
        for k in ("non_collision", "contact", "r_score"):
            assert 0.0 <= report[k] <= 1.0
        assert report["fid"] >= 0.0
        assert all(np.isfinite(v) for k, v in report.items()
                   if isinstance(v, float))
        assert report["n_conditions"] == 3
        assert report["k_per_condition"] == cfg.k_per_condition
        assert report["config_hash"] == cfg.config_hash()
        table = open(tmp_path / "report.txt").read()
        assert "p_score" in table and "n/a" in table

    def test_evaluate_refuses_wrong_architecture(self, corpus, trained):
        cfg, ckpt, _ = trained
        wrong = cfg.replace(d_model=cfg.d_model * 2)
        with pytest.raises(ValueError, match="shape-key hash mismatch"):
            evaluate(wrong, os.path.join(corpus, "manifest.jsonl"), ckpt)

    def test_evaluate_refuses_wrong_variant(self, corpus, trained):
        cfg, ckpt, _ = trained
        wrong = cfg.replace(fusion_kind="triple")
        with pytest.raises(ValueError, match="variant"):
            evaluate(wrong, os.path.join(corpus, "manifest.jsonl"), ckpt)

    def test_evaluate_requires_k_at_least_two(self, corpus, trained):
        cfg, ckpt, _ = trained
        with pytest.raises(ValueError, match="k_per_condition"):
            evaluate(cfg.replace(k_per_condition=1),
                     os.path.join(corpus, "manifest.jsonl"), ckpt)

    def test_ground_truth_as_generated_scores_sanely(self, corpus, trained):
        cfg, ckpt, _ = trained
        report = evaluate(cfg, os.path.join(corpus, "manifest.jsonl"), ckpt,
                          gt_as_generated=True)
        # identical samples per condition: zero diversity, perfect scores
        assert report["apd_t"] == 0.0 and report["apd_m"] == 0.0
        assert report["non_collision"] >= 0.98


class TestAblate:
    def test_two_variant_table(self, corpus, tmp_path):
        cfg = tiny_cfg(seed=4, train_steps=3, checkpoint_every=10)
        rows = ablate(cfg, os.path.join(corpus, "manifest.jsonl"),
                      ["parallel_cross", "concat_self"], str(tmp_path))
        assert [r["variant"] for r in rows] == ["parallel_cross",
                                                "concat_self"]
        for row in rows:
            for k in REPORT_KEYS[:-1]:
                assert np.isfinite(row[k]), k
            assert np.isfinite(row["final_train_loss"])
        lines = open(tmp_path / "ablation.jsonl").read().strip().split("\n")
        assert len(lines) == 2
        assert os.path.exists(tmp_path / "ablation.txt")

    def test_identical_variant_listed_twice_gives_identical_rows(
            self, corpus, tmp_path):
        cfg = tiny_cfg(seed=4, train_steps=3, checkpoint_every=10)
        rows = ablate(cfg, os.path.join(corpus, "manifest.jsonl"),
                      ["triple", "triple"], str(tmp_path))
        a, b = rows
        assert {k: v for k, v in a.items()} == {k: v for k, v in b.items()}

    def test_needs_two_variants(self, corpus, tmp_path):
        with pytest.raises(ValueError):
            ablate(tiny_cfg(), os.path.join(corpus, "manifest.jsonl"),
                   ["triple"], str(tmp_path))


# -- CLI ------------------------------------------------------------------------------


class TestCli:
    def test_gen_data_exit_zero(self, tmp_path, capsys):
        rc = cli_main(["gen-data", "--size", "6", "--seed", "3",
                       "--out", str(tmp_path / "d")])
        assert rc == 0
        assert "6 records" in capsys.readouterr().out

    def test_unknown_config_key_is_validation_error(self, tmp_path, capsys):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"mystery": 1}))
        rc = cli_main(["gen-data", "--config", str(p),
                       "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_checkpoint_is_validation_error(self, tmp_path):
        rc = cli_main(["eval", "--manifest", str(tmp_path / "nope.jsonl"),
                       "--checkpoint", str(tmp_path / "nope.stmd"),
                       "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_import_empty_warns_but_succeeds(self, tmp_path, capsys):
        src = tmp_path / "src"
        src.mkdir()
        rc = cli_main(["import", "--src", str(src),
                       "--out", str(tmp_path / "out")])
        assert rc == 0
        assert "warning" in capsys.readouterr().err
