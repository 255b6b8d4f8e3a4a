"""Command-line pipeline: exit codes, outputs, config echo, cross-command consistency."""

import json

import pytest

import bevmine.cli as cli_mod
from bevmine.cli import load_run_config, main
from bevmine.detector import init_state, save_checkpoint
from bevmine.scenes import load_scenes
from bevmine.trainer import TrainAbort


def config_text(root, out="out", seed=11, n_train=6, n_val=3, extra=""):
    return f"""
seed = {seed}

[paths]
out_dir = "{(root / out).as_posix()}"
train_scenes = "{(root / 'data' / 'train.jsonl').as_posix()}"
val_scenes = "{(root / 'data' / 'val.jsonl').as_posix()}"

[scenes]
objects_min = 4
objects_max = 6
clutter_points = 20.0
n_train = {n_train}
n_val = {n_val}

[trainer]
i_max = 6
batch_size = 3
static_pretrain_iters = 40
{extra}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train --pretrain-static, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.toml"
    cfg.write_text(config_text(root))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--pretrain-static"]) == 0
    return {"root": root, "cfg": cfg, "out": root / "out", "data": root / "data"}


class TestGenData:
    def test_manifest_statistics_recount_from_files(self, workspace):
        manifest = json.loads((workspace["out"] / "manifest.json").read_text())
        for split, path in (("train", "train.jsonl"), ("val", "val.jsonl")):
            scenes = load_scenes(workspace["data"] / path)
            stats = manifest["splits"][split]
            n_objects = sum(len(s.gt_boxes) for s in scenes)
            n_labels = sum(1 for s in scenes for a in s.agents if a.sparse_label is not None)
            assert stats["n_scenes"] == len(scenes)
            assert stats["n_objects"] == n_objects
            assert stats["sparse_labels"] == n_labels
            assert stats["sparse_ratio"] == n_labels / n_objects

    def test_manifest_echoes_effective_config(self, workspace):
        manifest = json.loads((workspace["out"] / "manifest.json").read_text())
        assert manifest["config"] == load_run_config(workspace["cfg"]).effective

    def test_effective_config_fills_defaults(self, workspace):
        effective = load_run_config(workspace["cfg"]).effective
        assert effective["trainer"]["i_refine"] == 3  # half of i_max
        assert effective["mining"]["sigma_st_low"] == 0.15
        assert effective["grid"]["origin"] == [-20.0, -20.0]

    def test_rerun_is_byte_identical(self, workspace):
        train_path = workspace["data"] / "train.jsonl"
        manifest_path = workspace["out"] / "manifest.json"
        before = (train_path.read_bytes(), manifest_path.read_bytes())
        assert main(["gen-data", "--config", str(workspace["cfg"])]) == 0
        assert (train_path.read_bytes(), manifest_path.read_bytes()) == before

    def test_scene_ids_name_their_split(self, workspace):
        train = load_scenes(workspace["data"] / "train.jsonl")
        val = load_scenes(workspace["data"] / "val.jsonl")
        assert all(s.scene_id.startswith("train-") for s in train)
        assert all(s.scene_id.startswith("val-") for s in val)

    def test_zero_scenes_still_yield_valid_manifest(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(config_text(tmp_path, n_train=0, n_val=0))
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert load_scenes(tmp_path / "data" / "train.jsonl") == []
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["splits"]["train"]["sparse_ratio"] == 0.0


class TestTrain:
    def test_outputs_exist_and_log_flips_stage(self, workspace):
        out = workspace["out"]
        for name in ("static_teacher.json", "student.json", "dynamic_teacher.json",
                     "run_log.jsonl", "train_report.json"):
            assert (out / name).exists(), name
        records = [json.loads(l) for l in (out / "run_log.jsonl").read_text().splitlines()]
        assert len(records) == 6
        assert [r["stage"] for r in records] == ["warm_up"] * 3 + ["refinement"] * 3
        report = json.loads((out / "train_report.json").read_text())
        assert report["config"] == load_run_config(workspace["cfg"]).effective
        assert report["iterations"] == 6
        assert report["cell_overlap_violations"] == 0

    def test_missing_static_checkpoint_is_data_error(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        # fresh out dir, reuse the existing corpus
        text = config_text(workspace["root"]).replace(
            (workspace["root"] / "out").as_posix(), (tmp_path / "out").as_posix()
        )
        cfg.write_text(text)
        assert main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "static_teacher.json" in err

    def test_i_max_override_tracks_i_refine_default(self, workspace, tmp_path):
        cfg = tmp_path / "c.toml"
        text = config_text(workspace["root"]).replace(
            (workspace["root"] / "out").as_posix(), (tmp_path / "out").as_posix()
        )
        cfg.write_text(text)
        code = main(["train", "--config", str(cfg), "--i-max", "4",
                     "--static-checkpoint", str(workspace["out"] / "static_teacher.json")])
        assert code == 0
        report = json.loads((tmp_path / "out" / "train_report.json").read_text())
        assert report["config"]["trainer"]["i_max"] == 4
        assert report["config"]["trainer"]["i_refine"] == 2
        assert report["iterations"] == 4

    def test_mfm_only_ablation_log_has_no_supplementary_entries(self, workspace, tmp_path):
        cfg = tmp_path / "c.toml"
        text = config_text(workspace["root"]).replace(
            (workspace["root"] / "out").as_posix(), (tmp_path / "out").as_posix()
        )
        cfg.write_text(text)
        code = main(["train", "--config", str(cfg), "--ablation", "mfm-only",
                     "--static-checkpoint", str(workspace["out"] / "static_teacher.json")])
        assert code == 0
        records = [json.loads(l)
                   for l in (tmp_path / "out" / "run_log.jsonl").read_text().splitlines()]
        assert sum(r["counts"]["pseudo_supp"] for r in records) == 0
        assert sum(r["counts"]["neighbor"] for r in records) == 0

    def test_numeric_abort_maps_to_exit_3(self, workspace, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise TrainAbort(4, "non-finite loss inf")

        monkeypatch.setattr(cli_mod, "run_training", boom)
        code = main(["train", "--config", str(workspace["cfg"]),
                     "--static-checkpoint", str(workspace["out"] / "static_teacher.json")])
        assert code == 3
        assert "iteration 4" in capsys.readouterr().err


class TestMineAndEval:
    def test_mine_emits_dump_and_sweep(self, workspace):
        assert main(["mine", "--config", str(workspace["cfg"])]) == 0
        out = workspace["out"]
        summary = json.loads((out / "mine_summary.json").read_text())
        assert summary["config"] == load_run_config(workspace["cfg"]).effective
        assert [entry["sigma"] for entry in summary["sweep"]] == [0.15, 0.2, 0.25, 0.3]
        for entry in summary["sweep"]:
            assert set(entry) == {"sigma", "fpr", "mpr", "an"}
        dump_lines = (out / "label_dump.jsonl").read_text().splitlines()
        assert len(dump_lines) == summary["n_scenes"] == 6
        assert 0.0 < summary["sigma_dt"] < 1.0

    def test_eval_rescoring_dump_matches_mine_summary(self, workspace):
        out = workspace["out"]
        assert main(["mine", "--config", str(workspace["cfg"])]) == 0
        code = main([
            "eval", "--config", str(workspace["cfg"]),
            "--scenes", str(workspace["data"] / "train.jsonl"),
            "--dump", str(out / "label_dump.jsonl"),
            "--out", str(out / "eval_train.json"),
        ])
        assert code == 0
        summary = json.loads((out / "mine_summary.json").read_text())
        report = json.loads((out / "eval_train.json").read_text())
        assert report["pseudo_quality"]["fpr"] == summary["dump"]["fpr"]
        assert report["pseudo_quality"]["mpr"] == summary["dump"]["mpr"]
        assert report["pseudo_quality"]["counts"] == summary["dump"]["counts"]

    def test_checkpoint_grid_mismatch_refused(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(config_text(workspace["root"],
                                   extra="\n[grid]\ntemplates = [[4.2, 1.9, 0.0]]\n"))
        assert main(["mine", "--config", str(cfg)]) == 2
        assert "config hash" in capsys.readouterr().err

    def test_eval_report_shape_and_repeatability(self, workspace):
        cfg = str(workspace["cfg"])
        assert main(["eval", "--config", cfg]) == 0
        path = workspace["out"] / "eval_report.json"
        first = path.read_bytes()
        assert main(["eval", "--config", cfg]) == 0
        assert path.read_bytes() == first
        report = json.loads(first)
        assert set(report["detection"]["ap"]) == {"0.3", "0.5", "0.7"}
        assert report["config"] == load_run_config(workspace["cfg"]).effective

    def test_untrained_detector_scores_near_zero(self, workspace, tmp_path):
        config = load_run_config(workspace["cfg"])
        fresh = init_state(config.grid, 123)
        ckpt = tmp_path / "fresh.json"
        save_checkpoint(ckpt, fresh, config.grid_digest())
        code = main(["eval", "--config", str(workspace["cfg"]),
                     "--checkpoint", str(ckpt), "--out", str(tmp_path / "report.json")])
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["detection"]["ap"]["0.5"] < 0.1

    def test_empty_eval_corpus_is_data_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(config_text(tmp_path, n_train=1, n_val=0))
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert main(["eval", "--config", str(cfg)]) == 2
        assert "empty" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(config_text(tmp_path, extra="\n[trainer2]\nx = 1\n"))
        assert main(["gen-data", "--config", str(cfg)]) == 1
        assert "trainer2" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_invalid_field_value(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(config_text(tmp_path, extra="\n[mining]\ntau = -0.5\n"))
        assert main(["gen-data", "--config", str(cfg)]) == 1

    def test_unknown_subcommand(self, capsys):
        assert main(["demolish", "--config", "x.toml"]) == 1

    def test_bad_toml_syntax(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("seed = = 3\n")
        assert main(["gen-data", "--config", str(cfg)]) == 1
