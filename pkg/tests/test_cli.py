"""Command-line workflows: artifacts, sidecars, exit codes, determinism."""

import json

import pytest

from fewshot_tta.cli import main
from fewshot_tta.config import file_sha256, serialize
from fewshot_tta.model import load_model
from test_harness import tiny_cfg


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(serialize(tiny_cfg()))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, cfg_path):
    """gen-data + train-source + finetune, shared by the downstream tests."""
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    assert main(["gen-data", "--config", cfg_path, "--out", str(data)]) == 0
    source = root / "source.ttam"
    assert main(["train-source", "--config", cfg_path, "--data", str(data),
                 "--out", str(source)]) == 0
    tuned = root / "tuned.ttam"
    assert main(["finetune", "--config", cfg_path, "--model", str(source),
                 "--support", str(data / "support.ttad"), "--out", str(tuned)]) == 0
    return root


class TestGenData:
    def test_writes_expected_files(self, workspace):
        data = workspace / "data"
        for name in ("source0.ttad", "source1.ttad", "target.ttad", "support.ttad",
                     "stream.ttad", "manifest.json", "gen-data.sidecar.json"):
            assert (data / name).exists(), name

    def test_sidecar_embeds_config_and_hashes(self, workspace):
        doc = json.loads((workspace / "data" / "gen-data.sidecar.json").read_text())
        assert "config" in doc and "config_hash" in doc
        assert doc["hashes"]["stream"] == file_sha256(workspace / "data" / "stream.ttad")

    def test_same_seed_twice_identical_files(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", cfg_path, "--out", str(a)]) == 0
        assert main(["gen-data", "--config", cfg_path, "--out", str(b)]) == 0
        for name in ("source0.ttad", "target.ttad", "support.ttad", "stream.ttad"):
            assert file_sha256(a / name) == file_sha256(b / name), name


class TestTrainSource:
    def test_model_loads_and_sidecar_present(self, workspace):
        model = load_model(workspace / "source.ttam")
        assert model.num_classes == 3
        doc = json.loads((workspace / "source.ttam.sidecar.json").read_text())
        assert doc["params_hash"] == model.params_hash().hex()

    def test_missing_data_dir_is_data_error(self, tmp_path, cfg_path):
        rc = main(["train-source", "--config", cfg_path,
                   "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m.ttam")])
        assert rc == 2


class TestFinetune:
    def test_outputs(self, workspace):
        tuned = load_model(workspace / "tuned.ttam")
        source = load_model(workspace / "source.ttam")
        assert tuned.params_hash() != source.params_hash()
        trace = (workspace / "tuned.ttam.trace.csv").read_text().splitlines()
        assert trace[0] == "epoch,loss,support_acc"
        assert len(trace) == 6


class TestAdapt:
    def test_source_only_leaves_model_file_untouched(self, workspace, cfg_path):
        before = file_sha256(workspace / "source.ttam")
        out = workspace / "erm.json"
        rc = main(["adapt", "--config", cfg_path, "--model", str(workspace / "source.ttam"),
                   "--stream", str(workspace / "data" / "stream.ttad"),
                   "--method", "erm", "--out", str(out)])
        assert rc == 0
        assert file_sha256(workspace / "source.ttam") == before
        doc = json.loads(out.read_text())
        assert doc["method"] == "source_only"
        assert 0.0 <= doc["final_accuracy"] <= 1.0

    def test_fs_tta_with_support_and_batch_csv(self, workspace, cfg_path):
        out = workspace / "fs_tta.json"
        csv_path = workspace / "fs_tta.csv"
        rc = main(["adapt", "--config", cfg_path, "--model", str(workspace / "tuned.ttam"),
                   "--stream", str(workspace / "data" / "stream.ttad"),
                   "--support", str(workspace / "data" / "support.ttad"),
                   "--method", "fs_tta", "--out", str(out), "--batch-csv", str(csv_path)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["selected_total"] > 0
        assert len(doc["curve"]) == 3
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("batch,")
        assert len(lines) == 4

    def test_fs_tta_without_support_is_config_error(self, workspace, cfg_path):
        rc = main(["adapt", "--config", cfg_path, "--model", str(workspace / "tuned.ttam"),
                   "--stream", str(workspace / "data" / "stream.ttad"),
                   "--method", "fs_tta", "--out", str(workspace / "x.json")])
        assert rc == 1

    def test_unknown_method_is_config_error(self, workspace, cfg_path):
        rc = main(["adapt", "--config", cfg_path, "--model", str(workspace / "source.ttam"),
                   "--stream", str(workspace / "data" / "stream.ttad"),
                   "--method", "sgd", "--out", str(workspace / "x.json")])
        assert rc == 1

    def test_corrupt_model_is_data_error(self, workspace, cfg_path, tmp_path):
        bad = tmp_path / "bad.ttam"
        bad.write_bytes(b"NOPE" + b"\x00" * 64)
        rc = main(["adapt", "--config", cfg_path, "--model", str(bad),
                   "--stream", str(workspace / "data" / "stream.ttad"),
                   "--method", "erm", "--out", str(tmp_path / "x.json")])
        assert rc == 2


class TestReport:
    def test_table_over_two_runs(self, workspace, capsys):
        rc = main(["report", str(workspace / "erm.json"), str(workspace / "fs_tta.json")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "source_only" in out and "fs_tta" in out

    def test_csv_output(self, workspace, tmp_path):
        csv_path = tmp_path / "table.csv"
        rc = main(["report", str(workspace / "erm.json"), str(workspace / "fs_tta.json"),
                   "--csv", str(csv_path)])
        assert rc == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "method,final_accuracy,delta_vs_baseline,total,batches"
        assert len(lines) == 3

    def test_mixed_hash_refused_then_forced(self, workspace, tmp_path, capsys):
        doc = json.loads((workspace / "erm.json").read_text())
        doc["data_hash"] = "deadbeef"
        other = tmp_path / "other.json"
        other.write_text(json.dumps(doc))
        rc = main(["report", str(workspace / "fs_tta.json"), str(other)])
        assert rc == 2
        capsys.readouterr()
        rc = main(["report", str(workspace / "fs_tta.json"), str(other), "--force"])
        assert rc == 0

    def test_invalid_json_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert main(["report", str(bad)]) == 2


class TestSweepCommand:
    def test_alpha_sweep_writes_doc(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "sweep.json"
        rc = main(["sweep", "--config", cfg_path, "--axis", "alpha",
                   "--values", "0.0,0.5", "--trials", "1", "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["alpha0_matches_stage1"] is True
        assert "alpha" in capsys.readouterr().out


class TestRunAllCommand:
    def test_full_pipeline(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["run-all", "--config", cfg_path, "--out", str(out),
                   "--methods", "source_only,fs_tta"])
        assert rc == 0
        doc = json.loads((out / "report.json").read_text())
        assert set(doc["methods"]) == {"source_only", "fs_tta"}
        assert "online accuracy" in capsys.readouterr().out


class TestExitCodes:
    def test_usage_error_is_one(self, capsys):
        assert main(["adapt"]) == 1
        capsys.readouterr()

    def test_unknown_subcommand_is_one(self, capsys):
        assert main(["transmogrify"]) == 1
        capsys.readouterr()

    def test_missing_config_file_is_data_error(self, tmp_path):
        rc = main(["gen-data", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_bad_config_json_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{]")
        rc = main(["gen-data", "--config", str(path), "--out", str(tmp_path / "d")])
        assert rc == 1
