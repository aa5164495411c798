import csv
import json

import numpy as np
import pytest

from conftest import run_pipeline
from gaborscope import cli
from gaborscope.stages import STAGES
from gaborscope.trainer import DivergenceError

HEADER = ["epoch_index", "single_pred", "multi_pred", "true_label"]


def write_hypnogram(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        w.writerows(rows)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return root, run_pipeline(root)


class TestEval:
    def test_identical_predictions(self, tmp_path, capsys):
        labels = ["Wake", "S1", "S2", "SWS", "REM", "S2", "Wake"]
        write_hypnogram(tmp_path / "a.csv", [(i, s, s, s) for i, s in enumerate(labels)])
        assert cli.main(["eval", "--predictions", str(tmp_path / "a.csv"), "--out-dir", str(tmp_path / "out")]) == 0
        metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
        for net in ("single", "multi"):
            assert metrics[net]["overall"]["accuracy"] == 1.0
            assert metrics[net]["overall"]["kappa"] == 1.0
        assert "accuracy 100.00" in capsys.readouterr().out
        rows = list(csv.reader(open(tmp_path / "out" / "agreement.csv")))
        assert rows == [["single_pred", "multi_pred", "total", "corrected", "corrupted"]]

    def test_confusion_csv(self, tmp_path):
        write_hypnogram(tmp_path / "a.csv", [(0, "Wake", "Wake", "Wake"), (1, "S1", "Wake", "Wake"), (2, "REM", "REM", "S2")])
        cli.main(["eval", "--predictions", str(tmp_path / "a.csv"), "--out-dir", str(tmp_path / "o")])
        rows = list(csv.reader(open(tmp_path / "o" / "confusion_single.csv")))
        assert rows[0] == ["true\\pred"] + [s.short for s in STAGES]
        cm = np.array([[int(v) for v in r[1:]] for r in rows[1:]])
        assert cm[0, 0] == 1 and cm[0, 1] == 1 and cm[2, 4] == 1 and cm.sum() == 3
        agree = list(csv.reader(open(tmp_path / "o" / "agreement.csv")))[1:]
        assert agree == [[STAGES[1].short, STAGES[0].short, "1", "1", "0"]]

    def test_bad_columns(self, tmp_path, capsys):
        (tmp_path / "a.csv").write_text("a,b\n1,2\n")
        assert cli.main(["eval", "--predictions", str(tmp_path / "a.csv"), "--out-dir", str(tmp_path)]) == 3
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "data"


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        code = cli.main(["train-single", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path)])
        assert code == 2
        assert "usage:" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.txt").write_text("minibatch_size=-1\n")
        code = cli.main(["train-single", "--config", str(tmp_path / "c.txt"), "--out-dir", str(tmp_path)])
        assert code == 2

    def test_missing_out_dir(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["init"])
        assert err.value.code == 2

    def test_missing_data(self, tmp_path):
        assert cli.main(["ingest", "--data-dir", str(tmp_path / "nope"), "--out-dir", str(tmp_path)]) == 3

    def test_corrupt_edf(self, tmp_path):
        (tmp_path / "raw").mkdir()
        (tmp_path / "raw" / "X-PSG.edf").write_bytes(b"0" * 100)
        assert cli.main(["ingest", "--data-dir", str(tmp_path / "raw"), "--out-dir", str(tmp_path / "s")]) == 3

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"GSCK\x01garbage")
        assert cli.main(["export-kernels", "--checkpoint", str(tmp_path / "c.ckpt"), "--out-dir", str(tmp_path)]) == 3

    def test_divergence(self, tmp_path, monkeypatch):
        def boom(args):
            raise DivergenceError(7)
        monkeypatch.setitem(cli.COMMANDS, "init", boom)
        assert cli.main(["init", "--out-dir", str(tmp_path)]) == 4


class TestKernels:
    def test_export_from_init(self, tmp_path):
        assert cli.main(["init", "--out-dir", str(tmp_path)]) == 0
        assert cli.main(["export-kernels", "--checkpoint", str(tmp_path / "init.ckpt"),
                         "--out-dir", str(tmp_path / "k")]) == 0
        rows = list(csv.reader(open(tmp_path / "k" / "kernel_waveforms.csv")))
        assert rows[0] == ["kernel", "t", "value"] and len(rows) - 1 == 40 * 200
        assert len(json.loads((tmp_path / "k" / "kernel_params.json").read_text())) == 40

    def test_export_rejects_ablation(self, tmp_path):
        cli.main(["init", "--ablation", "plain-conv", "--out-dir", str(tmp_path)])
        assert cli.main(["export-kernels", "--checkpoint", str(tmp_path / "init.ckpt"), "--out-dir", str(tmp_path)]) == 3


class TestManifest:
    def test_config_hash_key_order(self):
        assert cli.config_hash({"a": 1, "b": [1, 2]}) == cli.config_hash({"b": [1, 2], "a": 1})
        assert cli.config_hash({"a": 1}) != cli.config_hash({"a": 2})

    def test_manifest_lists_outputs(self, tmp_path):
        cli.main(["init", "--seed", "5", "--out-dir", str(tmp_path)])
        m = json.loads((tmp_path / "manifest_init.json").read_text())
        assert m["seed"] == 5 and m["files"]["init.ckpt"] == cli.file_digest(tmp_path / "init.ckpt")

    def test_recording_meta(self):
        assert cli._recording_meta("SC4122E0") == ("12", 2)
        assert cli._recording_meta("rec7") == ("rec7", 1)


class TestPipeline:
    def test_all_steps_succeed(self, pipeline):
        root, codes = pipeline
        assert codes == dict.fromkeys(codes, 0) and len(codes) == 8

    def test_hypnogram_schema(self, pipeline):
        root, _ = pipeline
        files = sorted((root / "scored").glob("*_hypnogram.csv"))
        assert files
        rows = list(csv.reader(open(files[0])))
        assert rows[0] == HEADER
        assert [int(r[0]) for r in rows[1:]] == sorted(int(r[0]) for r in rows[1:])

    def test_manifests_carry_fingerprint(self, pipeline):
        root, _ = pipeline
        m = json.loads((root / "single" / "manifest_train-single.json").read_text())
        assert m["dataset_fingerprint"] == cli.file_digest(root / "store" / "index.json")
        assert m["config"]["max_iterations"] == 4 and m["config_hash"] == cli.config_hash(m["config"])

    def test_interpretation_outputs(self, pipeline):
        root, _ = pipeline
        manifest = json.loads((root / "interp" / "interpretation.json").read_text())
        for name in ("kernel_impact.csv", "stage_impact.csv", "stage_tests.csv", "eff_traces.csv"):
            assert (root / "interp" / name).exists(), manifest
