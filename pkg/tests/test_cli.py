import json
from pathlib import Path

import numpy as np
import pytest

from sslseg.cli import (ConfigError, SweepSpec, _parse_mirror_axes, load_dataset,
                        main, split_cases)


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run(["synth", "--seed", 0, "--cases", 6, "--labeled-fraction", 0.5,
                "--extent", 16, "--teeth", 1, "--classes", 3, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    from sslseg.trainer import RunConfig
    from sslseg.model import ModelConfig
    cfg = RunConfig(model=ModelConfig(num_stages=2, base_channels=2,
                                      patch_size=(8, 8, 8), num_classes=3,
                                      bottleneck_state_dim=2))
    path.write_text(json.dumps(cfg.to_dict()))
    return path


class TestSynth:
    def test_manifest_splits(self, dataset):
        cases, manifest = load_dataset(dataset)
        assert len(cases) == 6
        train, val, unlabeled = split_cases(cases, manifest)
        assert len(train) + len(val) == 3
        assert len(unlabeled) == 3
        assert all(not c.is_labeled for c in unlabeled)
        assert all(c.is_labeled for c in train + val)

    def test_twenty_ten_convention(self, tmp_path):
        out = tmp_path / "ds30"
        assert run(["synth", "--seed", 1, "--cases", 30, "--labeled-fraction", 1.0,
                    "--extent", 16, "--out", out]) == 0
        _, manifest = load_dataset(out)
        assert len(manifest["train_labeled"]) == 20
        assert len(manifest["val_labeled"]) == 10

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run(["synth", "--seed", 3, "--cases", 2, "--extent", 16, "--out", out])
        va = np.fromfile(next(a.glob("*.vol.raw")), dtype="<f4")
        vb = np.fromfile(next(b.glob("*.vol.raw")), dtype="<f4")
        assert np.array_equal(va, vb)

    def test_all_unlabeled(self, tmp_path):
        out = tmp_path / "unl"
        run(["synth", "--seed", 0, "--cases", 3, "--labeled-fraction", 0.0,
             "--extent", 16, "--out", out])
        _, manifest = load_dataset(out)
        assert manifest["train_labeled"] == [] and manifest["val_labeled"] == []
        assert len(manifest["unlabeled"]) == 3


class TestStageContracts:
    def test_cr_without_init_errors(self, dataset, tiny_config_file, tmp_path, capsys):
        rc = run(["train-cr", "--dataset", dataset, "--config", tiny_config_file,
                  "--out", tmp_path / "cr.pt", "--epochs", 1, "--iters", 1])
        assert rc == 2
        assert "stage" in capsys.readouterr().err

    def test_pl_rejects_pretrain_checkpoint(self, dataset, tiny_config_file, tmp_path):
        rc = run(["pretrain", "--dataset", dataset, "--config", tiny_config_file,
                  "--out", tmp_path / "s1.pt", "--epochs", 1, "--iters", 1])
        assert rc == 0
        rc = run(["train-pl", "--dataset", dataset, "--config", tiny_config_file,
                  "--init", tmp_path / "s1.pt", "--out", tmp_path / "pl.pt",
                  "--epochs", 1, "--iters", 1])
        assert rc == 2


class TestFullToyPipeline:
    def test_three_stages_infer_eval(self, dataset, tiny_config_file, tmp_path):
        s1, s2, s3 = (tmp_path / f"s{i}.pt" for i in (1, 2, 3))
        assert run(["pretrain", "--dataset", dataset, "--config", tiny_config_file,
                    "--out", s1, "--epochs", 1, "--iters", 2]) == 0
        assert run(["train-cr", "--dataset", dataset, "--config", tiny_config_file,
                    "--init", s1, "--out", s2, "--epochs", 1, "--iters", 2]) == 0
        assert run(["train-pl", "--dataset", dataset, "--config", tiny_config_file,
                    "--init", s2, "--out", s3, "--epochs", 1, "--iters", 2]) == 0

        preds = tmp_path / "preds"
        assert run(["infer", s3, dataset, "--mirror-axes", "1,2",
                    "--step-fraction", "0.9", "--out", preds]) == 0
        assert (preds / "timings.json").exists()

        report_dir = tmp_path / "report"
        assert run(["eval", preds, dataset, "--out", report_dir]) == 0
        summary = json.loads((report_dir / "metrics.json").read_text())
        assert "average_score" in summary["aggregates"]
        assert (report_dir / "metrics.csv").exists()

    def test_eval_perfect_predictions(self, dataset, tmp_path):
        report_dir = tmp_path / "perfect"
        assert run(["eval", dataset, dataset, "--out", report_dir]) == 0
        summary = json.loads((report_dir / "metrics.json").read_text())
        for key in ("dsc", "nsd", "miou", "ia", "average_score"):
            assert summary["aggregates"][key] == 1.0

    def test_infer_deterministic(self, dataset, tiny_config_file, tmp_path):
        s1 = tmp_path / "d1.pt"
        run(["pretrain", "--dataset", dataset, "--config", tiny_config_file,
             "--out", s1, "--epochs", 1, "--iters", 1])
        s2 = tmp_path / "d2.pt"
        run(["train-cr", "--dataset", dataset, "--config", tiny_config_file,
             "--init", s1, "--out", s2, "--epochs", 1, "--iters", 1])
        p1, p2 = tmp_path / "p1", tmp_path / "p2"
        for p in (p1, p2):
            assert run(["infer", s2, dataset, "--out", p]) == 0
        for f in sorted(p1.glob("*.seg.raw")):
            assert (f.read_bytes() == (p2 / f.name).read_bytes())


class TestParsing:
    def test_mirror_axes(self):
        assert _parse_mirror_axes("1,2") == (1, 2)
        assert _parse_mirror_axes("") == ()
        assert _parse_mirror_axes("2,1") == (1, 2)
        with pytest.raises(ConfigError):
            _parse_mirror_axes("5")
        with pytest.raises(ConfigError):
            _parse_mirror_axes("a,b")

    def test_sweep_spec_validation(self):
        with pytest.raises(ConfigError):
            SweepSpec(step_fractions=[])

    def test_default_config_output(self, tmp_path, capsys):
        assert run(["default-config"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["weights"]["consistency_weight"] == 50.0
        assert cfg["lr0"] == 0.01


class TestSweepCommand:
    def test_sweep_outputs(self, dataset, tiny_config_file, tmp_path):
        s1 = tmp_path / "sw1.pt"
        run(["pretrain", "--dataset", dataset, "--config", tiny_config_file,
             "--out", s1, "--epochs", 1, "--iters", 1])
        s2 = tmp_path / "sw2.pt"
        run(["train-cr", "--dataset", dataset, "--config", tiny_config_file,
             "--init", s1, "--out", s2, "--epochs", 1, "--iters", 1])
        out = tmp_path / "sweep"
        assert run(["sweep", s2, dataset, "--step-fractions", "0.5,0.9",
                    "--out", out]) == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 + 8   # header + step cells + mirror cells
        assert (out / "sweep_tile.png").exists()
        assert (out / "sweep_mirror.png").exists()
        # tile count non-increasing in step fraction
        import csv
        with open(out / "sweep.csv") as f:
            data = list(csv.DictReader(f))
        tiles = [int(r["tiles"]) for r in data[:2]]
        assert tiles[1] <= tiles[0]
