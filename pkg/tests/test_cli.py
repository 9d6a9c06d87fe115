"""Command-line behaviour: outputs, exit codes and config precedence."""

import json

import pytest

from tornet import gradsuite
from tornet import numerics as nx
from tornet.cli import RunConfig, main, parse_config_file
from tornet.errors import ConfigError


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["synth-data", "--out", str(out), "--n", "2", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = main(["train", "--manifest", str(small_corpus / "manifest.csv"), "--out", str(out),
                 "--epochs", "1", "--seed", "0", "--lr", "1e-4", "--single-thread"])
    assert code == 0
    return out


class TestSynthData:
    def test_sixty_entries(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth-data", "--out", tmp_path / "d", "--n", 10, "--seed", 7)
        assert code == 0
        assert out.strip().endswith("manifest.csv")
        lines = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
        assert lines[0] == "filename,label,split"
        assert len(lines) == 61

    def test_rerun_identical(self, capsys, tmp_path):
        run(capsys, "synth-data", "--out", tmp_path / "a", "--n", 1, "--seed", 2)
        run(capsys, "synth-data", "--out", tmp_path / "b", "--n", 1, "--seed", 2)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and len(files_a) == 7
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_unwritable_directory(self, capsys, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "synth-data", "--out", blocker / "sub", "--n", 1)
        assert code == 2
        assert "cannot write" in err


class TestUsage:
    def test_unknown_command_exit_1(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "invalid choice" in err

    def test_missing_required_flag(self, capsys):
        assert run(capsys, "train", "--out", "x")[0] == 1

    def test_epochs_zero(self, capsys, small_corpus, tmp_path):
        code, _, err = run(capsys, "train", "--manifest", small_corpus / "manifest.csv", "--out", tmp_path,
                           "--epochs", 0)
        assert code == 1 and "no epoch" in err

    def test_unknown_variant(self, capsys):
        assert run(capsys, "params", "--variant", "huge")[0] == 1

    def test_missing_manifest_is_data_error(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--manifest", tmp_path / "none.csv", "--out", tmp_path, "--epochs", 1)
        assert code == 2


class TestRunConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nlr = 1e-4   # inline\n\nbatch-size = 8\npatience = none\n")
        assert parse_config_file(path) == {"lr": 1e-4, "batch_size": 8, "patience": None}

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("lr = 1\nmomentum = 0.9\n")
        with pytest.raises(ConfigError, match=":2: unknown config key 'momentum'"):
            parse_config_file(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = many\n")
        with pytest.raises(ConfigError, match="epochs"):
            parse_config_file(path)

    def test_precedence(self):
        run_cfg = RunConfig.merge({"lr": 1e-3, "seed": 4}, {"lr": 5e-4, "seed": None})
        assert run_cfg["lr"] == 5e-4 and run_cfg.origin["lr"] == "flag"
        assert run_cfg["seed"] == 4 and run_cfg.origin["seed"] == "config"
        assert run_cfg["batch_size"] == 16 and run_cfg.origin["batch_size"] == "default"

    def test_effective_values_logged(self, capsys, small_corpus, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 0\nlr = 1e-3\n")
        code, _, err = run(capsys, "train", "--manifest", small_corpus / "manifest.csv", "--out", tmp_path,
                           "--config", cfg, "--lr", "2e-3")
        assert code == 1  # epochs = 0 from the file
        assert "config lr = 0.002 (flag)" in err
        assert "config epochs = 0 (config)" in err
        assert "config batch_size = 16 (default)" in err


class TestParams:
    def test_default(self, capsys):
        code, out, _ = run(capsys, "params")
        assert code == 0
        assert "stage1.maxpool" in out and "32x20x256" in out
        assert "4,450,498" in out

    def test_no_last_conv(self, capsys):
        _, out, _ = run(capsys, "params", "--variant", "no-last-conv")
        total = int(out.strip().splitlines()[-1].split()[1].replace(",", ""))
        assert 1_000_000 <= total <= 1_700_000


class TestGradcheck:
    def test_lists_every_op_once(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--seeds", 1)
        assert code == 0
        names = [line.split()[1] for line in out.splitlines() if line.startswith(("PASS", "FAIL"))]
        assert sorted(names) == sorted(gradsuite.REGISTRY)

    def test_wrong_backward_fails(self, capsys, monkeypatch):
        def build(rng, seed):
            def bad(x):
                y = nx.swish(x)
                y._backward = lambda g: (g,)  # identity instead of swish'
                return y

            return bad, [rng.standard_normal(4)]

        registry = {"swish_wrong": gradsuite.Check("swish_wrong", build)}
        monkeypatch.setattr(gradsuite, "REGISTRY", registry)
        code, out, err = run(capsys, "gradcheck", "--seeds", 2)
        assert code != 0
        assert "FAIL" in out and "swish_wrong" in err


class TestTrainEvalPredict:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"best.ckpt", "final.ckpt", "history.jsonl"}
        records = [json.loads(l) for l in (trained / "history.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in records] == [1]
        assert "seconds" not in records[0]  # single-thread runs keep wall-clock time out of the log

    def test_variant_recorded(self, capsys, small_corpus, tmp_path):
        code, _, _ = run(capsys, "train", "--manifest", small_corpus / "manifest.csv", "--out", tmp_path,
                         "--epochs", 1, "--variant", "no-instancenorm", "--single-thread")
        assert code == 0
        from tornet.train import load_model

        model, meta = load_model(tmp_path / "best.ckpt")
        assert meta["model_config"]["use_instance_norm"] is False
        assert not model.stage2.use_in

    def test_eval_twice_identical(self, capsys, trained, small_corpus, tmp_path):
        args = ("eval", "--checkpoint", trained / "best.ckpt", "--manifest", small_corpus / "manifest.csv",
                "--split", "test", "--single-thread")
        code1, out1, _ = run(capsys, *args, "--json", tmp_path / "r.json")
        code2, out2, _ = run(capsys, *args)
        assert code1 == code2 == 0
        assert out1 == out2
        assert "UAR" in out1 and "confusion" in out1
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["n_bootstrap"] == 1000 and report["ci_low"] <= report["ci_high"]

    def test_truncated_checkpoint(self, capsys, trained, small_corpus, tmp_path):
        blob = (trained / "best.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
        code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "cut.ckpt",
                           "--manifest", small_corpus / "manifest.csv")
        assert code == 2
        assert "section" in err

    def test_version_mismatch(self, capsys, trained, small_corpus, tmp_path):
        blob = bytearray((trained / "best.ckpt").read_bytes())
        blob[4] = 9
        (tmp_path / "v.ckpt").write_bytes(bytes(blob))
        code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "v.ckpt",
                           "--wav", small_corpus / "test" / "negative_0000.wav")
        assert code == 2 and "version 9" in err

    def test_predict(self, capsys, trained, small_corpus):
        args = ("predict", "--checkpoint", trained / "best.ckpt", "--wav", small_corpus / "test" / "positive_0001.wav")
        code, out, _ = run(capsys, *args)
        assert code == 0
        probs = [float(l.split("=")[1]) for l in out.splitlines() if l.startswith("p(")]
        assert len(probs) == 2 and abs(sum(probs) - 1) <= 1e-6
        assert out.splitlines()[0] in ("label: negative", "label: positive")
        assert run(capsys, *args)[1] == out

    def test_predict_non_wav(self, capsys, trained, tmp_path):
        junk = tmp_path / "notes.wav"
        junk.write_text("definitely not audio")
        code, _, err = run(capsys, "predict", "--checkpoint", trained / "best.ckpt", "--wav", junk)
        assert code == 2 and "WAV" in err

    def test_features_cache(self, capsys, small_corpus, tmp_path):
        code, out, _ = run(capsys, "features", "--manifest", small_corpus / "manifest.csv",
                           "--cache-dir", tmp_path / "cache", "--threads", 2)
        assert code == 0
        assert "train: 4 clips" in out
        assert len(list((tmp_path / "cache").glob("*.feat"))) == 12
