import json
import subprocess
import sys

import pytest

from slicemoe.cli import build_parser, config_hash, main

SMALL = ["--set", "n_samples=300", "--set", "n_experts=4", "--set", "router_hidden=16", "--epochs", "1"]


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nn_samples = 300\nn_experts = 4\nrouter_hidden = 16\nepochs = 1\nlr = 1e-3\n")
    return path


class TestTrainEval:
    def test_train_writes_run_directory(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--seed", "7", "--out", str(out), *SMALL]) == 0
        assert {p.name for p in out.iterdir()} >= {"manifest.json", "metrics.csv", "timing.csv", "final.ckpt"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7
        assert manifest["config_hash"] == config_hash(manifest["config"])
        assert "config router_hidden = 16" in capsys.readouterr().out

    def test_precedence_flag_over_file_over_default(self, tmp_path, cfg_file):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_file), "--set", "lr=5e-4", "--out", str(out)]) == 0
        cfg = json.loads((out / "manifest.json").read_text())["config"]
        assert cfg["lr"] == 5e-4  # flag
        assert cfg["n_experts"] == 4  # file
        assert cfg["top_k"] == 2  # default

    def test_twice_gives_identical_metrics(self, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--seed", "3", "--out", str(tmp_path / name), *SMALL]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_eval_matches_last_epoch(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["train", "--seed", "2", "--out", str(out), *SMALL])
        last = (out / "metrics.csv").read_text().splitlines()[-1].split(",")
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--out", str(out)]) == 0
        report = json.loads((out / "eval.json").read_text())
        assert repr(report["val_acc"]) == last[4] and repr(report["ele"]) == last[5]

    def test_eval_with_data_spec(self, tmp_path):
        out = tmp_path / "run"
        main(["train", "--out", str(out), *SMALL])
        spec = tmp_path / "data.cfg"
        spec.write_text("noise_std = 0.5\n")
        assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--data", str(spec)]) == 0


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["train", "--no-such-flag"]) == 1
        assert main([]) == 1
        assert main(["ablate", "--sweep", "bogus"]) == 1

    def test_config_error(self, tmp_path, capsys):
        assert main(["train", "--set", "n_slices=5", "--out", str(tmp_path)]) == 2
        assert "ConfigError" in capsys.readouterr().err
        assert main(["train", "--set", "no_such_key=1", "--out", str(tmp_path)]) == 2
        assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2

    def test_bad_config_value(self, tmp_path):
        assert main(["train", "--set", "dropout=lots", "--out", str(tmp_path)]) == 2

    def test_integrity_error(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        assert main(["eval", "--checkpoint", str(bad)]) == 3

    def test_numeric_failure(self, tmp_path):
        # a learning rate this large drives the weights to overflow within one epoch
        code = main(["train", "--set", "lr=1e300", "--out", str(tmp_path), *SMALL])
        assert code == 4


class TestOtherCommands:
    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--points", "2", "--ops", "matmul,softmax,layer"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3

    def test_gradcheck_unknown_op(self):
        assert main(["gradcheck", "--ops", "nope"]) == 1

    def test_bench(self, tmp_path, capsys):
        args = ["bench", "--batch", "4", "--d", "16", "--slices", "2", "--experts", "4", "--k", "1,2",
                "--repeats", "2", "--warmup", "0", "--out", str(tmp_path)]
        assert main(args) == 0
        assert len((tmp_path / "bench.csv").read_text().splitlines()) == 3

    def test_ablate(self, tmp_path):
        args = ["ablate", "--sweep", "shuffle", "--seeds", "0", "--out", str(tmp_path), *SMALL]
        assert main(args) == 0
        lines = (tmp_path / "ablation_shuffle.csv").read_text().splitlines()
        assert len(lines) == 3 and "contiguous" in lines[1] and "shuffled" in lines[2]

    def test_ablate_custom_values_validated(self, tmp_path):
        args = ["ablate", "--sweep", "slices", "--values", "2,3", "--seeds", "0", "--out", str(tmp_path), *SMALL]
        assert main(args) == 2

    def test_parser_lists_subcommands(self):
        help_text = build_parser().format_help()
        for cmd in ("train", "eval", "ablate", "bench", "gradcheck"):
            assert cmd in help_text

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "slicemoe", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and "slicemoe" in proc.stdout
