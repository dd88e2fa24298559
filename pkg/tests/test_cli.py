"""Command-line surface: every subcommand's happy path and exit codes."""

import json
import os

import pytest

from vitprune.cli import main, parse_ratio_spec, UsageError
from vitprune.data import write_raw_tensor

from conftest import blob_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset + config + completed training run shared by the
    command tests."""
    root = tmp_path_factory.mktemp("cli")
    train = blob_dataset(96, seed=0, noise=0.5)
    val = blob_dataset(32, seed=1, noise=0.5)
    write_raw_tensor(str(root / "train.bin"), train.images, train.labels)
    write_raw_tensor(str(root / "val.bin"), val.images, val.labels)
    config = {
        "model": {"layers": 2, "heads": 2, "dim": 16, "head_dim": 8,
                  "ffn_dim": 32, "image_size": 16, "patch_size": 4,
                  "num_classes": 2, "channels": 3},
        "penalty": {"lambda_macro": 0.9, "lambda_micro": 0.45},
        "anneal": {"tau_start": 2.0, "tau_min": 0.5},
        "epochs": 3, "batch_size": 32, "learning_rate": 1e-3,
        "gate_lr_multiplier": 10.0, "weight_decay": 0.05, "seed": 0,
        "train_path": str(root / "train.bin"),
        "val_path": str(root / "val.bin"),
        "data_format": "raw_tensor", "trace_interval": 2,
        "out_dir": str(root / "run"), "augment": False,
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root


class TestTrain:
    def test_artifacts_exist(self, workspace):
        for name in ("checkpoint.bin", "metrics.csv", "trace.csv"):
            assert (workspace / "run" / name).exists()

    def test_missing_dataset_path_exit_2(self, workspace, capsys):
        cfg = json.loads((workspace / "config.json").read_text())
        cfg["train_path"] = None
        bad = workspace / "no_data.json"
        bad.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(bad)]) == 2
        assert "train_path" in capsys.readouterr().err

    def test_unreadable_config_exit_2(self):
        assert main(["train", "--config", "/nonexistent/cfg.json"]) == 2


class TestExtractVerify:
    def test_extract_then_verify_pass(self, workspace, capsys):
        ck = str(workspace / "run" / "checkpoint.bin")
        arch = str(workspace / "arch.json")
        assert main(["extract", "--checkpoint", ck, "--out", arch]) == 0
        assert os.path.exists(arch) and os.path.exists(arch + ".weights")
        assert main(["verify", "--checkpoint", ck, "--arch", arch,
                     "--trials", "4"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_verify_fail_exit_1(self, workspace, capsys):
        from vitprune.io import load_tensors, save_tensors
        ck = str(workspace / "run" / "checkpoint.bin")
        arch = str(workspace / "arch_bad.json")
        assert main(["extract", "--checkpoint", ck, "--out", arch]) == 0
        wpath = arch + ".weights"
        tensors, meta = load_tensors(wpath)
        tensors["head_w"][0, 0] += 1.0  # classifier weight: hits logits directly
        save_tensors(wpath, tensors, meta)
        code = main(["verify", "--checkpoint", ck, "--arch", arch, "--trials", "4"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_corrupt_checkpoint_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "garbage.bin"
        bad.write_bytes(b"\x01" * 100)
        assert main(["extract", "--checkpoint", str(bad),
                     "--out", str(tmp_path / "x.json")]) == 2

    def test_provenance_mismatch_exit_2(self, workspace, tmp_path):
        ck = str(workspace / "run" / "checkpoint.bin")
        arch = str(tmp_path / "arch.json")
        assert main(["extract", "--checkpoint", ck, "--out", arch]) == 0
        # re-train into a different checkpoint and verify against the old arch
        other = str(workspace / "run2")
        cfg = json.loads((workspace / "config.json").read_text())
        cfg["seed"] = 123
        cfg["out_dir"] = other
        p = tmp_path / "cfg2.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p)]) == 0
        assert main(["verify", "--checkpoint", os.path.join(other, "checkpoint.bin"),
                     "--arch", arch]) == 2

    def test_bad_threshold_exit_2(self, workspace):
        ck = str(workspace / "run" / "checkpoint.bin")
        assert main(["extract", "--checkpoint", ck, "--threshold", "1.5",
                     "--out", "/tmp/x.json"]) == 2


class TestMacs:
    def test_dense_deit_small_totals(self, tmp_path, capsys):
        cfg = {"layers": 12, "heads": 6, "dim": 384, "head_dim": 64,
               "ffn_dim": 1536, "image_size": 224, "patch_size": 16,
               "num_classes": 1000, "channels": 3}
        p = tmp_path / "deit_small.json"
        p.write_text(json.dumps(cfg))
        out_json = tmp_path / "summary.json"
        assert main(["macs", "--model-config", str(p),
                     "--json-out", str(out_json)]) == 0
        summary = json.loads(out_json.read_text())
        assert summary["formula_units"] == 9_081_391_104
        assert summary["formula_units_halved"] == pytest.approx(4.5407e9, rel=1e-3)
        text = capsys.readouterr().out
        assert "layer" in text and "9081391104" in text

    def test_vit_tiny_near_published(self, tmp_path):
        cfg = {"layers": 6, "heads": 3, "dim": 192, "head_dim": 64,
               "ffn_dim": 768, "image_size": 32, "patch_size": 4,
               "num_classes": 10, "channels": 3}
        p = tmp_path / "vit_tiny.json"
        p.write_text(json.dumps(cfg))
        out_json = tmp_path / "summary.json"
        assert main(["macs", "--model-config", str(p),
                     "--json-out", str(out_json)]) == 0
        summary = json.loads(out_json.read_text())
        halved = (summary["formula_units"] + summary["static_overhead_units"]) / 2
        assert abs(halved - 174e6) / 174e6 < 0.10

    def test_macs_on_descriptor(self, workspace, capsys):
        arch = str(workspace / "arch.json")
        assert main(["macs", "--arch", arch]) == 0
        out = capsys.readouterr().out
        assert "fraction_of_dense" in out


class TestTracePlot:
    def test_renders_svg(self, workspace):
        svg = str(workspace / "trace.svg")
        assert main(["trace-plot", "--trace", str(workspace / "run" / "trace.csv"),
                     "--out", svg]) == 0
        content = open(svg).read()
        assert content.startswith("<svg")
        assert "barcode" in content

    def test_block_fade_renders_light_cells(self, tmp_path):
        # a trace whose layer-1 block probability collapses must render the
        # final block cell near-white while layer 0 stays dark
        rows = ["step,layer,family,index,probability,tau,cost_fraction"]
        for step, p in ((0, 0.9), (10, 0.4), (20, 0.02)):
            for layer, prob in ((0, 0.95), (1, p)):
                rows.append(f"{step},{layer},block,0,{prob},1.0,0.5")
                rows.append(f"{step},{layer},head,0,0.9,1.0,0.5")
                rows.append(f"{step},{layer},dim,0/0,0.9,1.0,0.5")
                rows.append(f"{step},{layer},neuron,0,0.9,1.0,0.5")
        trace = tmp_path / "t.csv"
        trace.write_text("\n".join(rows) + "\n")
        svg = tmp_path / "t.svg"
        assert main(["trace-plot", "--trace", str(trace), "--out", str(svg)]) == 0
        content = open(svg).read()
        assert 'fill="rgb(255,255,255)"' in content  # fully pruned cell
        assert 'fill="rgb(35,45,115)"' in content    # fully surviving cell

    def test_malformed_row_exit_2_with_line(self, tmp_path, capsys):
        trace = tmp_path / "bad.csv"
        trace.write_text("step,layer,family,index,probability,tau,cost_fraction\n"
                         "0,0,head,0,0.9,1.0,0.5\n"
                         "1,zero,head,0,0.9,1.0,0.5\n")
        assert main(["trace-plot", "--trace", str(trace),
                     "--out", str(tmp_path / "x.svg")]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_empty_trace_exit_2(self, tmp_path):
        trace = tmp_path / "empty.csv"
        trace.write_text("step,layer,family,index,probability,tau,cost_fraction\n")
        assert main(["trace-plot", "--trace", str(trace),
                     "--out", str(tmp_path / "x.svg")]) == 2


class TestSweep:
    def test_ratio_parsing_matches_published_pairs(self):
        runs = parse_ratio_spec("2:1@0.9,5:1@1.0,1.5:1@1.2,macro@1.5,micro@1.5")
        got = [(m, mi) for _, m, mi in runs]
        assert got[0] == (0.9, pytest.approx(0.45))
        assert got[1] == (1.0, pytest.approx(0.2))
        assert got[2] == (1.2, pytest.approx(0.8))
        assert got[3] == (1.5, 0.0)
        assert got[4] == (0.0, 1.5)

    def test_malformed_ratio_exit_2(self, workspace):
        assert main(["sweep", "--base-config", str(workspace / "config.json"),
                     "--ratios", "garbage", "--out-dir", str(workspace / "sw")]) == 2
        with pytest.raises(UsageError):
            parse_ratio_spec("2:1")
        with pytest.raises(UsageError):
            parse_ratio_spec("a:b@1.0")

    def test_single_ratio_run(self, workspace):
        out = workspace / "sweep_out"
        assert main(["sweep", "--base-config", str(workspace / "config.json"),
                     "--ratios", "2:1@0.9", "--out-dir", str(out)]) == 0
        pareto = (out / "pareto.csv").read_text().strip().splitlines()
        assert pareto[0].startswith("label,lambda_macro,lambda_micro")
        assert len(pareto) == 2
        assert pareto[1].startswith("2:1@0.9,0.9,0.45")


class TestHelp:
    @pytest.mark.parametrize("cmd", ["train", "extract", "verify", "macs",
                                     "trace-plot", "sweep", "bench"])
    def test_every_subcommand_has_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["macs", "--bogus-flag", "x"])
        assert exc.value.code == 2
