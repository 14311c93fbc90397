import json

import numpy as np
import pytest

from monorigid.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from monorigid.synthscene import read_dataset

TINY_MODEL = {
    "feature_channels": 8, "encoder_channels": [4, 4, 8, 8, 8], "decoder_channels": [4, 4, 4, 4],
    "ego_channels": 4, "instance": {"N": 2, "embed_dim": 8, "layers": 1, "heads": 2, "roi_size": 3,
                                    "roi_channels": 8},
}
TINY_TRAIN = {"epochs": 1, "lr_drop_epoch": 0, "batch": 2}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--out", str(out), "--sequences", "2", "--frames", "3", "--width", "64",
                 "--height", "32", "--seed", "4"]) == EXIT_OK
    return out


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_INVALID
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == EXIT_INVALID
        assert "usage" in capsys.readouterr().err

    def test_missing_flag(self):
        assert main(["train", "--data", "x"]) == EXIT_INVALID

    @pytest.mark.parametrize("cmd", ["gen", "train", "eval", "gradcheck", "validate-warp"])
    def test_help_lists_defaults(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        options = text.split("options:")[1]
        flags = [ln.split()[0] for ln in options.splitlines() if ln.strip().startswith("--")]
        # one default annotation per flag besides --help
        assert flags and options.count("(default:") == len(flags)

    @pytest.mark.parametrize("cmd", ["gen", "train"])
    def test_seed_flag_on_stochastic_commands(self, cmd, capsys):
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        assert "--seed" in capsys.readouterr().out


class TestGen:
    def test_layout(self, dataset):
        manifest, seqs = read_dataset(dataset)
        assert len(seqs) == 2 and all(len(s) == 3 for s in seqs)
        assert seqs[0][0].image.shape == (32, 64, 3)

    def test_invalid_config(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "d"), "--frames", "2"]) == EXIT_INVALID
        assert main(["gen", "--out", str(tmp_path / "d"), "--sequences", "0"]) == EXIT_INVALID

    def test_deterministic(self, dataset, tmp_path):
        again = tmp_path / "again"
        main(["gen", "--out", str(again), "--sequences", "2", "--frames", "3", "--width", "64",
              "--height", "32", "--seed", "4"])
        for f in sorted(p for p in dataset.rglob("*") if p.is_file()):
            assert f.read_bytes() == (again / f.relative_to(dataset)).read_bytes(), f


class TestValidateWarp:
    def test_passes(self, dataset, capsys):
        assert main(["validate-warp", "--data", str(dataset)]) == EXIT_OK
        assert "lowest agreement 1.0000" in capsys.readouterr().out

    def test_impossible_tolerance_fails(self, dataset):
        assert main(["validate-warp", "--data", str(dataset), "--tol", "0"]) == EXIT_INVALID

    def test_missing_dataset(self, tmp_path):
        assert main(["validate-warp", "--data", str(tmp_path / "none")]) == EXIT_RUNTIME


class TestGradcheck:
    def test_single_op(self, capsys):
        assert main(["gradcheck", "--op", "mul", "--seeds", "2"]) == EXIT_OK
        assert "ok   mul" in capsys.readouterr().out

    def test_pipeline(self):
        assert main(["gradcheck", "--pipeline", "--seeds", "1"]) == EXIT_OK

    def test_unknown_op(self):
        assert main(["gradcheck", "--op", "nope"]) == EXIT_INVALID

    def test_failure_exit_code(self):
        assert main(["gradcheck", "--op", "exp", "--seeds", "1", "--tol", "0"]) == EXIT_INVALID


class TestTrainEval:
    def test_round_trip(self, dataset, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": TINY_MODEL, "train": TINY_TRAIN}))
        out = tmp_path / "run"
        assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out),
                     "--ablation", "A6", "--seed", "3"]) == EXIT_OK
        run = json.loads((out / "run_config.json").read_text())
        assert run["train"]["seed"] == 3 and run["model"]["piecewise_rigid"] is True
        rep = tmp_path / "rep" / "report.json"
        assert main(["eval", "--data", str(dataset), "--checkpoint", str(out / "checkpoint.ckpt"),
                     "--report", str(rep), "--export-depth", str(tmp_path / "png")]) == EXIT_OK
        d = json.loads(rep.read_text())
        assert set(d["rows"]) == {"all", "static", "dynamic", "per_category_mean"}
        assert d["metadata"]["weights"] == "ema"
        assert (tmp_path / "rep" / "report.csv").exists()
        assert len(list((tmp_path / "png").rglob("*.png"))) == 6

    def test_bad_config(self, dataset, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {"no_such_field": 1}}))
        assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID
        cfg.write_text("{not json")
        assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--report", str(tmp_path / "r.json")]) == EXIT_RUNTIME


def test_external_masks_used(dataset, tmp_path):
    from PIL import Image

    from monorigid.cli import main as cli_main

    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "train": TINY_TRAIN}))
    cli_main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "r")])
    masks = tmp_path / "masks"
    _, seqs = read_dataset(dataset)
    for seq in seqs:
        (masks / seq[0].seq_id).mkdir(parents=True)
        for f in seq:
            Image.fromarray(np.zeros((32, 64), np.uint8)).save(masks / f.seq_id / f"frame_{f.index}.png")
    rep = tmp_path / "rep.json"
    assert cli_main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "r" / "checkpoint.ckpt"),
                     "--report", str(rep), "--dynamic-masks", str(masks)]) == EXIT_OK
    d = json.loads(rep.read_text())
    assert d["rows"]["dynamic"] is None and d["metadata"]["dynamic_masks"] == "external"
