import subprocess
import sys

import pytest

from mtseg.cli import main
from mtseg.config import apply_config, desk_profile, read_config


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--groups", "3", "--frames", "6", "--labelled", "3", "--height", "16", "--width", "16",
                 "--seed", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "iterations = 2\nbatch_size = 4\nnet.depth = 2\nnet.base_filters = 2  # tiny\n"
        "sweep.labelled_fractions = 0.5, 1.0\nsweep.unlabelled_fractions = 1.0\n"
    )
    return p


def test_synth_layout(data_dir):
    assert (data_dir / "manifest.csv").read_text().splitlines()[0] == "group_id,n_frames,n_labelled"
    assert len(list((data_dir / "g00" / "frames").glob("*.png"))) == 6
    assert len(list((data_dir / "g00" / "labels").glob("*.png"))) == 3


def test_train_then_evaluate(data_dir, small_cfg, tmp_path):
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(small_cfg), "--data", str(data_dir), "--mode", "MT", "--labelled-frac", "0.5",
                 "--unlabelled-frac", "1.0", "--fold", "0", "--out", str(runs)]) == 0
    fold_dir = runs / "MT_l0.5_u1" / "fold0"
    for name in ("checkpoint.npz", "metrics.csv", "losses.csv"):
        assert (fold_dir / name).exists()
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--checkpoint", str(fold_dir / "checkpoint.npz"), "--data", str(data_dir),
                 "--fold", "0", "--run-id", "MT_l0.5_u1", "--out", str(out)]) == 0
    # evaluating the saved checkpoint reproduces the training run's metrics
    assert out.read_text() == (fold_dir / "metrics.csv").read_text()


def test_sweep_and_report(data_dir, small_cfg, tmp_path, capsys):
    runs, figs = tmp_path / "runs", tmp_path / "figs"
    assert main(["sweep", "--config", str(small_cfg), "--data", str(data_dir), "--out", str(runs), "--folds", "0,2"]) == 0
    assert "4 cells" in capsys.readouterr().out
    assert sorted(p.name for p in runs.iterdir()) == ["MT_l0.5_u1", "MT_l1_u1", "SL_l0.5_u0", "SL_l1_u0"]
    assert main(["report", "--in", str(runs), "--out", str(figs)]) == 0
    assert (figs / "labelled_fraction.png").exists() and (figs / "unlabelled_fraction.png").exists()
    assert (figs / "table_SL_l1_u0_vs_MT_l1_u1.txt").read_text().startswith("Metric")


def test_unknown_flag_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_key(data_dir, tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("net.depthh = 3\n")
    assert main(["train", "--config", str(p), "--data", str(data_dir)]) == 1
    assert "depthh" in capsys.readouterr().err


def test_bad_config_syntax(data_dir, tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("this line has no separator\n")
    assert main(["train", "--config", str(p), "--data", str(data_dir)]) == 1
    assert "bad config" in capsys.readouterr().err


def test_missing_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nothing")]) == 1
    assert main(["train"]) == 1
    assert "--data" in capsys.readouterr().err


def test_fold_out_of_range(data_dir, capsys):
    assert main(["train", "--data", str(data_dir), "--fold", "9"]) == 1
    assert "out of range" in capsys.readouterr().err


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.001\nema.alpha_rampup = 0.95\nnoise.scale_range = 0.8, 1.2\naugment.brightness = -0.2, 0.2\n"
                 "dice_squared = false\ndata.root = somewhere\n")
    values = read_config(p)
    cfg = apply_config(desk_profile(), values)
    assert cfg.lr == 0.001 and cfg.ema.alpha_rampup == 0.95 and cfg.noise.scale_range == (0.8, 1.2)
    assert cfg.augment.brightness == (-0.2, 0.2) and cfg.dice_squared is False
    assert cfg.iterations == 800 and cfg.net.depth == 3 and values["data.root"] == "somewhere"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mtseg", "--help"], capture_output=True, text=True, check=True)
    for sub in ("synth", "train", "sweep", "evaluate", "report"):
        assert sub in out.stdout
