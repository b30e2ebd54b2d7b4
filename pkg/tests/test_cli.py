import os
import subprocess
import sys

import numpy as np
import pytest

from aet.cli import read_ppm, run, write_ppm
from aet.config import load_config
from aet.traineval import EncoderCheckpoint, import_metrics

TINY = """\
epochs = 2
batch_size = 8
eval_every = 1
knn_k = 3
wall_clock = false
synthetic.n_per_class = 6
synthetic.image_size = 16
synthetic.supersample = 2
nin.num_blocks = 2
nin.convs_per_block = 1
nin.widths = 6, 6
nin.kernels = 3, 3
nin.downsample_after = 1
nin.image_size = 16
sgd.base_lr = 0.05
sgd.drop_epochs = 1
probe.kind = fc_1
probe.epochs = 2
probe.batch_size = 8
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_train_writes_run_artifacts(trained):
    cfg, out = trained
    names = set(os.listdir(out))
    assert {"run.cfg", "final.ckpt", "metrics.csv", "ckpt_epoch0001.ckpt", "ckpt_epoch0002.ckpt"} <= names
    assert len(import_metrics(out / "metrics.csv")) == 2
    # run.cfg is the effective config: the file plus the resolved output directory
    assert load_config(out / "run.cfg") == load_config(cfg, {"out_dir": str(out)})


def test_knn_prints_parseable_line(trained, capsys):
    _, out = trained
    assert run(["knn", "--ckpt", str(out / "final.ckpt"), "--k", "3"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("knn_error=")
    assert 0.0 <= float(line.split("=", 1)[1]) <= 1.0


def test_probe_prints_parseable_line(trained, capsys):
    _, out = trained
    assert run(["probe", "--ckpt", str(out / "final.ckpt"), "--kind", "fc_2"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("probe_error=") and 0.0 <= float(line[len("probe_error="):]) <= 1.0


def test_sweep_and_export_plots(trained, tmp_path, capsys):
    _, out = trained
    sweep = tmp_path / "sweep.csv"
    assert run(["sweep", "--ckpt", str(out / "final.ckpt"), "--ks", "1,3", "--out", str(sweep)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "k,knn_error" and len(printed) == 3
    assert sweep.read_text().splitlines() == printed

    plots = tmp_path / "plots"
    assert run(["export-plots", "--metrics", str(out / "metrics.csv"), "--sweep", str(sweep),
                "--out", str(plots)]) == 0
    assert sorted(os.listdir(plots)) == ["epoch_vs_aet_loss.txt", "epoch_vs_knn_error.txt",
                                         "epoch_vs_probe_error.txt", "k_vs_knn_error.txt"]
    log = import_metrics(out / "metrics.csv")
    series = [line.split() for line in (plots / "epoch_vs_aet_loss.txt").read_text().splitlines()]
    assert [(int(e), float(v)) for e, v in series] == [(r.epoch, r.aet_loss) for r in log.rows]
    k_series = (plots / "k_vs_knn_error.txt").read_text().split()
    assert k_series[0::2] == ["1", "3"]


def test_export_plots_rejects_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("epoch,aet_loss,lr,probe_error,knn_error,wall_seconds\n1,0.5,0.1,,,\nx,1,1,,,\n")
    assert run(["export-plots", "--metrics", str(bad), "--out", str(tmp_path / "p")]) == 2
    assert "m.csv:3:" in capsys.readouterr().err


def test_resume_continues_to_more_epochs(trained, tmp_path):
    cfg, out = trained
    more = tmp_path / "more"
    assert run(["train", "--resume", str(out / "final.ckpt"), "--epochs", "3", "--out", str(more)]) == 0
    ckpt = EncoderCheckpoint.load(more / "final.ckpt")
    assert ckpt.epoch == 3
    straight = tmp_path / "straight"
    assert run(["train", "--config", str(cfg), "--epochs", "3", "--out", str(straight)]) == 0
    assert (more / "metrics.csv").read_bytes() == (straight / "metrics.csv").read_bytes()


def test_warp_demo_files(trained, tmp_path):
    cfg, _ = trained
    out = tmp_path / "demo"
    assert run(["warp-demo", "--config", str(cfg), "--n", "3", "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert names == ["pair00_original.ppm", "pair00_transformed.ppm", "pair01_original.ppm",
                     "pair01_transformed.ppm", "pair02_original.ppm", "pair02_transformed.ppm",
                     "pairs_grid.ppm", "targets.txt"]
    grid = read_ppm(out / "pairs_grid.ppm")
    assert grid.shape == (3, 32, 48)
    assert np.array_equal(grid[:, :16, :16], read_ppm(out / "pair00_original.ppm"))
    rows = [l.split() for l in (out / "targets.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 3 and all(len(r) == 10 for r in rows)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(3, 5, 7)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img)


def test_set_overrides_file_and_flag_overrides_set(trained, tmp_path):
    cfg, _ = trained
    out = tmp_path / "o"
    assert run(["train", "--config", str(cfg), "--set", "epochs=1", "--set", "seed=4", "--seed", "5",
                "--out", str(out)]) == 0
    written = load_config(out / "run.cfg")
    assert written.epochs == 1 and written.seed == 5


def test_out_dir_from_environment(trained, tmp_path, monkeypatch):
    cfg, _ = trained
    monkeypatch.setenv("AET_OUT_DIR", str(tmp_path / "env"))
    assert run(["train", "--config", str(cfg), "--epochs", "1"]) == 0
    assert os.path.exists(tmp_path / "env" / "out" / "final.ckpt")


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--bogus"],
    ["knn"],
    ["sweep", "--ckpt", "x.ckpt", "--ks", "a,b"],
    ["train", "--set", "novalue"],
    ["train", "--set", "nope.key=1"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert run(["knn", "--ckpt", str(tmp_path / "missing.ckpt")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_cifar_path_exits_1(tmp_path):
    assert run(["train", "--set", "data.name=cifar10", "--set", f"data.path={tmp_path / 'none'}",
                "--out", str(tmp_path)]) == 1


def test_help_exits_0(capsys):
    assert run(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "aet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "warp-demo" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "aet", "train", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 1
