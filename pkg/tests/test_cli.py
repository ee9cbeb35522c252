import numpy as np
import pytest

from passr import cli, data
from passr import network as net

TINY = ["--desk", "--channels", "4", "--steps", "2", "--batch", "1", "--patch-h", "8", "--patch-w", "24",
        "--steps-per-epoch", "2"]


def only_run(base, prefix):
    runs = [p for p in base.iterdir() if p.name.startswith(prefix)]
    assert len(runs) == 1
    return runs[0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert cli.main(["train", *TINY, "--out-dir", str(out)]) == 0
    return only_run(out, "train-")


def test_train_writes_checkpoint_log_and_figure(trained, capsys):
    for f in ("last.ckpt", "best.ckpt", "train.tsv", "val.tsv", "network.cfg", "training.png"):
        assert (trained / f).exists(), f
    assert (trained / "training.png").read_bytes()[:4] == b"\x89PNG"
    assert net.NetworkConfig.from_text((trained / "network.cfg").read_text()).channels == 4


def test_train_prints_tsv(tmp_path, capsys):
    assert cli.main(["train", *TINY, "--steps", "1", "--out-dir", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("run\t") and lines[1] == "psnr\tssim\tbicubic_psnr\tattention_mass"
    assert len(lines[2].split("\t")) == 4


def test_identical_train_runs_give_identical_checkpoints(tmp_path):
    for _ in range(2):
        assert cli.main(["train", *TINY, "--out-dir", str(tmp_path)]) == 0
    a, b = sorted(tmp_path.iterdir())
    assert a != b
    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()


def test_synth_then_eval_identical_manifests(tmp_path, capsys):
    assert cli.main(["synth", "--count", "2", "--height", "16", "--width", "48", "--out-dir", str(tmp_path)]) == 0
    manifest = capsys.readouterr().out.strip()
    assert cli.main(["eval", "--manifest", manifest, "--pred-manifest", manifest, "--out-dir", str(tmp_path)]) == 0
    last = capsys.readouterr().out.splitlines()[-1].split("\t")
    assert last[0] == "mean" and float(last[1]) == 99.0 and float(last[2]) == 1.0
    assert (only_run(tmp_path, "eval-") / "eval.tsv").exists()


def test_eval_with_checkpoint(trained, tmp_path, capsys):
    manifest = data.write_synthetic_dataset(tmp_path / "ds", 2, 16, 48, 2, seed=3)
    assert cli.main(["eval", "--manifest", str(manifest), "--ckpt", str(trained / "last.ckpt"),
                     "--out-dir", str(tmp_path)]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "image\tpsnr\tssim" and len(rows) == 4


def test_sr_writes_upscaled_png(trained, tmp_path, rng):
    data.save_image(tmp_path / "l.png", rng.random((6, 10, 3)))
    data.save_image(tmp_path / "r.png", rng.random((6, 10, 3)))
    out = tmp_path / "o.png"
    assert cli.main(["sr", "--left", str(tmp_path / "l.png"), "--right", str(tmp_path / "r.png"),
                     "--scale", "2", "--ckpt", str(trained / "last.ckpt"), "--out", str(out)]) == 0
    assert data.load_image(out).shape == (12, 20, 3)


def test_inspect_dumps_maps(trained, tmp_path, capsys):
    assert cli.main(["inspect", "--ckpt", str(trained / "last.ckpt"), "--row", "5",
                     "--out-dir", str(tmp_path)]) == 0
    run = only_run(tmp_path, "inspect-")
    from PIL import Image
    with Image.open(run / "attention_row5.png") as im:
        assert im.mode == "L" and im.size == (96, 96)
    for f in ("valid_l2r.png", "valid_r2l.png", "expected_disparity.tsv", "expected_disparity.png",
              "attention.png", "summary.tsv"):
        assert (run / f).exists(), f
    assert np.loadtxt(run / "expected_disparity.tsv").shape == (32, 96)
    assert "attention_mass_at_gt" in (run / "summary.tsv").read_text()


def test_ablate_writes_report_and_figures(tmp_path, capsys):
    assert cli.main(["ablate", "--axis", "no_pam", *TINY, "--steps", "1", "--out-dir", str(tmp_path)]) == 0
    run = only_run(tmp_path, "ablate-no_pam-")
    report = (run / "report.tsv").read_text().splitlines()
    assert report[0].startswith("variant\tinput\tpsnr") and len(report) == 3
    assert (run / "psnr.png").exists() and (run / "attention_mass.png").exists()


def test_config_file_is_overridden_by_flags(tmp_path):
    (tmp_path / "c.txt").write_text("channels=6\nlr=0.01\n")
    args = cli.build_parser().parse_args(["train", "--desk", "--config", str(tmp_path / "c.txt"), "--lr", "0.02"])
    ncfg, tcfg = cli.configs(args)
    assert ncfg.channels == 6 and tcfg.lr == 0.02


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--scale", "3"], ["sr", "--left", "x.png"],
                                  ["ablate", "--axis", "nope"]])
def test_bad_flags_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["sr", "--left", "l.png", "--right", "r.png", "--ckpt", "missing.ckpt", "--out", "o.png"],
    ["eval", "--manifest", "m.txt"],
    ["train", "--config", "nope.txt"],
])
def test_runtime_errors_exit_1_with_one_line(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"passr {argv[0]}: error:")


def test_unknown_config_key_is_reported(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("colour=blue\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.txt"), "--out-dir", str(tmp_path)]) == 1
    assert "colour" in capsys.readouterr().err


def test_commands_do_not_touch_inputs(trained, tmp_path, rng):
    data.save_image(tmp_path / "l.png", rng.random((6, 10, 3)))
    before = (tmp_path / "l.png").read_bytes(), (trained / "last.ckpt").read_bytes()
    cli.main(["sr", "--left", str(tmp_path / "l.png"), "--right", str(tmp_path / "l.png"),
              "--ckpt", str(trained / "last.ckpt"), "--out", str(tmp_path / "o.png")])
    assert ((tmp_path / "l.png").read_bytes(), (trained / "last.ckpt").read_bytes()) == before
