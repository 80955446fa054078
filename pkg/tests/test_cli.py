import numpy as np
import pytest

from contextagg import cli
from contextagg.cli import main, read_csv, read_pgm, to_pgm
from contextagg.network import build_network, preset, save_checkpoint

TINY_TRAIN = ["--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "2", "--dataset-size", "8", "--val-size", "4"]


@pytest.fixture(scope="module")
def mini_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "mini.ctnr"
    save_checkpoint(build_network(preset("container-mini"), seed=1), path)
    return path


def test_train_writes_outputs_and_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["train", "--preset", "container-mini", "--seed", "7", "--out-dir", str(tmp_path / d), *TINY_TRAIN]) == 0
    for name in ("train_log.csv", "val_log.csv", "model.ctnr", "model.ctnr.cfg", "train.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_config_file(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("[train]\npreset = container-light-mini\nbatch_size = 2\n")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--epochs", "1", "--steps-per-epoch", "1", "--val-size", "2"]) == 0
    assert "container-light-mini" in (tmp_path / "o" / "train.cfg").read_text()


def test_train_unknown_preset_lists_presets(tmp_path, capsys):
    assert main(["train", "--preset", "resnet", "--out-dir", str(tmp_path)]) == 1
    assert "container-mini" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("[train]\nbase_lr = 1e300\nbatch_size = 2\n")
    code = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--epochs", "2", "--steps-per-epoch", "4", "--val-size", "2"])
    assert code == 2


def test_bad_flag_is_config_error():
    assert main(["train", "--epochs", "many"]) == 1
    assert main(["frobnicate"]) == 1


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("CAK_WORKERS", "3")
    assert cli.resolve_workers(None) == 3
    assert cli.resolve_workers(2) == 2
    monkeypatch.setenv("CAK_WORKERS", "zero")
    with pytest.raises(cli.ConfigError):
        cli.resolve_workers(None)
    monkeypatch.delenv("CAK_WORKERS")
    assert cli.resolve_workers(None) == 1


def test_verify_mix_passes(capsys):
    assert main(["verify", "--suite", "mix"]) == 0
    out = capsys.readouterr().out
    assert "passed" in out and "FAIL" not in out


def test_verify_failure_exit_code(monkeypatch, capsys):
    from contextagg.verify import CaseResult

    monkeypatch.setattr(cli, "run_suite", lambda name: [CaseResult("mix", "broken case", 1.0, 0.0)])
    assert main(["verify", "--suite", "mix"]) == 3
    assert "broken case" in capsys.readouterr().err


def test_count_prints_reference_and_csv(tmp_path, capsys):
    assert main(["count", "--preset", "container", "--resolution", "224", "--csv", str(tmp_path / "c.csv")]) == 0
    out = capsys.readouterr().out
    assert "reference 22.1M" in out and "deviation" in out
    assert (tmp_path / "c.csv").read_text().startswith("stage,params,flops,dynamic_flops")


def test_count_light_flags_static_stages(capsys):
    assert main(["count", "--preset", "container-light"]) == 0
    out = capsys.readouterr().out
    for s in (1, 2, 3):
        assert f"stage {s} dynamic share none" in out


def test_count_invalid_resolution():
    assert main(["count", "--preset", "container", "--resolution", "100"]) == 1
    assert main(["count", "--preset", "container", "--resolution", "abc"]) == 1


def test_viz_grid_shape_and_csv_roundtrip(tmp_path, mini_ckpt):
    from contextagg.network import load_checkpoint

    net = load_checkpoint(mini_ckpt)
    for stage, (h, w) in enumerate(net.cfg.grids(), 1):
        stem = tmp_path / f"s{stage}"
        assert main(["viz-affinity", "--checkpoint", str(mini_ckpt), "--stage", str(stage), "--block", "0", "--out", str(stem)]) == 0
        assert read_pgm(f"{stem}.pgm").shape == (h, w)
        row = cli.static_row(net.context_blocks()[stage - 1][0], (h // 2) * w + w // 2, 0)
        assert np.array_equal(read_csv(f"{stem}.csv"), row)


def test_viz_delta_kernel_single_bright_pixel(tmp_path, mini_ckpt):
    from contextagg.network import load_checkpoint, save_checkpoint

    net = load_checkpoint(mini_ckpt)
    kern = net.context_blocks()[0][0].static.kernel
    delta = np.zeros(kern.shape)
    delta[:, 1, 1] = 1.0
    kern.assign(delta)
    save_checkpoint(net, tmp_path / "d.ctnr")
    assert main(["viz-affinity", "--checkpoint", str(tmp_path / "d.ctnr"), "--stage", "1", "--block", "0", "--position", "center", "--out", str(tmp_path / "d")]) == 0
    img = read_pgm(tmp_path / "d.pgm")
    h, w = img.shape
    assert img[h // 2, w // 2] == 255 and np.count_nonzero(img) == 1


def test_viz_dense_row_roundtrip(tmp_path):
    net = build_network(preset("container-pam-mini"), seed=2, dtype="f64")
    save_checkpoint(net, tmp_path / "p.ctnr")
    assert main(["viz-affinity", "--checkpoint", str(tmp_path / "p.ctnr"), "--stage", "2", "--block", "1", "--position", "3,4", "--out", str(tmp_path / "p.csv")]) == 0
    blk = net.context_blocks()[1][1]
    w = blk.cfg.grid[1]
    assert np.array_equal(read_csv(tmp_path / "p.csv"), blk.static.dense.data[0].T[3 * w + 4].reshape(blk.cfg.grid))


def test_viz_dynamic_only_block_is_config_error(tmp_path, capsys):
    save_checkpoint(build_network(preset("h-deit-s-mini")), tmp_path / "h.ctnr")
    assert main(["viz-affinity", "--checkpoint", str(tmp_path / "h.ctnr"), "--stage", "1", "--block", "0", "--out", str(tmp_path / "x")]) == 1
    assert "conv" in capsys.readouterr().err


def test_viz_bad_indices(tmp_path, mini_ckpt):
    base = ["viz-affinity", "--checkpoint", str(mini_ckpt), "--out", str(tmp_path / "x")]
    assert main([*base, "--stage", "5", "--block", "0"]) == 1
    assert main([*base, "--stage", "1", "--block", "9"]) == 1
    assert main([*base, "--stage", "1", "--block", "0", "--position", "99,0"]) == 1
    assert main(["viz-affinity", "--checkpoint", str(tmp_path / "missing.ctnr"), "--stage", "1", "--block", "0", "--out", "x"]) == 1


def test_pgm_constant_grid_is_black():
    data = to_pgm(np.full((2, 3), 0.5))
    assert data.startswith(b"P5\n3 2\n255\n") and data.endswith(bytes(6))


def test_bench_runs_and_rejects_zero(capsys):
    assert main(["bench", "--preset", "container-light-mini", "--batch", "2", "--reps", "2"]) == 0
    assert "images/s" in capsys.readouterr().out
    assert main(["bench", "--preset", "container-mini", "--batch", "0"]) == 1


def test_bench_default_reps():
    args = cli.build_parser().parse_args(["bench", "--preset", "container"])
    assert args.reps == 10 and args.batch == 8
