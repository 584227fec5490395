from pathlib import Path

import numpy as np
import pytest

import mpvconv.ops
from mpvconv import data, metrics
from mpvconv.bench import run_bench
from mpvconv.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main
from mpvconv.checkpoint import load_checkpoint, restore_model
from mpvconv.model import predict_batch

SMOKE = str(Path(__file__).parent.parent / "configs" / "smoke.cfg")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = run("train", "--config", SMOKE, "--checkpoint", out / "m.ckpt", "--out", out / "m.log")
    return code, out


def test_train_writes_checkpoint_and_log(trained):
    code, out = trained
    assert code == EXIT_OK and (out / "m.ckpt").is_file()
    lines = (out / "m.log").read_text().splitlines()
    assert len(lines) == 2
    assert [len(ln.split("\t")) for ln in lines] == [4, 4] and lines[0].startswith("1\t")


def test_train_log_defaults_next_to_checkpoint(tmp_path):
    assert run("train", "--config", SMOKE, "--checkpoint", tmp_path / "m.ckpt") == EXIT_OK
    assert len((tmp_path / "m.log").read_text().splitlines()) == 2


def test_train_logs_are_byte_identical(trained, tmp_path):
    _, out = trained
    assert run("train", "--config", SMOKE, "--checkpoint", tmp_path / "m.ckpt", "--out", tmp_path / "m.log") == 0
    assert (tmp_path / "m.log").read_bytes() == (out / "m.log").read_bytes()
    assert (tmp_path / "m.ckpt").read_bytes() == (out / "m.ckpt").read_bytes()


def test_seed_override_changes_the_run(trained, tmp_path):
    _, out = trained
    run("train", "--config", SMOKE, "--seed", 1, "--checkpoint", tmp_path / "m.ckpt", "--out", tmp_path / "m.log")
    assert (tmp_path / "m.log").read_bytes() != (out / "m.log").read_bytes()


def test_unknown_key_exits_nonzero_naming_it(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nwarmup_steps = 3\n")
    assert run("train", "--config", cfg, "--checkpoint", tmp_path / "m.ckpt") == EXIT_INVALID
    assert "warmup_steps" in capsys.readouterr().err
    assert not (tmp_path / "m.ckpt").exists()


def test_missing_checkpoint(tmp_path, capsys):
    assert run("eval", "--config", SMOKE, "--checkpoint", tmp_path / "nope.ckpt") == EXIT_INVALID
    assert "nope.ckpt" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"MPVCKPT\x01")
    assert run("eval", "--config", SMOKE, "--checkpoint", tmp_path / "bad.ckpt") == EXIT_INVALID


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exits_numeric(tmp_path):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(Path(SMOKE).read_text() + "learning_rate = 1e308\n")
    # a huge step drives the parameters to inf, and the next loss is NaN
    assert run("train", "--config", cfg, "--checkpoint", tmp_path / "m.ckpt") == EXIT_NUMERIC


def test_eval_report_matches_metrics(trained, tmp_path, capsys):
    _, out = trained
    assert run("eval", "--config", SMOKE, "--checkpoint", out / "m.ckpt", "--out", tmp_path / "r.txt",
               "--dump", tmp_path / "dumps") == EXIT_OK
    printed = capsys.readouterr().out
    assert printed == (tmp_path / "r.txt").read_text()
    report = dict(line.split("\t", 1) for line in printed.splitlines() if not line.startswith("class"))

    from mpvconv.runconfig import load_config
    val = load_config(SMOKE).datasets()[1]
    preds = predict_batch(restore_model(load_checkpoint(out / "m.ckpt")), val.samples)
    ious = [metrics.shape_iou(c.labels, p, range(2)) for c, p in zip(val.samples, preds)]
    true, pred = np.concatenate([c.labels for c in val.samples]), np.concatenate(preds)
    assert report["mIoU"] == f"{metrics.dataset_miou(ious):.6f}"
    assert report["mAcc"] == f"{metrics.mean_accuracy(true, pred, 2):.6f}"
    assert report["accuracy"] == f"{metrics.overall_accuracy(true, pred):.6f}"
    dumps = sorted((tmp_path / "dumps").iterdir())
    assert len(dumps) == len(val)
    _, t, p = data.read_predictions(dumps[0])
    assert np.array_equal(p, preds[0]) and np.array_equal(t, val.samples[0].labels)


def test_eval_overfit_training_set(tmp_path, capsys):
    cfg = tmp_path / "overfit.cfg"
    cfg.write_text("n_train = 1\nn_val = 1\nbatch_size = 1\nepochs = 60\nseed = 0\n")
    assert run("train", "--config", cfg, "--checkpoint", tmp_path / "m.ckpt") == EXIT_OK
    from mpvconv.runconfig import load_config
    data.save_dataset(load_config(cfg).datasets()[0], tmp_path / "train")
    capsys.readouterr()
    assert run("eval", "--checkpoint", tmp_path / "m.ckpt", "--data", tmp_path / "train") == EXIT_OK
    miou = float(capsys.readouterr().out.splitlines()[0].split("\t")[1])
    assert miou > 0.99


def test_eval_needs_data_source(trained):
    _, out = trained
    assert run("eval", "--checkpoint", out / "m.ckpt") == EXIT_INVALID


@pytest.fixture(scope="module")
def gradcheck_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("gc") / "report.txt"
    return run("gradcheck", "--out", out), out.read_bytes()


def test_gradcheck_passes(gradcheck_report):
    code, text = gradcheck_report
    assert code == EXIT_OK
    rows = [ln for ln in text.decode().splitlines() if not ln.startswith("#")]
    # 5 seeds x (8 op checks + 8 combination modes)
    assert len(rows) == 80 and all(ln.endswith("ok") for ln in rows)
    errors = [float(ln.split("max_rel_err=")[1].split("\t")[0]) for ln in rows]
    assert max(errors) < 1e-4


def test_gradcheck_report_is_deterministic(gradcheck_report, tmp_path):
    _, text = gradcheck_report
    assert run("gradcheck", "--out", tmp_path / "again.txt") == EXIT_OK
    assert (tmp_path / "again.txt").read_bytes() == text


def test_gradcheck_catches_sign_flip(monkeypatch, tmp_path):
    original = mpvconv.ops.relu_backward
    monkeypatch.setattr(mpvconv.ops, "relu_backward", lambda dout, x: -original(dout, x))
    assert run("gradcheck", "--out", tmp_path / "r.txt") == EXIT_NUMERIC
    assert "FAIL" in (tmp_path / "r.txt").read_text()


def test_ablate_table(tmp_path, capsys):
    assert run("ablate", "--config", SMOKE, "--out", tmp_path / "t.txt") == EXIT_OK
    text = (tmp_path / "t.txt").read_text()
    assert "not an expectation" in text
    rows = {ln.split("\t")[0]: ln.split("\t") for ln in text.splitlines() if not ln.startswith(("#", "variant"))}
    assert list(rows) == ["B", "G", "init_only"]
    assert rows["B"][4] == rows["init_only"][4] and rows["B"][5] == rows["init_only"][5]
    assert rows["G"][6] == "85.76"


def test_ablate_rejects_unknown_variant(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(Path(SMOKE).read_text().replace("ablate_variants = B, G, init_only", "ablate_variants = B, Q"))
    assert run("ablate", "--config", cfg) == EXIT_INVALID


def test_bench_report(tmp_path):
    assert run("bench", "--config", SMOKE, "--out", tmp_path / "b.txt") == EXIT_OK
    names = {ln.split("\t")[0] for ln in (tmp_path / "b.txt").read_text().splitlines()[2:]}
    assert {"voxelize", "devoxelize", "conv3d", "pointwise_linear", "batch_norm", "layer"} <= names


def test_bench_conv3d_grows_with_resolution():
    rows = {(r.name, r.resolution): r for r in run_bench((8, 16), repeats=5, points=256, channels=16)}
    assert rows["conv3d", 16].median_seconds > rows["conv3d", 8].median_seconds
    assert rows["conv3d", 16].peak_bytes > rows["conv3d", 8].peak_bytes


def test_bench_medians_are_stable():
    # medians of 5 runs for the heavier rows; sub-millisecond ops are timer noise
    first = run_bench((16,), repeats=5, points=512, channels=32)
    second = run_bench((16,), repeats=5, points=512, channels=32)
    for a, b in zip(first, second):
        if a.name in ("conv3d", "layer"):
            assert abs(a.median_seconds - b.median_seconds) / min(a.median_seconds, b.median_seconds) < 0.2, a.name
