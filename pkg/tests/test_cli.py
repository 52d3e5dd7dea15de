import hashlib
import json
import math

import numpy as np
import pytest

from cect_forge.cli import RunConfig, UsageError, load_run_config, main
from cect_forge.phantom import Volume, load_volume, save_volume

TINY_INI = """
[phantom]
image_size = 32
acquisition_size = 256
pixel_spacing_mm = 6.4

[model]
encoder_channels = 2, 2, 4, 4, 8, 8, 16, 16
bottleneck_channels = 16
decoder_channels = 16, 8, 8, 4, 4, 2, 2, 2

[train]
epochs = 2
batch_size = 4
learning_rate = 0.001
"""


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    assert main(["generate", "--out", str(root / "data"), "--count", "10", "--seed", "3", "--config", str(cfg)]) == 0
    return root, cfg


# configuration ---------------------------------------------------------------

def test_precedence_flags_over_file_over_defaults(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 7\nbatch_size = 2\n[loss]\nbeta = 0.5\n")
    run = load_run_config(ini, {("train", "epochs"): 3})
    assert run.train.epochs == 3
    assert run.train.batch_size == 2
    assert run.loss.beta == 0.5
    assert run.loss.alpha == RunConfig().loss.alpha


def test_unknown_key_and_section_rejected(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepoch = 7\n")
    with pytest.raises(UsageError, match="epoch"):
        load_run_config(ini)
    ini.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(UsageError, match="optimizer"):
        load_run_config(ini)


def test_resolved_config_reproduces(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(TINY_INI)
    run = load_run_config(ini, {("train", "seed"): 9})
    again = tmp_path / "resolved.ini"
    again.write_text(run.to_ini())
    assert load_run_config(again) == run


def test_epochs_zero_rejected(tiny, capsys):
    root, cfg = tiny
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "bad"),
              "--epochs", "0"])
    assert e.value.code == 2
    assert not (root / "bad").exists()


# generate ---------------------------------------------------------------------

def test_generate_manifest(tiny):
    root, _ = tiny
    m = json.loads((root / "data" / "manifest.json").read_text())
    assert len(m["cases"]) == 10
    assert [len(m["split"][k]) for k in ("train", "val", "test")] == [8, 1, 1]
    case = m["cases"][0]
    ct = load_volume(root / "data" / case["ct"])
    mask = load_volume(root / "data" / case["chamber_mask"])
    assert ct.data.shape == (1, 32, 32)
    assert case["chamber_area_px"] == [int(mask.data.sum())]
    assert case["displacement"] is None
    assert (root / "data" / "resolved_config.ini").exists()


def test_generate_is_idempotent(tiny, tmp_path):
    root, cfg = tiny
    assert main(["generate", "--out", str(tmp_path / "again"), "--count", "10", "--seed", "3",
                 "--config", str(cfg)]) == 0
    for f in sorted((root / "data").iterdir()):
        assert _digest(f) == _digest(tmp_path / "again" / f.name), f.name


def test_generate_rejects_bad_count(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["generate", "--out", str(tmp_path / "x"), "--count", "0"])
    assert e.value.code == 2


def test_generate_150_default(tmp_path, capsys):
    code, out, _ = _run(capsys, "generate", "--out", tmp_path / "d", "--count", 150, "--seed", 7)
    assert code == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(m["cases"]) == 150
    assert [len(m["split"][k]) for k in ("train", "val", "test")] == [120, 10, 20]


# register ------------------------------------------------------------------------

def test_displace_and_register_round_trip(tmp_path, capsys):
    code, _, _ = _run(capsys, "generate", "--out", tmp_path / "d", "--count", 2, "--seed", 11, "--displace")
    assert code == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    for case in m["cases"]:
        t = case["displacement"]
        assert abs(t["tx"]) <= 6 and abs(t["ty"]) <= 6 and abs(t["theta"]) <= 12
        code, out, _ = _run(capsys, "register", "--moving", tmp_path / "d" / case["cect"],
                            "--fixed", tmp_path / "d" / case["ct"], "--out", tmp_path / f"{case['id']}_reg.huv")
        assert code == 0
        got = json.loads(out)["slices"][0]
        # recovered transform undoes the injected one
        th = math.radians(t["theta"])
        inv_tx = -(math.cos(th) * t["tx"] + math.sin(th) * t["ty"])
        inv_ty = -(-math.sin(th) * t["tx"] + math.cos(th) * t["ty"])
        assert abs(got["tx"] - inv_tx) <= 0.5 and abs(got["ty"] - inv_ty) <= 0.5
        assert abs(got["theta"] + t["theta"]) <= 0.5
        assert got["mi"] >= got["mi_initial"]
        assert load_volume(tmp_path / f"{case['id']}_reg.huv").data.shape == (1, 64, 64)


def test_register_identity(tmp_path, capsys):
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:40, 0:40]
    img = np.where((xx - 18) ** 2 / 150 + (yy - 21) ** 2 / 60 <= 1, 300.0, 0.0) + rng.normal(0, 5, (40, 40))
    save_volume(img.astype(np.float32), tmp_path / "a.huv")
    code, out, _ = _run(capsys, "register", "--moving", tmp_path / "a.huv", "--fixed", tmp_path / "a.huv",
                        "--out", tmp_path / "r.huv")
    assert code == 0
    s = json.loads(out)["slices"][0]
    assert math.hypot(s["tx"], s["ty"]) <= 0.5 and abs(s["theta"]) <= 0.5


def test_register_missing_file(tmp_path, capsys):
    code, _, err = _run(capsys, "register", "--moving", tmp_path / "nope.huv", "--fixed", tmp_path / "nope.huv",
                        "--out", tmp_path / "r.huv")
    assert code == 1
    assert "nope.huv" in err
    assert not (tmp_path / "r.huv").exists()


# train / eval ----------------------------------------------------------------------

def test_train_is_deterministic_and_complete(tiny, capsys):
    root, cfg = tiny
    for name in ("t1", "t2"):
        code, _, _ = _run(capsys, "train", "--config", cfg, "--data", root / "data", "--out", root / name,
                          "--checkpoint-every", 1)
        assert code == 0
    assert _digest(root / "t1" / "weights.cwt") == _digest(root / "t2" / "weights.cwt")
    rows = (root / "t1" / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,val_dice,rmse,bce,l2" and len(rows) == 3
    assert (root / "t1" / "checkpoints" / "ckpt_epoch0002.json").exists()
    assert "epochs = 2" in (root / "t1" / "resolved_config.ini").read_text()


def test_eval_outputs(tiny, capsys):
    root, cfg = tiny
    if not (root / "t1" / "weights.cwt").exists():
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "t1")]) == 0
    code, out, _ = _run(capsys, "eval", "--weights", root / "t1" / "weights.cwt", "--data", root / "data",
                        "--out", root / "e", "--config", cfg, "--split", "train")
    assert code == 0
    rep = json.loads((root / "e" / "report.json").read_text())
    assert set(rep) == {"nmi", "psnr_db", "dice", "dv_percent", "pearson_rho", "pearson_p", "bland_altman",
                        "slices", "volumes", "settings"}
    assert len(rep["slices"]) == 8
    assert (root / "e" / "bland_altman.csv").read_text().startswith("mean,diff\n")
    seg = load_volume(next((root / "e" / "pred").glob("*_chambers.huv"))).data
    assert set(np.unique(seg)) <= {0.0, 1.0}
    assert len(list((root / "e" / "pred").glob("*_cect.huv"))) == 8


def test_eval_truth_as_prediction_on_noiseless(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[phantom]\nnoise_sigma = 0\n")
    assert main(["generate", "--out", str(tmp_path / "d"), "--count", "6", "--seed", "1", "--config", str(ini)]) == 0
    code, out, _ = _run(capsys, "eval", "--truth-as-prediction", "--data", tmp_path / "d", "--out", tmp_path / "e",
                        "--split", "train")
    assert code == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert all(s["dice"] == 1.0 for s in rep["slices"])
    assert all(s["psnr_db"] == "+inf" for s in rep["slices"])


def test_eval_without_weights_is_usage_error(tiny):
    root, _ = tiny
    with pytest.raises(SystemExit) as e:
        main(["eval", "--data", str(root / "data"), "--out", str(root / "noweights")])
    assert e.value.code == 2
    assert not (root / "noweights").exists()


# metrics --------------------------------------------------------------------------

def test_metrics_identical(tmp_path, capsys):
    a = np.random.default_rng(1).normal(0, 100, (2, 8, 8)).astype(np.float32)
    save_volume(a, tmp_path / "a.huv")
    code, out, _ = _run(capsys, "metrics", "--a", tmp_path / "a.huv", "--b", tmp_path / "a.huv")
    assert code == 0
    d = json.loads(out)
    assert d == {"nmi": 1.0, "psnr": "+inf"}


def test_metrics_fixture_pair(tmp_path, capsys):
    a = np.zeros((1, 10, 10), np.float32)
    a[0, :5] = 400.0
    b = a + 10.0
    mask = np.ones_like(a)
    for name, arr in (("a", a), ("b", b), ("m", mask)):
        save_volume(arr, tmp_path / f"{name}.huv")
    code, out, _ = _run(capsys, "metrics", "--a", tmp_path / "a.huv", "--b", tmp_path / "b.huv",
                        "--mask", tmp_path / "m.huv")
    assert code == 0
    d = json.loads(out)
    assert d["psnr"] == pytest.approx(20 * math.log10(4095 / 10), abs=1e-9)
    assert d["nmi"] == pytest.approx(1.0)
    assert d["dice"] == 1.0


def test_metrics_dice_needs_mask(tmp_path):
    save_volume(np.zeros((1, 4, 4), np.float32), tmp_path / "a.huv")
    with pytest.raises(SystemExit) as e:
        main(["metrics", "--a", str(tmp_path / "a.huv"), "--b", str(tmp_path / "a.huv"), "--metrics", "dice"])
    assert e.value.code == 2


def test_metrics_shape_mismatch(tmp_path, capsys):
    save_volume(np.zeros((1, 4, 4), np.float32), tmp_path / "a.huv")
    save_volume(np.zeros((1, 5, 4), np.float32), tmp_path / "b.huv")
    code, _, err = _run(capsys, "metrics", "--a", tmp_path / "a.huv", "--b", tmp_path / "b.huv")
    assert code == 1 and "shape" in err


def test_threads_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("CECT_FORGE_THREADS", "lots")
    with pytest.raises(SystemExit) as e:
        main(["generate", "--out", str(tmp_path / "x"), "--count", "1"])
    assert e.value.code == 2
    monkeypatch.setenv("CECT_FORGE_THREADS", "1")
    assert main(["generate", "--out", str(tmp_path / "y"), "--count", "1"]) == 0
