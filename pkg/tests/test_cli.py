import json

import numpy as np
import pytest

from sen2lcz import cli, dataio, mapper, metrics
from sen2lcz import layers as L
from sen2lcz.model import load_checkpoint
from sen2lcz.tensor import make_node
from sen2lcz.verify import LAYER_CHECKS


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """Synthetic splits, a mosaic, and one short training run shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out_dir", str(d), "--per_class", "6", "--val_per_class", "3",
                     "--test_per_class", "3", "--mosaic_rows", "3", "--mosaic_cols", "4",
                     "--tile_size", "48"]) == 0
    cfg = d / "run.cfg"
    cfg.write_text(
        "# quick-start\n"
        "f = 4\nN = 1\n"
        "max_epochs = 3   # keep it short\n"
        "batch_size = 17\n"
        f"train_data = {d / 'train.lczp'}\n"
        f"val_data = {d / 'val.lczp'}\n"
        f"checkpoint = {d / 'model.s2lz'}\n"
        f"history = {d / 'history.csv'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return d


# -- configuration ----------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("f = 8  # width\n\nfusion = no\nstop_at_train_acc = none\nlr0=0.01\n")
    cfg = cli.make_config(str(path), {"N": "2", "dropout_rate": 0.3})
    assert (cfg.f, cfg.N, cfg.fusion, cfg.lr0, cfg.dropout_rate) == (8, 2, False, 0.01, 0.3)
    assert cfg.stop_at_train_acc is None
    assert cfg.explicit == {"f", "fusion", "stop_at_train_acc", "lr0", "N", "dropout_rate"}


@pytest.mark.parametrize("text", ["bogus = 1\n", "f = 4\nf = 8\n", "f = four\n", "just words\n",
                                  "fusion = maybe\n", "f = 0\n", "step = 0\n", "pooling = min\n"])
def test_bad_config_exit_2(tmp_path, text):
    path = tmp_path / "a.cfg"
    path.write_text(text)
    assert cli.main(["params", "--config", str(path)]) == cli.EXIT_CONFIG


def test_missing_config_file_and_bad_override(tmp_path):
    assert cli.main(["params", "--config", str(tmp_path / "nope.cfg")]) == cli.EXIT_CONFIG
    assert cli.main(["params", "--N", "-1"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.main(["params", "--no-such-flag", "1"])


def test_dashed_flags_accepted(capsys):
    assert cli.main(["params", "--f", "16", "--N", "1", "--dropout-rate", "0.1", "--fusion", "false"]) == 0
    assert "trainable=197889" in capsys.readouterr().out


# -- train --------------------------------------------------------------------


def test_train_history_matches_epochs(run_dir):
    lines = (run_dir / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,val_loss,val_acc" and len(lines) == 1 + 3
    ck = load_checkpoint(run_dir / "model.s2lz")
    assert (ck.config.f, ck.config.N, ck.config.fusion) == (4, 1, True)


def test_train_missing_dataset_fails_before_compute(tmp_path, monkeypatch):
    calls = []
    monkeypatch.setattr(cli, "train", lambda *a, **k: calls.append(1))
    code = cli.main(["train", "--train_data", str(tmp_path / "none.lczp"), "--val_data", str(tmp_path / "x")])
    assert code == cli.EXIT_DATA and not calls
    assert cli.main(["train"]) == cli.EXIT_CONFIG and not calls


def test_train_corrupt_container_exit_3(tmp_path, run_dir):
    bad = tmp_path / "bad.lczp"
    bad.write_bytes(b"LCZP" + b"\0" * 10)
    code = cli.main(["train", "--train_data", str(bad), "--val_data", str(run_dir / "val.lczp")])
    assert code == cli.EXIT_DATA


def test_train_batch_larger_than_dataset(run_dir, tmp_path):
    code = cli.main(["train", "--f", "4", "--N", "1", "--batch_size", "100000",
                     "--train_data", str(run_dir / "train.lczp"), "--val_data", str(run_dir / "val.lczp"),
                     "--checkpoint", str(tmp_path / "m.s2lz"), "--history", str(tmp_path / "h.csv")])
    assert code == cli.EXIT_CONFIG


# -- evaluate -----------------------------------------------------------------


def test_evaluate_outputs(run_dir, tmp_path):
    out, conf = tmp_path / "m.csv", tmp_path / "c.csv"
    assert cli.main(["evaluate", "--checkpoint", str(run_dir / "model.s2lz"), "--test_data",
                     str(run_dir / "test.lczp"), "--metrics", str(out), "--confusion", str(conf)]) == 0
    head, row = out.read_text().splitlines()
    assert head == "kappa,aa,wa,oa,oa_b,oa_nb"
    vals = dict(zip(head.split(","), map(float, row.split(","))))
    assert vals["wa"] == vals["oa"]  # no weight file: identity weights
    cm = np.loadtxt(conf, delimiter=",")
    sums = cm.sum(axis=1)
    assert cm.shape == (17, 17) and np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))
    present = np.bincount(dataio.read_container(run_dir / "test.lczp").labels, minlength=18)[1:] > 0
    assert np.all(np.abs(sums[present] - 1) < 1e-12)


def test_evaluate_identity_weights_file(run_dir, tmp_path):
    wpath = tmp_path / "w.csv"
    metrics.write_matrix_csv(np.eye(17), wpath)
    out = tmp_path / "m.csv"
    assert cli.main(["evaluate", "--checkpoint", str(run_dir / "model.s2lz"), "--test_data",
                     str(run_dir / "test.lczp"), "--weights", str(wpath), "--metrics", str(out),
                     "--confusion", str(tmp_path / "c.csv")]) == 0
    vals = out.read_text().splitlines()[1].split(",")
    assert vals[2] == vals[3]
    wpath.write_text("1,2\n")
    assert cli.main(["evaluate", "--checkpoint", str(run_dir / "model.s2lz"), "--test_data",
                     str(run_dir / "test.lczp"), "--weights", str(wpath)]) == cli.EXIT_DATA


def test_evaluate_perfect_fixture(run_dir, tmp_path):
    # relabel the test split with the model's own predictions: a perfect classifier by construction
    ck = load_checkpoint(run_dir / "model.s2lz")
    test = dataio.read_container(run_dir / "test.lczp")
    stats = dataio.BandStats(ck.band_mean, ck.band_std)
    pred = ck.to_model().predict(dataio.standardize(test, stats).as_nchw())
    assert len(np.unique(pred)) > 1
    dataio.write_container(dataio.PatchDataset(test.patches, pred), tmp_path / "p.lczp")
    out = tmp_path / "m.csv"
    assert cli.main(["evaluate", "--checkpoint", str(run_dir / "model.s2lz"), "--test_data",
                     str(tmp_path / "p.lczp"), "--metrics", str(out), "--confusion", str(tmp_path / "c.csv")]) == 0
    vals = dict(zip(metrics.METRIC_COLUMNS, map(float, out.read_text().splitlines()[1].split(","))))
    assert vals["kappa"] == 1.0 and vals["aa"] == 1.0 and vals["oa"] == 1.0


def test_evaluate_checkpoint_mismatch(run_dir, tmp_path):
    code = cli.main(["evaluate", "--checkpoint", str(run_dir / "model.s2lz"), "--test_data",
                     str(run_dir / "test.lczp"), "--f", "8", "--metrics", str(tmp_path / "m.csv")])
    assert code == cli.EXIT_CONFIG


def test_evaluate_corrupt_checkpoint(run_dir, tmp_path):
    bad = tmp_path / "bad.s2lz"
    bad.write_bytes((run_dir / "model.s2lz").read_bytes()[:100])
    assert cli.main(["evaluate", "--checkpoint", str(bad), "--test_data", str(run_dir / "test.lczp")]) == cli.EXIT_DATA


# -- params -------------------------------------------------------------------


@pytest.mark.parametrize("args,expected", [(["--f", "16", "--N", "4"], 791_428),
                                           (["--f", "16", "--N", "1", "--fusion", "0"], 197_889),
                                           (["--f", "32", "--N", "2", "--fusion", "0"], 1_567_633)])
def test_params_output(capsys, args, expected):
    assert cli.main(["params"] + args) == 0
    out = capsys.readouterr().out.split()
    assert out[1] == f"trainable={expected}" and out[2].startswith("total=")


# -- gradcheck ----------------------------------------------------------------


def test_gradcheck_report_lists_each_kind_once(capsys):
    assert cli.main(["gradcheck", "--gradcheck_model", "false"]) == 0
    lines = capsys.readouterr().out.splitlines()
    kinds = [ln.split()[0] for ln in lines[:-1]]
    assert kinds == list(LAYER_CHECKS) and all(ln.endswith("PASS") for ln in lines[:-1])
    assert lines[-1] == f"{len(LAYER_CHECKS)}/{len(LAYER_CHECKS)} checks passed"


def test_gradcheck_detects_corrupted_backward(capsys, monkeypatch):
    def bad_gap(x):
        b, c, h, w = x.shape
        out = x.data.mean(axis=(2, 3))

        def _bw(g):  # 10% too large
            return (np.broadcast_to((g * 1.1 / (h * w))[:, :, None, None], (b, c, h, w)).copy(),)

        return make_node(out, (x,), _bw, "global_avg_pool")

    monkeypatch.setattr(L, "global_avg_pool", bad_gap)
    assert cli.main(["gradcheck", "--gradcheck_model", "false"]) == cli.EXIT_VERIFY
    report = {ln.split()[0]: ln.split()[-1] for ln in capsys.readouterr().out.splitlines()[:-1]}
    assert report["global_avg_pool"] == "FAIL" and report["conv2d"] == "PASS"


# -- map ----------------------------------------------------------------------


def test_map_png_matches_grid_and_metadata(run_dir, tmp_path):
    grid, meta, png = tmp_path / "g.txt", tmp_path / "g.json", tmp_path / "g.png"
    assert cli.main(["map", "--checkpoint", str(run_dir / "model.s2lz"), "--raster", str(run_dir / "mosaic.lczr"),
                     "--grid", str(grid), "--grid_meta", str(meta), "--png", str(png)]) == 0
    labels = mapper.read_label_grid(grid)
    # 144 x 192 px mosaic at the default 10 px step
    assert labels.shape == ((144 - 32) // 10 + 1, (192 - 32) // 10 + 1)
    assert np.array_equal(mapper.decode_png(png), labels)
    info = json.loads(meta.read_text())
    assert info["step_px"] == 10 and info["cell_size_m"] == 100.0


def test_map_step_larger_than_raster(run_dir, tmp_path):
    grid = tmp_path / "g.txt"
    assert cli.main(["map", "--checkpoint", str(run_dir / "model.s2lz"), "--raster", str(run_dir / "mosaic.lczr"),
                     "--step", "1000", "--grid", str(grid), "--grid_meta", str(tmp_path / "g.json"),
                     "--png", str(tmp_path / "g.png")]) == 0
    assert mapper.read_label_grid(grid).shape == (1, 1)


def test_map_missing_raster(run_dir, tmp_path):
    assert cli.main(["map", "--checkpoint", str(run_dir / "model.s2lz"),
                     "--raster", str(tmp_path / "none.lczr")]) == cli.EXIT_DATA


# -- synth ----------------------------------------------------------------------


def test_synth_outputs_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--out_dir", str(tmp_path / name), "--per_class", "2", "--val_per_class", "0",
                         "--test_per_class", "1", "--seed", "9"]) == 0
    assert not (tmp_path / "a" / "val.lczp").exists()
    for f in ("train.lczp", "test.lczp"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(dataio.read_container(tmp_path / "a" / "train.lczp")) == 34


def test_import_requires_h5(tmp_path):
    assert cli.main(["import"]) == cli.EXIT_CONFIG
    assert cli.main(["import", "--h5", str(tmp_path / "none.h5")]) == cli.EXIT_DATA
