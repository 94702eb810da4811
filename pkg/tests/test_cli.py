import csv
import hashlib
import subprocess
import sys

import numpy as np
import pytest

from lesionnet.cli import main, read_config_file
from lesionnet.data import load_labels, save_labels
from lesionnet.experiments import RunConfig, build_model, save_run_config
from lesionnet.models import save_weights

TINY_FLAGS = ["--variant", "custom", "--width", "0.25", "--depth", "0.5", "--size", "32"]


@pytest.fixture(scope="module")
def data40(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn40")
    assert main(["synth", "--n", "40", "--seed", "7", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data40, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(data40), "--out", str(out), "--epochs", "3", "--lr", "1e-3",
                 "--seed", "7", "--optimizer", "rmsprop"] + TINY_FLAGS)
    assert code == 0
    return out


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def _checkpoint(cfg, path, logit=None):
    """Fresh model written as a checkpoint; ``logit`` pins the output to a constant."""
    model = build_model(cfg, depth=4)  # synthetic volumes have 4 slices
    if logit is not None:
        model.classifier.weight.data[:] = 0
        model.classifier.bias.data[:] = logit
    save_weights(model, path)
    save_run_config(cfg, model, path.with_suffix(".json"))
    return path


# -- synth ---------------------------------------------------------------------

def test_synth_writes_160_volumes(data40):
    assert len(list(data40.rglob("*.mvol"))) == 160
    assert len(load_labels(data40 / "labels.csv")) == 40


def test_synth_rerun_is_hash_equal(data40, tmp_path):
    assert main(["synth", "--n", "40", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert _digest(tmp_path) == _digest(data40)


def test_synth_too_few_cases(tmp_path, capsys):
    assert main(["synth", "--n", "2", "--out", str(tmp_path)]) != 0
    assert "need ≥ 4 cases" in capsys.readouterr().err


# -- train ---------------------------------------------------------------------

def test_train_outputs(trained, capsys):
    assert (trained / "best.lnwt").exists() and (trained / "best.json").exists()
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0].startswith("# optimizer=rmsprop")
    assert lines[1] == "epoch,train_loss,val_auc"
    assert 1 <= len(lines) - 2 <= 200


def test_train_prints_five_decimal_auc(data40, tmp_path, capsys):
    assert main(["train", "--data", str(data40), "--out", str(tmp_path), "--epochs", "1"] + TINY_FLAGS) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("val AUC ") and len(last.split()[-1].split(".")[1]) == 5


def test_train_missing_labels(tmp_path, data40, capsys):
    for p in data40.iterdir():
        if p.is_dir():
            (tmp_path / p.name).symlink_to(p)
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")] + TINY_FLAGS) == 2
    assert "labels.csv" in capsys.readouterr().err


def test_train_nan_exits_3(data40, tmp_path, capsys):
    code = main(["train", "--data", str(data40), "--out", str(tmp_path), "--epochs", "2",
                 "--optimizer", "sgd", "--lr", "1e30"] + TINY_FLAGS)
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--optimizer", "lbfgs"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["train", "--variant", "custom", "--data", "x"]) == 1


# -- config precedence ----------------------------------------------------------

def test_config_file_env_and_flags(data40, tmp_path, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("# tiny run\nvariant = custom\nwidth = 0.25\ndepth = 0.5\nsize = 32\n"
                    "epochs = 1\nseed = 3\noptimizer = sgd\n")
    assert read_config_file(conf)["epochs"] == 1
    out = tmp_path / "o1"
    assert main(["train", "--config", str(conf), "--data", str(data40), "--out", str(out),
                 "--optimizer", "adam"]) == 0
    meta = (out / "best.json").read_text()
    assert '"seed": 3' in meta and '"optimizer": "adam"' in meta
    monkeypatch.setenv("LESIONNET_SEED", "11")
    out2 = tmp_path / "o2"
    assert main(["train", "--config", str(conf), "--data", str(data40), "--out", str(out2)]) == 0
    assert '"seed": 11' in (out2 / "best.json").read_text()
    out3 = tmp_path / "o3"
    assert main(["train", "--config", str(conf), "--data", str(data40), "--out", str(out3), "--seed", "5"]) == 0
    assert '"seed": 5' in (out3 / "best.json").read_text()


def test_bad_config_file(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("epochs: 3\n")
    assert main(["train", "--config", str(conf)]) == 1
    conf.write_text("colour = blue\n")
    assert main(["train", "--config", str(conf)]) == 1


# -- eval ---------------------------------------------------------------------

def test_eval_prints_auc_and_writes_scores(trained, data40, capsys):
    assert main(["eval", "--checkpoint", str(trained / "best.lnwt"), "--split", "all"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("AUC ") and len(out.split()[1].split(".")[1]) == 5
    rows = list(csv.reader(open(trained / "scores_all.csv")))
    assert rows[0] == ["case_id", "score", "label"] and len(rows) == 41
    assert main(["eval", "--scores", str(trained / "scores_all.csv")]) == 0
    assert capsys.readouterr().out.strip() == out


def test_eval_fresh_model_is_in_uninformative_band(data40, tmp_path, capsys):
    cfg = RunConfig(variant="custom", width=0.25, depth=0.5, size=32, seed=0, data_dir=str(data40))
    ckpt = _checkpoint(cfg, tmp_path / "fresh.lnwt")
    assert main(["eval", "--checkpoint", str(ckpt), "--split", "all"]) == 0
    value = float(capsys.readouterr().out.split()[1])
    assert 0.2 <= value <= 0.8


def test_eval_degenerate_validation_split(trained, data40, tmp_path, capsys):
    for p in data40.iterdir():
        if p.is_dir():
            (tmp_path / p.name).symlink_to(p)
    save_labels({c: 0 for c in load_labels(data40 / "labels.csv")}, tmp_path / "labels.csv")
    code = main(["eval", "--checkpoint", str(trained / "best.lnwt"), "--data", str(tmp_path)])
    assert code == 2
    assert "degenerate labels" in capsys.readouterr().err


def test_eval_shape_mismatch(data40, tmp_path, capsys):
    small = RunConfig(variant="custom", width=0.25, depth=0.5, size=32, data_dir=str(data40))
    ckpt = _checkpoint(small, tmp_path / "a.lnwt")
    wider = RunConfig(variant="custom", width=0.5, depth=0.5, size=32, data_dir=str(data40))
    _checkpoint(wider, tmp_path / "b.lnwt")
    code = main(["eval", "--checkpoint", str(ckpt), "--meta", str(tmp_path / "b.json")])
    assert code == 2
    assert "shape" in capsys.readouterr().err


# -- predict --------------------------------------------------------------------

@pytest.fixture(scope="module")
def modality_checkpoints(data40, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpts")
    paths = {}
    for i, mod in enumerate(("FLAIR", "T1w", "T1Gd", "T2")):
        cfg = RunConfig(variant="custom", width=0.25, depth=0.5, size=32, modality=mod, seed=i,
                        data_dir=str(data40))
        paths[mod] = _checkpoint(cfg, root / f"{mod}.lnwt")
    return paths


def _read_predictions(path):
    lines = path.read_text().splitlines()
    return lines[0], {row[0]: float(row[1]) for row in csv.reader(lines[2:])}, lines[1]


def test_predict_constant_models(data40, tmp_path):
    paths = []
    for mod in ("FLAIR", "T1w", "T1Gd", "T2"):
        cfg = RunConfig(variant="custom", width=0.25, depth=0.5, size=32, modality=mod, data_dir=str(data40))
        paths += [f"--{mod.lower()}", str(_checkpoint(cfg, tmp_path / f"{mod}.lnwt", logit=0.75))]
    out = tmp_path / "p.csv"
    assert main(["predict", "--data", str(data40), "--out", str(out)] + paths) == 0
    header, preds, columns = _read_predictions(out)
    assert header == "# ratio=3:3:3:2" and columns == "case_id,probability"
    assert len(preds) == 40 and len(set(preds.values())) == 1
    assert next(iter(preds.values())) == pytest.approx(1 / (1 + np.exp(-0.75)), rel=1e-6)


def test_predict_t2_only_equals_t2_model(data40, modality_checkpoints, tmp_path):
    args = ["--data", str(data40)]
    full = [a for m, p in modality_checkpoints.items() for a in (f"--{m.lower()}", str(p))]
    assert main(["predict", *args, "--ratio", "0:0:0:1", "--out", str(tmp_path / "a.csv")] + full) == 0
    assert main(["predict", *args, "--ratio", "0:0:0:1", "--out", str(tmp_path / "b.csv"),
                 "--t2", str(modality_checkpoints["T2"])]) == 0
    assert main(["eval", "--checkpoint", str(modality_checkpoints["T2"]), "--split", "all",
                 "--scores-out", str(tmp_path / "t2.csv")]) == 0
    _, a, _ = _read_predictions(tmp_path / "a.csv")
    _, b, _ = _read_predictions(tmp_path / "b.csv")
    t2 = {row[0]: float(row[1]) for row in list(csv.reader(open(tmp_path / "t2.csv")))[1:]}
    assert a == b
    assert all(a[c] == pytest.approx(t2[c], abs=1e-15) for c in t2)


def test_predict_missing_checkpoint_with_weight(data40, modality_checkpoints, capsys):
    code = main(["predict", "--data", str(data40), "--t2", str(modality_checkpoints["T2"])])
    assert code != 0
    assert "FLAIR" in capsys.readouterr().err


def test_predict_is_deterministic(data40, modality_checkpoints, tmp_path):
    full = [a for m, p in modality_checkpoints.items() for a in (f"--{m.lower()}", str(p))]
    for name in ("x.csv", "y.csv"):
        assert main(["predict", "--data", str(data40), "--ratio", "2:4:2:2", "--out", str(tmp_path / name)]
                    + full) == 0
    assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()


# -- harness commands and the installed entry point ------------------------------------

def test_sweep_and_bench_tables(data40, tmp_path, capsys):
    flags = ["--data", str(data40), "--epochs", "1", "--seed", "7"] + TINY_FLAGS
    assert main(["sweep", *flags, "--lrs", "sgd=0.01,adadelta=1.0", "--table", str(tmp_path / "t.txt")]) == 0
    table = (tmp_path / "t.txt").read_text().splitlines()
    assert [r.split()[0] for r in table[1:]] == ["adam", "sgd", "rmsprop", "adadelta"]
    assert main(["bench", *flags]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[-2:]
    assert rows[0].startswith("EfficientNet 3D") and rows[1].startswith("Multiscale EfficientNet")
    assert main(["sweep", *flags, "--lrs", "newton=1"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lesionnet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout and "predict" in proc.stdout
