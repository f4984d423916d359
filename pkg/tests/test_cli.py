import os

import pytest
import yaml

from attsolver.cli import main
from attsolver.config import dataset_path
from attsolver.data import read_dataset

TINY = {
    "data": {"n_train": 8, "n_val": 3, "n_test": 3, "T": 1.0, "dt_fine": 0.01, "dt_fine_eval": 0.01},
    "train": {"epochs": 2, "batch_size": 4},
    "model": {"d1": 8},
    "seeds": [0],
    "experiment": {"bench_steps": 10, "bench_repeats": 1},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture
def data_dir(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["generate", "--config", config_file, "--data", str(out)]) == 0
    return str(out)


def last_value(text, key):
    line = [ln for ln in text.splitlines() if ln.startswith(key + " ")][-1]
    return float(line.split()[1])


def test_generate_round_trip(tmp_path, config_file, data_dir, capsys):
    first = {s: open(dataset_path(data_dir, s), "rb").read() for s in ("train", "val", "test")}
    ds = read_dataset(dataset_path(data_dir, "train"))
    assert ds.n_traj == 8 and ds.n_steps == 5 and ds.dim == 4
    again = tmp_path / "again"
    assert main(["generate", "--config", config_file, "--data", str(again)]) == 0
    for split, blob in first.items():
        assert open(dataset_path(again, split), "rb").read() == blob
    assert "train: M=8 N=5 d=4" in capsys.readouterr().out


def test_generate_bad_ratio(tmp_path, config_file, capsys):
    code = main(["generate", "--config", config_file, "--data", str(tmp_path / "d"), "--set", "data.dt_fine=0.03"])
    assert code != 0
    err = capsys.readouterr().err
    assert "dt_coarse" in err or "dt_fine" in err


def test_train_missing_data(tmp_path, config_file):
    out = tmp_path / "run"
    code = main(["train", "--config", config_file, "--data", str(tmp_path / "nowhere"), "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_train_zero_rate_and_resume(tmp_path, config_file, data_dir, capsys):
    out = tmp_path / "run"
    args = ["train", "--config", config_file, "--data", data_dir, "--out", str(out)]
    assert main(args + ["--set", "train.lr=0.0"]) == 0
    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 3
    assert (out / "best.attw").exists() and (out / "config.yaml").exists()
    assert main(args + ["--set", "train.lr=0.0", "--set", "train.epochs=4", "--resume"]) == 0
    assert len((out / "curves.csv").read_text().splitlines()) == 5
    assert "epochs=4" in capsys.readouterr().out


def test_eval_zero_module_matches_baseline(tmp_path, config_file, data_dir, capsys):
    out = tmp_path / "run"
    common = ["--config", config_file, "--data", data_dir, "--out", str(out)]
    assert main(["train", *common, "--set", "train.lr=0.0", "--set", "train.epochs=1"]) == 0
    capsys.readouterr()
    assert main(["baseline", *common]) == 0
    base = float(capsys.readouterr().out.split()[1])
    assert main(["eval", *common, "--checkpoint", str(out / "best.attw")]) == 0
    got = last_value(capsys.readouterr().out, "mse")
    assert abs(got - base) <= 1e-12 * max(1.0, base)
    assert (out / "eval" / "report.json").exists()


def test_eval_missing_checkpoint(tmp_path, config_file, data_dir):
    code = main(["eval", "--config", config_file, "--data", data_dir, "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "none.attw")])
    assert code == 2


def test_bench_writes_timing(tmp_path, config_file, capsys):
    assert main(["bench", "--config", config_file, "--out", str(tmp_path)]) == 0
    timing = (tmp_path / "bench" / "timing.csv").read_text()
    assert "classic_fine" in timing and "wall_ratio" in timing


def test_probe_prints_bound(tmp_path, config_file, capsys):
    assert main(["probe", "--config", config_file, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert last_value(out, "max_growth_factor") <= last_value(out, "operator_norm_bound") + 1e-9
    assert os.path.exists(tmp_path / "probe" / "report.json")


def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    assert "generate" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, config_file, capsys):
    assert main(["baseline", "--config", config_file, "--set", "train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err
