import csv

import pytest

from dosm.cli import main
from dosm.critic import ValueNetwork
from dosm.predictor import GruForecaster
from dosm.trace import read_trace

from conftest import TINY


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "critic", "--scenario", str(TINY), "--episodes", "10",
                 "--out", str(out)]) == 0
    assert main(["train", "gru", "--scenario", str(TINY), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def results(ckpt, tmp_path_factory):
    out = tmp_path_factory.mktemp("results")
    assert main(["run", "--scenario", str(TINY), "--seed", "1", "--checkpoint", str(ckpt),
                 "--out", str(out)]) == 0
    return out


def test_generate(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["generate", "--seed", "1", "--vehicles", "100", "--horizon", "60",
                 "--out", str(a)]) == 0
    assert main(["generate", "--seed", "1", "--vehicles", "100", "--horizon", "60",
                 "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len({r.vehicle_id for r in read_trace(a)}) == 100
    assert "100 vehicles" in capsys.readouterr().out


def test_generate_rejects_zero_vehicles(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--vehicles", "0", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 1


def test_unwritable_output(tmp_path):
    assert main(["generate", "--vehicles", "2", "--horizon", "10",
                 "--out", str(tmp_path / "no" / "such" / "x.csv")]) == 2


def test_train_outputs(ckpt):
    est = ValueNetwork.load(ckpt / "critic.npz")
    assert len(est.loss_curve_) == 10
    rows = list(csv.reader(open(ckpt / "critic_loss.csv")))
    assert rows[0] == ["episode", "loss"] and len(rows) == 11
    assert GruForecaster.load(ckpt / "gru_s0.npz").horizon_ == 15
    assert len(list(csv.reader(open(ckpt / "gru_loss.csv")))[0]) == 9


def test_train_caps(tmp_path, capsys):
    assert main(["train", "gru", "--epochs", "151", "--out", str(tmp_path)]) == 1
    assert main(["train", "critic", "--episodes", "1501", "--out", str(tmp_path)]) == 1
    assert "capped" in capsys.readouterr().err


def test_run_outputs(results):
    for policy in ("NM", "AM", "DRL", "DOSM"):
        for suffix in ("slots.csv", "runtime.csv", "decisions.jsonl", "summary.json"):
            assert (results / f"{policy}_seed1_{suffix}").exists()


def test_run_is_byte_identical(ckpt, results, tmp_path):
    assert main(["run", "--scenario", str(TINY), "--seed", "1", "--checkpoint", str(ckpt),
                 "--out", str(tmp_path)]) == 0
    for policy in ("NM", "AM", "DRL", "DOSM"):
        name = f"{policy}_seed1_slots.csv"
        assert (tmp_path / name).read_bytes() == (results / name).read_bytes()


def test_missing_checkpoint_names_policy(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["run", "--scenario", str(TINY), "--policies", "DRL", "--checkpoint",
                 str(empty), "--out", str(tmp_path / "r")])
    assert code == 1
    err = capsys.readouterr().err
    assert "DRL" in err and "critic.npz" in err


def test_bad_policy_and_seed(tmp_path):
    for argv in (["--policies", "XYZ"], ["--seed", "a,b"]):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--out", str(tmp_path)] + argv)
        assert exc.value.code == 1


def test_compare(results, tmp_path, capsys):
    files = sorted(str(p) for p in results.glob("*_summary.json"))
    out = tmp_path / "table.csv"
    assert main(["compare", *files, "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert len(rows[0]) == 5
    nm = rows[0].index("NM/1")
    load = next(r for r in rows if r[0] == "migration_load_pct")
    assert float(load[nm]) == 0.0
    assert "computation_load_pct" in capsys.readouterr().out


def test_compare_needs_two(results):
    assert main(["compare", str(next(results.glob("*_summary.json")))]) == 1
