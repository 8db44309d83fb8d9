import json

import pytest

from jetforge import hpo as H
from jetforge.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["datagen", "--out", str(out), "--num-jets", "400", "--seed", "3", "--test-fraction", "0.1"]) == 0
    return out


def read(path):
    return path.read_bytes()


def test_usage_error_exits_2(capsys):
    assert main(["bogus"]) == 2
    assert main(["train"]) == 2


def test_contract_error_exits_1(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("jetforge eval: error:") and "\n" not in err


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"embed_dim": 8}, "colour": 1}))
    assert main(["flops", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1
    assert "colour" in capsys.readouterr().err


def test_flops(tmp_path, capsys):
    (tmp_path / "tiny.json").write_text(json.dumps({"model": {"num_blocks": 4, "embed_dim": 8, "num_heads": 2}}))
    argv = ["flops", "--config", str(tmp_path / "tiny.json"), "--out", str(tmp_path), "--convention", "compact"]
    assert main(argv) == 0
    printed = capsys.readouterr().out
    assert "26,168" in printed or "26168" in printed
    report = json.loads((tmp_path / "flops.json").read_text())
    assert report["flops"] == 26168
    assert report["params"] == 2501
    resolved = json.loads((tmp_path / "config.json").read_text())
    assert resolved["model"]["embed_dim"] == 8


def test_train_eval_roundtrip_and_determinism(dataset, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["train", "--data", str(dataset), "--out", str(out), "--epochs", "3", "--seed", "5"]
        assert main(argv) == 0
        runs.append(out)
    for f in ("config.json", "eval.json", "history.jsonl", "norm.json", "model.ckpt"):
        assert read(runs[0] / f) == read(runs[1] / f), f

    history = [json.loads(line) for line in (runs[0] / "history.jsonl").read_text().splitlines()]
    best = min(history, key=lambda r: r["val_loss"])
    ev_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(runs[0] / "model.ckpt"), "--data", str(dataset), "--out", str(ev_out)]) == 0
    ev = json.loads((ev_out / "eval.json").read_text())
    assert ev["accuracy"] == best["val_accuracy"]

    assert main(["eval", "--checkpoint", str(runs[0] / "model.ckpt"), "--data", str(dataset), "--out", str(ev_out), "--split", "test"]) == 0


def test_prune_and_quantize(dataset, tmp_path):
    train_out = tmp_path / "t"
    assert main(["train", "--data", str(dataset), "--out", str(train_out), "--epochs", "2"]) == 0
    prune_out = tmp_path / "p"
    argv = ["prune", "--checkpoint", str(train_out / "model.ckpt"), "--data", str(dataset), "--out", str(prune_out)]
    assert main(argv + ["--steps", "2", "--ft-epochs", "1"]) == 0
    report = json.loads((prune_out / "prune_report.json").read_text())
    assert report["after"]["flops"] < report["before"]["flops"]
    q_out = tmp_path / "q"
    assert main(["quantize", "--data", str(dataset), "--out", str(q_out), "--epochs", "2"]) == 0
    size = json.loads((q_out / "size.json").read_text())
    assert size["packed_bytes"] < size["full_bytes"]


def test_hpo_then_report(tmp_path, capsys):
    store = tmp_path / "study.jsonl"
    for name in ("a", "b"):
        argv = ["hpo", "--objective", "synthetic-rich", "--trials", "40", "--seed", "2"]
        assert main(argv + ["--store", str(tmp_path / f"{name}.jsonl"), "--out", str(tmp_path / name)]) == 0
    assert read(tmp_path / "a" / "front.json") == read(tmp_path / "b" / "front.json")

    store = tmp_path / "a.jsonl"
    capsys.readouterr()
    assert main(["hpo", "report", "--store", str(store), "--out", str(tmp_path / "r")]) == 0
    lines = capsys.readouterr().out.splitlines()
    flops = [int(line.split()[1].replace(",", "")) for line in lines[1:] if line.split() and line.split()[0].isdigit()]
    assert flops == sorted(flops) and flops
    for f in ("pareto.txt", "hv_curve.csv", "pareto.png"):
        assert (tmp_path / "r" / f).exists()
    front = H.pareto_front(H.TrialStore(store).load())
    assert len(flops) == len(front)


def test_report_needs_trials(tmp_path):
    assert main(["report", "--store", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path)]) == 1
