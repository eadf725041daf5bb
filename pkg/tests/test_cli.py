import json
import subprocess
import sys

import numpy as np
import pytest

from relproxy import cli
from relproxy import dataops as D
from relproxy.model import load_model
from relproxy.train import TrainConfig, new_state, train

SMALL = ["--set", "data.n_train=4", "--set", "data.n_test=2"]
FAST = ["--set", "epochs=2", "--set", "d=16", "--set", "warmup_epochs=1", "--set", "batch_size=8"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(out), "--classes", "4", "--k", "3", "--seed", "5", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def model_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *FAST]) == 0
    return out


def test_gen_writes_dataset_and_effective_config(data_dir):
    ds = D.load(data_dir)
    assert (ds.meta.c, ds.meta.k, ds.meta.seed, ds.meta.n_train) == (4, 3, 5, 4)
    eff = json.loads((data_dir / cli.CONFIG_FILE).read_text())
    assert eff["data"] == ds.meta.to_dict()


def test_gen_then_audit_below_k_is_ambiguous(data_dir, capsys):
    assert cli.main(["audit", "--data", str(data_dir), "--m", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(line.endswith("ambiguous") for line in lines)


def test_train_with_zero_lr_keeps_initial_weights(data_dir, tmp_path):
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), *FAST, "--set", "lr=0"]) == 0
    eff = json.loads((tmp_path / cli.CONFIG_FILE).read_text())
    assert eff["train"]["lr"] == 0.0
    cfg = TrainConfig(**eff["train"])
    init = new_state(D.load(data_dir), cfg).model
    trained = load_model(tmp_path / "model.json")
    for k, p in init.params.items():
        assert p.data.tobytes() == trained.params[k].data.tobytes(), k


def test_effective_config_reproduces_the_run(data_dir, model_dir, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(again),
                     "--config", str(model_dir / cli.CONFIG_FILE)]) == 0
    assert (again / "model.json").read_bytes() == (model_dir / "model.json").read_bytes()


def test_resume_continues_to_the_configured_epochs(data_dir, model_dir, tmp_path):
    part = tmp_path / "part"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(part), *FAST, "--set", "epochs=1"]) == 0
    cfg_file = tmp_path / "two.json"
    doc = json.loads((part / cli.CONFIG_FILE).read_text())
    doc["train"]["epochs"] = 2
    cfg_file.write_text(json.dumps(doc))
    # the stored checkpoint config says 1 epoch, so a changed config is refused
    assert cli.main(["train", "--data", str(data_dir), "--out", str(part), "--resume",
                     "--config", str(cfg_file)]) == 2


def test_resume_after_interruption_matches_full_run(data_dir, model_dir, tmp_path):
    cfg = cli.config_load(None, FAST[1::2]).train
    train(D.load(data_dir), cfg, out_dir=tmp_path, epochs=1)
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--resume", *FAST]) == 0
    assert (tmp_path / "model.json").read_bytes() == (model_dir / "model.json").read_bytes()
    assert (tmp_path / "metrics.jsonl").read_bytes() == (model_dir / "metrics.jsonl").read_bytes()


def test_eval_and_dump(data_dir, model_dir, tmp_path, capsys):
    emb = tmp_path / "emb"
    assert cli.main(["eval", "--model", str(model_dir), "--data", str(data_dir), "--dump-embeddings", str(emb)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0 <= report["accuracy"] <= 1 and 0 <= report["disjoint_fraction"] <= 1
    meta = json.loads((emb / "emb_meta.json").read_text())
    rows = np.frombuffer((emb / "emb.bin").read_bytes(), dtype="<f4")
    assert rows.size == meta["rows"] * meta["dim"]
    assert (emb / cli.CONFIG_FILE).exists()


def test_graph_command(data_dir, model_dir, tmp_path):
    out = tmp_path / "g.json"
    assert cli.main(["graph", "--model", str(model_dir), "--data", str(data_dir), "--instance", "1",
                     "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc) == {"nodes", "edges", "threshold"}


def test_sweep_and_ablate(data_dir, tmp_path):
    out = tmp_path / "sweep.json"
    assert cli.main(["sweep", "--data", str(data_dir), "--axis", "l=1..2", "--seeds", "1", "--out", str(out),
                     *FAST, "--set", "epochs=1"]) == 0
    assert [c["coords"]["l"] for c in json.loads(out.read_text())["cells"]] == [1, 2]
    assert (tmp_path / cli.CONFIG_FILE).exists()
    out = tmp_path / "ablate.json"
    assert cli.main(["ablate", "--data", str(data_dir), "--out", str(out), "--seeds", "1",
                     "--variants", "full,ce_head", *FAST, "--set", "epochs=1"]) == 0
    assert len(json.loads(out.read_text())["cells"]) == 2
    assert cli.main(["ablate", "--data", str(data_dir), "--out", str(out), "--variants", "bogus"]) == 1


@pytest.mark.parametrize("cmd", ["gen", "train", "eval", "sweep", "ablate", "graph", "audit"])
def test_help_exits_zero_and_lists_flags(cmd, capsys):
    assert cli.main([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    action_flags = [a.option_strings for a in cli.build_parser()._subparsers._group_actions[0].choices[cmd]._actions]
    for flags in action_flags:
        for f in flags:
            assert f in text


def test_usage_errors_exit_one(data_dir, capsys):
    assert cli.main(["gen", "--bogus"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["sweep", "--data", str(data_dir), "--axis", "l", "--out", "x.json"]) == 1
    assert "E_" in capsys.readouterr().err


def test_runtime_errors_exit_two(data_dir, tmp_path, capsys):
    assert cli.main(["eval", "--model", str(tmp_path / "none"), "--data", str(data_dir)]) == 2
    err = capsys.readouterr().err
    assert "E_CHECKPOINT" in err and "model" in err
    assert cli.main(["audit", "--data", str(tmp_path / "missing"), "--m", "1"]) == 2
    assert "E_DATA" in capsys.readouterr().err


@pytest.mark.parametrize("override, code", [
    ("leanring_rate=0.1", "E_CONFIG_UNKNOWN_KEY"),
    ("seed=3", "E_CONFIG_AMBIGUOUS_KEY"),
    ("lr=fast", "E_CONFIG_TYPE"),
    ("epochs=0", "E_CONFIG_RANGE"),
    ("lr", "E_CONFIG_SYNTAX"),
])
def test_config_errors_are_named(override, code):
    with pytest.raises(cli.ConfigError) as info:
        cli.config_load(None, [override])
    assert info.value.code == code


def test_config_precedence(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert cli.config_load(empty) == cli.config_load()
    assert cli.config_load().train == TrainConfig()
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"lr": 0.5, "epochs": 3}, "data.c": 6}))
    cfg = cli.config_load(f, ["lr=0.01", "train.seed=4"])
    assert (cfg.train.lr, cfg.train.epochs, cfg.train.seed, cfg.data.c) == (0.01, 3, 4, 6)
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(cli.ConfigError, match="not valid JSON"):
        cli.config_load(bad)
    with pytest.raises(cli.ConfigError) as info:
        cli.config_load(tmp_path / "absent.json")
    assert info.value.code == "E_CONFIG_FILE"


def test_module_entry_point(data_dir):
    proc = subprocess.run([sys.executable, "-m", "relproxy.cli", "audit", "--data", str(data_dir), "--m", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "determining" in proc.stdout
