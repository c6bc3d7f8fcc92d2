import json

import pytest

from prep_rl import cli

TINY = ["--set", "data.k=2", "--set", "data.n_per_class=30", "--set", "data.n_val=10", "--set", "data.n_test=20",
        "--set", "agent.steps=200", "--set", "agent.learn_start=64", "--set", "agent.eval_every=200",
        "--set", "train.nn_epochs=1", "--set", "train.cl_epochs=1", "--set", "env.action_set=coarse",
        "--set", "distortion.mode=coarse", "--set", "distortion.max_len=2", "--quiet"]


def only_folder(base, prefix):
    found = sorted(base.glob(f"{prefix}-*"))
    assert len(found) == 1, found
    return found[0]


def test_parse_overrides():
    c = cli.parse_args(["train-rl", "--config", "exp.cfg", "--set", "agent.gamma=0.95"])
    assert c.command == "train-rl" and c.config_path == "exp.cfg"
    c.config_path = None
    assert cli.load_config(c).agent.gamma == 0.95


def test_parse_eval_binding():
    c = cli.parse_args(["eval", "--checkpoint", "m.bin", "--data", "test"])
    assert c.command == "eval" and c.checkpoint == "m.bin" and c.data == "test"


@pytest.mark.parametrize("argv", [["bogus"], [], ["eval", "--nope"], ["eval", "--data", "sideways"]])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    out = ["--out", str(tmp_path)]
    assert cli.main(["train-nn", "--config", str(tmp_path / "missing.cfg")] + out) == 2
    assert cli.main(["train-nn", "--set", "agent.gamma=2"] + out) == 2
    assert cli.main(["train-nn", "--set", "novalue"] + out) == 2
    assert cli.main(["eval"] + out) == 2
    assert cli.main(["report"] + out) == 2
    assert "config error" in capsys.readouterr().err


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv("PREP_RL_OUT", str(tmp_path / "env"))
    assert cli.parse_args(["report"]).out_dir == str(tmp_path / "env")
    assert cli.parse_args(["report", "--out", "x"]).out_dir == "x"


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--seed", "7", "--out", str(tmp_path / name)] + TINY) == 0
    a, b = only_folder(tmp_path / "a", "gen-data"), only_folder(tmp_path / "b", "gen-data")
    for f in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert (a / "config.cfg").read_text() == (b / "config.cfg").read_text()


def test_generated_data_loads_back(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path)] + TINY) == 0
    folder = only_folder(tmp_path, "gen-data")
    argv = ["train-nn", "--out", str(tmp_path / "nn"), "--set", "data.source=idx", "--set", f"data.path={folder}"]
    assert cli.main(argv + TINY) == 0


def test_effective_config_reproduces(tmp_path):
    assert cli.main(["train-nn", "--out", str(tmp_path / "a")] + TINY) == 0
    first = only_folder(tmp_path / "a", "train-nn")
    assert cli.main(["train-nn", "--out", str(tmp_path / "b"), "--config", str(first / "config.cfg"), "--quiet"]) == 0
    second = only_folder(tmp_path / "b", "train-nn")
    assert (first / "nn.bin").read_bytes() == (second / "nn.bin").read_bytes()
    assert json.loads((first / "nn.json").read_text())["kind"] == "nn"


@pytest.fixture(scope="module")
def robustness_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("rob")
    assert cli.main(["robustness", "--runs", "2", "--out", str(base)] + TINY) == 0
    return only_folder(base, "robustness")


def test_robustness_outputs(robustness_dir):
    for name in ("config.cfg", "report.txt", "report.jsonl", "runs.jsonl", "run0/rl.bin", "run1/traces.jsonl"):
        assert (robustness_dir / name).exists(), name
    meta = json.loads((robustness_dir / "run0" / "rl.json").read_text())
    assert meta["kind"] == "rl" and meta["k"] == 2 and meta["n"] == 5 and meta["arch"] == "arch1"
    assert meta["step"] == 200


def test_report_recount(robustness_dir, tmp_path, capsys):
    assert cli.main(["report", "--run", str(robustness_dir), "--out", str(tmp_path), "--quiet"]) == 0
    folder = only_folder(tmp_path, "report")
    assert (folder / "report.txt").read_text() == (robustness_dir / "report.txt").read_text()
    # independent recount from the per-run records
    runs = [json.loads(s) for s in (robustness_dir / "runs.jsonl").read_text().splitlines()]
    for rec in (json.loads(s) for s in (folder / "report.jsonl").read_text().splitlines()):
        accs = [r["accuracy"] for r in runs if (r["model"], r["condition"]) == (rec["model"], rec["condition"])]
        mean = sum(accs) / len(accs)
        assert rec["mean"] == pytest.approx(mean, abs=1e-12)
        assert rec["std"] == pytest.approx((sum((a - mean) ** 2 for a in accs) / len(accs)) ** 0.5, abs=1e-12)


def test_trace_count(robustness_dir, tmp_path):
    ckpt = robustness_dir / "run0" / "rl.bin"
    assert cli.main(["trace", "--checkpoint", str(ckpt), "--count", "10", "--out", str(tmp_path)] + TINY) == 0
    lines = (only_folder(tmp_path, "trace") / "traces.jsonl").read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert set(rec) >= {"image_id", "true_label", "steps", "predicted", "q_values"}


def test_eval_and_train_cl(robustness_dir, tmp_path):
    ckpt = robustness_dir / "run0" / "rl.bin"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", "distorted", "--out", str(tmp_path)] + TINY) == 0
    acc = json.loads((only_folder(tmp_path, "eval") / "metrics.json").read_text())["accuracy"]
    assert 0.0 <= acc <= 1.0
    assert cli.main(["train-cl", "--checkpoint", str(ckpt), "--out", str(tmp_path)] + TINY) == 0
    assert (only_folder(tmp_path, "train-cl") / "cl.bin").exists()
    nn = robustness_dir / "run0" / "nn.bin"
    assert cli.main(["train-cl", "--checkpoint", str(nn), "--out", str(tmp_path)] + TINY) == 2


def test_runtime_failure_exits_1(tmp_path, monkeypatch, capsys):
    def boom(*a, **kw):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(cli.P, "train_nn", boom)
    assert cli.main(["train-nn", "--out", str(tmp_path)] + TINY) == 1
    assert "stage NN" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "prep_rl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "robustness" in res.stdout
