import json
import os
import subprocess

import pytest

CLI = os.environ.get("TOKENSEL_CLI", "tokensel")


def run(*args, cwd=None):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, cwd=cwd)


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "a1.tsv"
    r = run("gen", "--model", "assumption1", "--seed", 3, "--n", 6, "--t", 4,
            "--relevant-pos", 1, "--relevant-neg", 1, "--irrelevant", 8, "--out", path)
    assert r.returncode == 0, r.stderr
    assert "n=6" in r.stdout
    return path


def test_verify_passes_on_generated_data(corpus):
    r = run("verify", "--corpus", corpus, "--seed", 1, "--dim", 512, "--eta0", 4)
    assert r.returncode == 0, r.stdout + r.stderr
    assert "limit_is_maxmargin" in r.stdout


def test_verify_json_lines(corpus):
    r = run("verify", "--corpus", corpus, "--seed", 1, "--dim", 512, "--eta0", 4, "--json")
    checks = [json.loads(line) for line in r.stdout.splitlines() if line.strip()]
    names = {c["check"] for c in checks}
    assert {"assumption_one", "q_bounds", "maxmargin_norm_bound"} <= names
    assert all(c["status"] in {"PASS", "FAIL", "SKIP", "INFO"} for c in checks)


def test_small_dimension_skips_error_bound(corpus):
    r = run("verify", "--corpus", corpus, "--seed", 1, "--dim", 8, "--json")
    checks = {c["check"]: c for c in map(json.loads, r.stdout.splitlines())}
    assert checks["stage1_error_bound"]["status"] == "SKIP"


def test_gen_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.tsv"
        assert run("gen", "--model", "klevel", "--paper-defaults", "--seed", 9, "--n", 20,
                   "--out", path).returncode == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_klevel_default_vocabulary(tmp_path):
    r = run("gen", "--model", "klevel", "--paper-defaults", "--seed", 1, "--n", 5,
            "--out", tmp_path / "k.tsv")
    assert r.returncode == 0, r.stderr
    assert "|S|=2048" in r.stdout


def test_usage_errors(tmp_path, corpus):
    assert run("verify", "--corpus", corpus).returncode == 2
    conf = tmp_path / "bad.conf"
    conf.write_text("dimm = 3\n")
    r = run("verify", "--corpus", corpus, "--seed", 1, "--config", conf)
    assert r.returncode == 2
    assert "dimm" in r.stderr


def test_io_errors(tmp_path, corpus):
    assert run("verify", "--corpus", tmp_path / "missing.tsv", "--seed", 1).returncode == 3
    # The parent of the output path is a regular file, which no user can write into.
    assert run("stats", "--corpus", corpus, "--out", corpus / "x.csv").returncode == 3


def test_stats_on_toy_corpus(tmp_path):
    toy = tmp_path / "toy.tsv"
    toy.write_text("+1\tgood movie great\n-1\tbad movie awful\n")
    out = tmp_path / "stats.csv"
    assert run("stats", "--corpus", toy, "--out", out).returncode == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "token,count_pos,count_neg,alpha,posterior_diff,category"
    rows = {l.split(",")[0]: l.split(",") for l in lines[1:]}
    assert float(rows["movie"][3]) == 0.0
    assert float(rows["good"][4]) == 1.0


def test_train_two_stage_outputs(tmp_path, corpus):
    out = tmp_path / "run"
    r = run("train", "--corpus", corpus, "--seed", 1, "--dim", 64, "--max-steps", 2000,
            "--out-dir", out)
    assert r.returncode == 0, r.stderr
    for name in ("state_init.json", "state.json", "figure.csv", "trajectory.jsonl"):
        assert (out / name).exists()
    traj = [json.loads(l) for l in (out / "trajectory.jsonl").read_text().splitlines()]
    assert traj[0]["step"] == 0
    assert traj[-1]["norm_p"] > traj[0]["norm_p"]


def test_zero_epochs_leaves_state_unchanged(tmp_path, corpus):
    out = tmp_path / "full"
    r = run("train", "--corpus", corpus, "--seed", 2, "--dim", 16, "--mode", "full",
            "--epochs", 0, "--out-dir", out)
    assert r.returncode == 0, r.stderr
    assert (out / "state.json").read_bytes() == (out / "state_init.json").read_bytes()


def test_two_layer_training(tmp_path, corpus):
    out = tmp_path / "tl"
    r = run("train", "--corpus", corpus, "--seed", 2, "--dim", 16, "--mode", "two-layer",
            "--epochs", 3, "--out-dir", out)
    assert r.returncode == 0, r.stderr
    epochs = [json.loads(l) for l in (out / "epochs.jsonl").read_text().splitlines()]
    assert len(epochs) == 4
    assert (out / "layernorm.json").exists()
