import hashlib
import json
import subprocess
import sys

import pytest

from auwave.cli import main

SMALL_MODEL = ["--mlp-hidden", "16", "--latent-dim", "16", "--encoder-channels", "32,32,32",
               "--use-attention", "false"]


def digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.iterdir()) if p.is_file() and p.name != "manifest.json"}


def tree_digest(path):
    return {str(p.relative_to(path)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "3", "--hours", "80", "--out", str(root / "raw")]) == 0
    assert main(["prep", "--dataset", str(root / "raw"), "--out", str(root / "prep")]) == 0
    return root


def test_out_of_range_learning_rate_exits_with_range_message(tmp_path, capsys):
    code = main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path / "o"), "--lr", "1e-2"])
    assert code == 1
    err = capsys.readouterr().err
    assert "lr" in err and "[1e-05, 0.001]" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--gamma", "0.5"],
    ["train", "--unet-blocks", "6"],
    ["train", "--model", "transformer"],
    ["train", "--bogus", "1"],
    ["tune", "--trials", "0"],
])
def test_invalid_flags_exit_one(tmp_path, argv):
    assert main(argv + ["--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_missing_input_exits_one(tmp_path):
    assert main(["prep", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exits_two(tmp_path):
    (tmp_path / "raw").mkdir()
    (tmp_path / "raw" / "A.csv").write_text("timestamp,swh_m\n2024-01-01T00:00:00Z,1.0\n")
    assert main(["prep", "--dataset", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == 2


def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--hours", "40", "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert main(["synth", "--seed", "8", "--hours", "40", "--out", str(tmp_path / "c")]) == 0
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_config_file_then_flags_take_precedence(tmp_path, small_run):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nlr = 0.0005\ngamma = 0.9\nmax_epochs = 1\nmodel = rwr\n")
    out = tmp_path / "t"
    assert main(["train", "--config", str(ini), "--gamma", "0.97", "--batch-size", "16",
                 "--dataset", str(small_run / "prep" / "dataset.npz"), "--out", str(out)]) == 0
    cfg = manifest(out)["config"]
    assert cfg["lr"] == 0.0005            # from file
    assert cfg["gamma"] == 0.97           # flag beats file
    assert cfg["patience"] == 100         # default
    assert cfg["model"] == "rwr"


def test_bad_config_file_is_a_validation_error(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nlearning_rate = 1e-4\n")
    assert main(["train", "--config", str(ini), "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    ini.write_text("[train]\nlr = 5\n")
    assert main(["train", "--config", str(ini), "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_commands_do_not_mutate_inputs_and_replay_from_manifest(tmp_path, small_run):
    before = tree_digest(small_run / "raw"), tree_digest(small_run / "prep")
    ds = str(small_run / "prep" / "dataset.npz")
    out = tmp_path / "train"
    assert main(["train", "--dataset", ds, "--out", str(out), "--max-epochs", "1",
                 "--batch-size", "16", "--seed", "4"] + SMALL_MODEL) == 0
    assert (tree_digest(small_run / "raw"), tree_digest(small_run / "prep")) == before

    replay = tmp_path / "replay"
    assert main(manifest(out)["argv"] + ["--out", str(replay)]) == 0
    assert digest(out) == digest(replay)
    m = manifest(out)
    assert set(m) >= {"command", "config", "seed", "inputs", "outputs", "tool_version", "wall_time_s"}
    assert m["config"]["resolved_model"]["mlp_hidden"] == [16]


def test_ablate_writes_one_row_per_subset(tmp_path, small_run):
    out = tmp_path / "abl"
    assert main(["ablate", "--dataset", str(small_run / "prep" / "dataset.npz"), "--out", str(out),
                 "--model", "rwr", "--max-epochs", "1", "--batch-size", "16",
                 "--stations", "B01,B02,B03"]) == 0
    rows = (out / "ablation.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 1 + 3 + 3
    assert main(["ablate", "--dataset", str(small_run / "prep" / "dataset.npz"), "--out", str(out),
                 "--stations", "B01,XX"]) == 1


def test_tune_writes_journal_and_resumes(tmp_path, small_run):
    ds = str(small_run / "prep" / "dataset.npz")
    out = tmp_path / "tune"
    base = ["tune", "--dataset", ds, "--out", str(out), "--max-epochs", "1", "--batch-size", "16"]
    assert main(base + ["--trials", "2"]) == 0
    first = (out / "study.journal").read_text()
    assert main(base + ["--trials", "3"]) == 0
    resumed = (out / "study.journal").read_text()
    assert resumed.startswith(first) and resumed.count("\ntrial ") == first.count("\ntrial ") + 1
    assert (out / "history.csv").read_text().count("\n") == 4
    assert not (out / "importance.csv").exists()


def test_end_to_end_on_default_desk_dataset(tmp_path):
    """synth -> prep -> train -> eval on the default 2000-hour benchmark via the console script."""
    def run(*argv):
        proc = subprocess.run([sys.executable, "-m", "auwave.cli", *argv], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    run("synth", "--seed", "1", "--out", str(tmp_path / "raw"))
    run("prep", "--dataset", str(tmp_path / "raw"), "--out", str(tmp_path / "prep"))
    run("train", "--dataset", str(tmp_path / "prep" / "dataset.npz"), "--out", str(tmp_path / "train"),
        "--max-epochs", "1", "--seed", "1")
    run("eval", "--dataset", str(tmp_path / "prep" / "dataset.npz"),
        "--checkpoint", str(tmp_path / "train" / "model.auwc"), "--out", str(tmp_path / "eval"))
    assert {"grid.auwg", "grid.times", "buoys.csv"} <= set(digest(tmp_path / "raw"))
    assert {"model.auwc", "history.csv"} <= set(digest(tmp_path / "train"))
    assert {"per_sample_rmse.csv", "spatial_rmse.csv", "stats.csv", "histogram.csv",
            "spatial_rmse.ppm", "worst_sample_error.ppm"} <= set(digest(tmp_path / "eval"))
    per_sample = (tmp_path / "eval" / "per_sample_rmse.csv").read_text().strip().split("\n")
    assert len(per_sample) == 1 + 2000 - 1400 - 300
