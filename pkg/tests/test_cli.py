"""End-to-end command tests on a 2x2 world with miniature models; every
command is exercised through main() exactly as a shell invocation would."""

import json
import os

import pytest

from masklab import cli, learn
from masklab.cli import main

TINY_CONFIG = {
    "world": {
        "kind": "potts",
        "height": 2,
        "width": 2,
        "vocab_size": 3,
        "couplings": [0.7, -0.7],
    },
    "generator": {"layers": 1, "heads": 2, "embed_dim": 16, "hidden_dim": 32},
    "critic": {"layers": 1, "heads": 2, "embed_dim": 16, "hidden_dim": 32},
    "train_generator": {
        "epochs": 2, "steps_per_epoch": 30, "batch_size": 32,
        "learning_rate": 0.002, "eval_interval": 30, "eval_batches": 2,
    },
    "train_critic": {
        "epochs": 2, "steps_per_epoch": 30, "batch_size": 32,
        "learning_rate": 0.002, "eval_interval": 30, "eval_batches": 2,
    },
    "sampling": {"steps": 3, "noise_scale": 1.0, "class_index": 0, "n": 150},
    "compare": {"steps": 2, "n_samples": 150, "seeds": 2, "class_index": 0},
    "sweep": {
        "selectors": ["confidence"], "noise_scales": [0.0],
        "temp_intercepts": [1.0], "steps": 2, "n_samples": 120, "class_index": 0,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Config file plus trained tiny checkpoints, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    assert main(["train-generator", "--config", str(cfg_path), "--seed", "5",
                 "--out", str(root / "gen")]) == 0
    assert main(["train-critic", "--config", str(cfg_path), "--seed", "6",
                 "--out", str(root / "crit"),
                 "--generator", str(root / "gen" / "generator.tclw")]) == 0
    return {
        "root": root,
        "config": str(cfg_path),
        "gen": str(root / "gen" / "generator.tclw"),
        "crit": str(root / "crit" / "critic.tclw"),
    }


def read_lines(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


# ---------------------------------------------------------------------------
# Training commands
# ---------------------------------------------------------------------------


def test_train_generator_outputs(workdir):
    out = workdir["root"] / "gen"
    assert (out / "generator.tclw").exists()
    sidecar = json.loads((out / "generator.tclw.json").read_text())
    assert sidecar["model_kind"] == "generator"
    assert sidecar["seed"] == 5 and "config_hash" in sidecar
    lines = read_lines(out / "generator_loss.csv")
    assert lines[0].startswith("# format_version=1 config_hash=")
    assert lines[1] == "step,split,metric,value"


def test_train_generator_rerun_is_byte_identical(workdir, tmp_path):
    assert main(["train-generator", "--config", workdir["config"], "--seed", "5",
                 "--out", str(tmp_path)]) == 0
    original = (workdir["root"] / "gen" / "generator.tclw").read_bytes()
    assert (tmp_path / "generator.tclw").read_bytes() == original
    a = (workdir["root"] / "gen" / "generator_loss.csv").read_bytes()
    assert (tmp_path / "generator_loss.csv").read_bytes() == a


def test_invalid_vocab_size_exits_2(tmp_path, capsys):
    bad = dict(TINY_CONFIG, world=dict(TINY_CONFIG["world"], vocab_size=0))
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    code = main(["train-generator", "--config", str(p), "--out", str(tmp_path)])
    assert code == 2
    assert "world" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = dict(TINY_CONFIG, sampling={"stepz": 3})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["train-generator", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "stepz" in capsys.readouterr().err


def test_training_divergence_exits_3(workdir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise learn.TrainingDiverged(7)

    monkeypatch.setattr(cli.learn, "train_generator", boom)
    code = main(["train-generator", "--config", workdir["config"], "--out", str(tmp_path)])
    assert code == 3


def test_train_critic_dimension_mismatch_exits_2(workdir, tmp_path):
    other = dict(TINY_CONFIG, world={"kind": "potts", "height": 1, "width": 3,
                                     "vocab_size": 3, "couplings": [0.5, -0.5]})
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other))
    code = main(["train-critic", "--config", str(p), "--out", str(tmp_path),
                 "--generator", workdir["gen"]])
    assert code == 2


def test_missing_checkpoint_exits_4(workdir, tmp_path):
    code = main(["train-critic", "--config", workdir["config"], "--out", str(tmp_path),
                 "--generator", str(tmp_path / "nope.tclw")])
    assert code == 4


# ---------------------------------------------------------------------------
# Sampling and eval
# ---------------------------------------------------------------------------


def test_sample_writes_and_replays_identically(workdir, tmp_path):
    args = ["sample", "--config", workdir["config"], "--seed", "9",
            "--generator", workdir["gen"], "--critic", workdir["crit"],
            "--selector", "critic", "--n", "40", "--trace", "traces.jsonl"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("samples.jsonl", "traces.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = read_lines(tmp_path / "a" / "samples.jsonl")
    meta = json.loads(lines[0])
    assert meta["format_version"] == 1 and meta["seed"] == 9
    assert len(lines) == 41
    grid = json.loads(lines[1])
    assert grid["height"] == 2 and len(grid["tokens"]) == 4


def test_sample_zero_count_writes_empty_file(workdir, tmp_path):
    assert main(["sample", "--config", workdir["config"], "--out", str(tmp_path),
                 "--generator", workdir["gen"], "--selector", "confidence",
                 "--n", "0"]) == 0
    lines = read_lines(tmp_path / "samples.jsonl")
    assert len(lines) == 1  # metadata only


def test_sample_oracle_selector_needs_no_models(workdir, tmp_path):
    assert main(["sample", "--config", workdir["config"], "--out", str(tmp_path),
                 "--selector", "oracle_conditional", "--n", "120"]) == 0
    assert main(["sample", "--config", workdir["config"], "--out", str(tmp_path),
                 "--selector", "oracle_conditional", "--n", "5",
                 "--trace", "t.jsonl"]) == 2


def test_sample_bad_checkpoint_exits_4(workdir, tmp_path):
    bad = tmp_path / "junk.tclw"
    bad.write_bytes(b"JUNKJUNKJUNK")
    (tmp_path / "junk.tclw.json").write_text("{}")
    code = main(["sample", "--config", workdir["config"], "--out", str(tmp_path),
                 "--generator", str(bad), "--selector", "confidence", "--n", "3"])
    assert code == 4


def test_eval_oracle_samples_and_determinism(workdir, tmp_path):
    sdir = tmp_path / "s"
    assert main(["sample", "--config", workdir["config"], "--out", str(sdir),
                 "--selector", "oracle_conditional", "--n", "4000", "--seed", "3"]) == 0
    for sub in ("e1", "e2"):
        assert main(["eval", "--config", workdir["config"], "--out", str(tmp_path / sub),
                     "--samples", str(sdir / "samples.jsonl"), "--class-index", "0"]) == 0
    a = (tmp_path / "e1" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "e2" / "metrics.csv").read_bytes()
    lines = read_lines(tmp_path / "e1" / "metrics.csv")
    header = lines[1].split(",")
    row = dict(zip(header, lines[2].split(",")))
    assert float(row["joint_tv"]) < 0.06  # exact sampler, 4000 draws, 81 states


def test_eval_mixed_class_exits_2(workdir, tmp_path):
    path = tmp_path / "mixed.jsonl"
    lines = [json.dumps({"config_hash": "x", "format_version": 1, "seed": 0})]
    for c in (0, 1):
        lines.append(json.dumps({"class": c, "tokens": [0, 1, 2, 0], "height": 2, "width": 2}))
    path.write_text("\n".join(lines) + "\n")
    code = main(["eval", "--config", workdir["config"], "--out", str(tmp_path),
                 "--samples", str(path), "--class-index", "0"])
    assert code == 2


# ---------------------------------------------------------------------------
# Compare / sweep
# ---------------------------------------------------------------------------


def test_compare_outputs_and_worker_invariance(workdir, tmp_path):
    base = ["compare", "--config", workdir["config"], "--seed", "2",
            "--generator", workdir["gen"], "--critic", workdir["crit"]]
    assert main(base + ["--out", str(tmp_path / "w1")]) == 0
    assert main(base + ["--out", str(tmp_path / "w2"), "--workers", "2"]) == 0
    for name in ("compare.csv", "compare_summary.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()
    lines = read_lines(tmp_path / "w1" / "compare.csv")
    selectors = {ln.split(",")[1] for ln in lines[2:]}
    assert selectors == {"critic", "confidence", "oracle_conditional"}
    summary = read_lines(tmp_path / "w1" / "compare_summary.csv")
    assert any(ln.startswith("sign_test") for ln in summary[2:])


def test_compare_single_seed_marks_na(workdir, tmp_path):
    assert main(["compare", "--config", workdir["config"], "--seed", "2", "--seeds", "1",
                 "--generator", workdir["gen"], "--critic", workdir["crit"],
                 "--out", str(tmp_path)]) == 0
    summary = read_lines(tmp_path / "compare_summary.csv")
    sign = [ln for ln in summary if ln.startswith("sign_test")][0]
    assert sign.split(",")[-1] == "n/a"


def test_sweep_single_point_grid(workdir, tmp_path):
    assert main(["sweep", "--config", workdir["config"], "--seed", "4",
                 "--generator", workdir["gen"], "--out", str(tmp_path)]) == 0
    lines = read_lines(tmp_path / "sweep.csv")
    assert lines[0].startswith("# format_version=1 config_hash=")
    assert len(lines) == 3  # meta + header + one row
    assert lines[2].startswith("confidence,")


# ---------------------------------------------------------------------------
# Refine / reject
# ---------------------------------------------------------------------------


def test_refine_command(workdir, tmp_path):
    sdir = tmp_path / "s"
    assert main(["sample", "--config", workdir["config"], "--out", str(sdir),
                 "--generator", workdir["gen"], "--selector", "confidence",
                 "--n", "120", "--seed", "8"]) == 0
    assert main(["refine", "--config", workdir["config"], "--out", str(tmp_path / "r"),
                 "--samples", str(sdir / "samples.jsonl"),
                 "--generator", workdir["gen"], "--critic", workdir["crit"],
                 "--ratio", "0.5", "--steps", "4", "--seed", "8"]) == 0
    refined = read_lines(tmp_path / "r" / "refined.jsonl")
    assert len(refined) == 121
    delta = read_lines(tmp_path / "r" / "refine_delta.csv")
    assert delta[1] == "class,n_samples,nll_before,nll_after,delta"
    assert main(["refine", "--config", workdir["config"], "--out", str(tmp_path / "r2"),
                 "--samples", str(sdir / "samples.jsonl"),
                 "--generator", workdir["gen"], "--critic", workdir["crit"],
                 "--ratio", "1.5", "--steps", "4"]) == 2


def test_reject_accept_rate_maps_to_candidates(workdir, tmp_path):
    base = ["reject", "--config", workdir["config"], "--seed", "11",
            "--generator", workdir["gen"], "--critic", workdir["crit"],
            "--selector", "critic", "--n", "30"]
    assert main(base + ["--accept-rate", "0.2", "--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--candidates", "5", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "samples.jsonl").read_bytes() == (
        tmp_path / "b" / "samples.jsonl"
    ).read_bytes()
    assert main(base + ["--accept-rate", "1.5", "--out", str(tmp_path / "c")]) == 2


def test_canonical_hash_stability(workdir):
    a = cli.config_hash({"b": 1.5, "a": [1, 2]})
    b = cli.config_hash({"a": [1, 2], "b": 1.5})
    assert a == b and len(a) == 16
