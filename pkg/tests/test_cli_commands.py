"""Tests for CLI commands functionality."""

import json

import pytest
import yaml

from hlm import checkpoint as ckpt_io
from hlm.cli import app
from hlm.constants import CHECKPOINT_FN, METRICS_FN, RESOLVED_CONFIG_FN
from hlm.core import train
from hlm.tokenizer import TokenizerModel


@pytest.fixture
def headless_checkpoint(tiny_config, temp_dir):
    """A tiny pretrained headless checkpoint."""
    return train(tiny_config, temp_dir / "pretrained").checkpoint_path


@pytest.fixture
def pairs_path(temp_dir):
    path = temp_dir / "pairs.tsv"
    path.write_text("# frequent words\nthe\tand\nthe\tof\nmill\triver\n")
    return path


def test_train_command(runner, config_path, temp_dir):
    """Test a tiny run writes a checkpoint and honours --set and --seed."""
    out = temp_dir / "run"
    result = runner.invoke(
        app, ["train", "--out", str(out), "--set", "eval_every=3", "--seed", "7"]
    )

    assert result.exit_code == 0
    assert "Trained pretrained_headless model for 6 steps" in result.stdout
    assert (out / CHECKPOINT_FN).exists()
    records = [json.loads(line) for line in (out / METRICS_FN).read_text().splitlines()]
    assert records[0]["seed"] == 7
    assert [r["step"] for r in records[1:]] == [3, 6]


def test_train_with_explicit_config(runner, config_path, temp_dir, monkeypatch):
    """Test --config works without the env var."""
    monkeypatch.delenv("HLM_CONFIG_PATH")
    result = runner.invoke(
        app, ["train", "-c", str(config_path), "-o", str(temp_dir / "run")]
    )

    assert result.exit_code == 0


def test_train_unknown_key_is_config_error(runner, config_path, temp_dir):
    """Test a misspelled override exits with the config error code."""
    result = runner.invoke(app, ["train", "--out", str(temp_dir), "--set", "batchsize=2"])

    assert result.exit_code == 3


def test_train_malformed_override_is_usage_error(runner, config_path, temp_dir):
    """Test --set without '=' is rejected by the parser."""
    result = runner.invoke(app, ["train", "--out", str(temp_dir), "--set", "seed"])

    assert result.exit_code == 2


def test_train_without_corpus_is_data_error(runner, config_path, temp_dir):
    """Test an empty corpus list exits with the data error code."""
    result = runner.invoke(app, ["train", "--out", str(temp_dir), "--set", "corpus=[]"])

    assert result.exit_code == 4


def test_eval_headless_without_head(runner, config_path, headless_checkpoint):
    """Test perplexity on a headless checkpoint needs a head or the naive readout."""
    result = runner.invoke(app, ["eval", "--checkpoint", str(headless_checkpoint)])

    assert result.exit_code == 1

    result = runner.invoke(
        app, ["eval", "--checkpoint", str(headless_checkpoint), "--naive-readout"]
    )

    assert result.exit_code == 0
    report = json.loads(result.stdout.strip().splitlines()[-1])
    assert report["metric"] == "perplexity"
    assert report["value"] > 1.0
    assert report["checkpoint_digest"] == ckpt_io.file_digest(headless_checkpoint)


@pytest.mark.parametrize("metric", ["retrieval-in-batch", "retrieval-full", "cwt-literal"])
def test_eval_embedding_metrics_to_csv(runner, config_path, headless_checkpoint, temp_dir, metric):
    """Test embedding-space metrics work on a headless checkpoint and write CSV."""
    out = temp_dir / "reports"
    result = runner.invoke(
        app,
        [
            "eval",
            "--checkpoint",
            str(headless_checkpoint),
            "--metric",
            metric,
            "--format",
            "csv",
            "--out",
            str(out),
        ],
    )

    assert result.exit_code == 0
    lines = (out / f"eval-{metric}.csv").read_text().splitlines()
    assert lines[0] == "metric,value,n_examples,half_width,checkpoint_digest"
    assert lines[1].startswith(metric + ",")


def test_finetune_head_then_cloze(runner, config_path, headless_checkpoint, temp_dir):
    """Test head recovery produces a checkpoint the cloze probe accepts."""
    out = temp_dir / "ft"
    result = runner.invoke(
        app, ["finetune-head", "--checkpoint", str(headless_checkpoint), "--out", str(out)]
    )

    assert result.exit_code == 0
    assert ckpt_io.load(out / CHECKPOINT_FN).stage == "head_recovered"

    result = runner.invoke(
        app, ["eval", "--checkpoint", str(out / CHECKPOINT_FN), "--metric", "cloze"]
    )

    assert result.exit_code == 0
    report = json.loads(result.stdout.strip().splitlines()[-1])
    assert 0.0 <= report["value"] <= 1.0 and report["n_examples"] > 0


def test_finetune_head_rejects_vanilla(runner, config_path, tiny_config, temp_dir):
    """Test head recovery refuses a vanilla checkpoint."""
    vanilla = train(tiny_config.update(objective="vanilla_ce"), temp_dir / "vanilla")
    result = runner.invoke(
        app,
        ["finetune-head", "--checkpoint", str(vanilla.checkpoint_path), "--out", str(temp_dir / "ft")],
    )

    assert result.exit_code == 1


def test_bench_command(runner, config_path):
    """Test a small loss benchmark grid prints CSV."""
    result = runner.invoke(
        app,
        ["bench", "--vocab", "100", "--vocab", "400", "--k", "8", "--dim", "4", "--seqs", "2"],
    )

    assert result.exit_code == 0
    lines = [line for line in result.stdout.splitlines() if line.startswith(("objective", "vanilla", "headless"))]
    assert lines[0].startswith("objective,vocab_size,k,d_model")
    assert len(lines) == 5


def test_bench_needs_twenty_repetitions(runner, config_path):
    """Test fewer repetitions than the minimum is a usage error."""
    result = runner.invoke(app, ["bench", "--repetitions", "5"])

    assert result.exit_code == 2


def test_bench_throughput(runner, config_path):
    """Test the training-throughput comparison."""
    result = runner.invoke(app, ["bench", "--throughput", "--steps", "1", "--format", "jsonl"])

    assert result.exit_code == 0
    rows = [json.loads(line) for line in result.stdout.splitlines() if line.startswith("{")]
    assert [r["objective"] for r in rows] == ["vanilla_ce", "headless_cwt"]


def test_probe_synonyms(runner, headless_checkpoint, pairs_path, temp_dir):
    """Test the synonym probe prints a histogram and compares two checkpoints."""
    result = runner.invoke(
        app, ["probe-synonyms", "--checkpoint", str(headless_checkpoint), "--pairs", str(pairs_path)]
    )

    assert result.exit_code == 0
    assert "mean cosine" in result.stdout
    assert "bin_low,bin_high,count" in result.stdout

    out = temp_dir / "synonyms"
    result = runner.invoke(
        app,
        [
            "probe-synonyms",
            "--checkpoint",
            str(headless_checkpoint),
            "--compare",
            str(headless_checkpoint),
            "--pairs",
            str(pairs_path),
            "--out",
            str(out),
        ],
    )

    assert result.exit_code == 0
    assert "shift +0.0000" in result.stdout
    assert (out / "synonyms.csv").exists() and (out / "synonyms-first.csv").exists()


def test_export_tokenizer(runner, config_path, headless_checkpoint, temp_dir):
    """Test the tokenizer can be extracted from a checkpoint or trained from the corpus."""
    from_ckpt = temp_dir / "from-ckpt.bpe"
    result = runner.invoke(
        app, ["export-tokenizer", "--checkpoint", str(headless_checkpoint), "--out", str(from_ckpt)]
    )

    assert result.exit_code == 0
    assert TokenizerModel.load(from_ckpt) == ckpt_io.load(headless_checkpoint).load_tokenizer()

    trained = temp_dir / "trained.bpe"
    result = runner.invoke(app, ["export-tokenizer", "--out", str(trained)])

    assert result.exit_code == 0
    assert 0 < TokenizerModel.load(trained).vocab.size <= 300


def test_train_resume_at_final_step_fails(runner, config_path, headless_checkpoint, temp_dir):
    """Test resuming a finished run exits non-zero instead of reporting success."""
    result = runner.invoke(
        app, ["train", "--out", str(temp_dir / "again"), "--resume", str(headless_checkpoint)]
    )

    assert result.exit_code == 1
    assert "raise total_steps" in result.stderr


def test_reports_carry_resolved_config(runner, config_path, headless_checkpoint, pairs_path, temp_dir):
    """Test every report directory gets the settings it was produced with."""
    out = temp_dir / "eval"
    result = runner.invoke(
        app,
        [
            "eval",
            "--checkpoint",
            str(headless_checkpoint),
            "--naive-readout",
            "--set",
            "seq_len=8",
            "--out",
            str(out),
        ],
    )

    assert result.exit_code == 0
    resolved = yaml.safe_load((out / RESOLVED_CONFIG_FN).read_text())
    assert resolved["seq_len"] == 8 and resolved["model"]["d_model"] == 16

    out = temp_dir / "bench"
    result = runner.invoke(
        app, ["bench", "--vocab", "100", "--k", "8", "--dim", "4", "--seqs", "2", "--out", str(out)]
    )

    assert result.exit_code == 0
    resolved = yaml.safe_load((out / RESOLVED_CONFIG_FN).read_text())
    assert resolved["vocab_sizes"] == [100] and resolved["ks"] == [8]
    assert resolved["d_model"] == 4 and resolved["repetitions"] == 20

    out = temp_dir / "throughput"
    result = runner.invoke(app, ["bench", "--throughput", "--steps", "1", "--out", str(out)])

    assert result.exit_code == 0
    assert yaml.safe_load((out / RESOLVED_CONFIG_FN).read_text())["model"]["vocab_size"] == 300

    out = temp_dir / "synonyms"
    result = runner.invoke(
        app,
        [
            "probe-synonyms",
            "--checkpoint",
            str(headless_checkpoint),
            "--pairs",
            str(pairs_path),
            "--out",
            str(out),
        ],
    )

    assert result.exit_code == 0
    resolved = yaml.safe_load((out / RESOLVED_CONFIG_FN).read_text())
    assert resolved["pairs"] == str(pairs_path) and resolved["compare"] is None
    assert resolved["train_config"]["objective"] == "headless_cwt"


def test_stdout_reports_write_no_config(runner, config_path, temp_dir, monkeypatch):
    """Test nothing is written next to stdout reports."""
    monkeypatch.chdir(temp_dir)
    result = runner.invoke(app, ["bench", "--vocab", "100", "--k", "8", "--dim", "4", "--seqs", "2"])

    assert result.exit_code == 0
    assert not (temp_dir / RESOLVED_CONFIG_FN).exists()
