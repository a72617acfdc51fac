import shutil
import tempfile
from pathlib import Path
from traceback import print_tb

import numpy as np
import pytest
import yaml
from typer.testing import CliRunner as BaseCliRunner

from hlm.constants import CONFIG_PATH_ENV_VAR
from hlm.data import Batch
from hlm.settings import TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"


class CliRunner(BaseCliRunner):
    with_traceback = True

    def invoke(self, cli, commands, **kwargs):
        result = super().invoke(cli, commands, **kwargs)
        if not result.exit_code == 0 and self.with_traceback:
            if result.exc_info is not None:
                print_tb(result.exc_info[2])
            print(result.exception)
            print(result.stderr)
        return result


@pytest.fixture
def temp_dir():
    """Create a temporary directory for run outputs."""
    temp_dir = Path(tempfile.mkdtemp())
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def corpus_path():
    return FIXTURES / "corpus.txt"


@pytest.fixture
def tiny_config_data(corpus_path):
    """A model small enough to train for a few steps in a test."""
    return {
        "objective": "headless_cwt",
        "task": "mlm",
        "corpus": [str(corpus_path)],
        "holdout_fraction": 0.2,
        "batch_size": 4,
        "seq_len": 16,
        "mask_rate": 0.25,
        "total_steps": 6,
        "warmup_steps": 2,
        "eval_every": 2,
        "checkpoint_every": 4,
        "timing": False,
        "model": {
            "vocab_size": 300,
            "d_model": 16,
            "max_len": 16,
            "n_layers": 1,
            "n_heads": 2,
            "d_ff": 32,
        },
        "finetune": {"total_steps": 4, "warmup_steps": 1},
    }


@pytest.fixture
def tiny_config(tiny_config_data):
    return TrainConfig(**tiny_config_data)


@pytest.fixture
def config_path(temp_dir, tiny_config_data, monkeypatch):
    """Write the tiny config to disk and point the env var at it."""
    path = temp_dir / "config.yml"
    with open(path, "w") as f:
        yaml.safe_dump(tiny_config_data, f)
    monkeypatch.setenv(CONFIG_PATH_ENV_VAR, str(path))
    return path


@pytest.fixture
def random_batch():
    """Factory for an MLM-style batch with K supervised positions and random targets."""

    def make(n: int, length: int, k: int, vocab_size: int, seed: int = 0) -> Batch:
        gen = np.random.default_rng(seed)
        flat = np.sort(gen.choice(n * length, size=k, replace=False))
        selection = np.stack([flat // length, flat % length], axis=1).astype(np.int64)
        x = gen.integers(0, vocab_size, size=(n, length))
        return Batch(x, x.copy(), selection, x[selection[:, 0], selection[:, 1]])

    return make


@pytest.fixture
def runner():
    """Create CLI test runner."""
    return CliRunner()
