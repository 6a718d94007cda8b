import numpy as np
import pytest
import torch

from crossmost.config import RunConfig


def softmax_rows(rng: np.random.Generator, b: int, c: int, scale: float = 3.0) -> np.ndarray:
    z = rng.normal(scale=scale, size=(b, c))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """Small enough that a whole pretrain + self-train cycle takes seconds."""
    return RunConfig().replace(
        **{
            "data.n_classes": 3,
            "data.n_points": 128,
            "data.views": 2,
            "data.pretrain_views": 2,
            "data.pixels": 16,
            "data.train_per_class": 6,
            "data.test_per_class": 4,
            "data.pretrain_per_class": 6,
            "data.exemplars_per_class": 1,
            "tokenizer.n_groups": 8,
            "tokenizer.group_size": 8,
            "tokenizer.patch_size": 4,
            "model.d_model": 16,
            "model.n_layers": 1,
            "model.n_heads": 2,
            "model.d_embed": 8,
            "trainer.batch_size": 6,
            "trainer.pretrain_batch_size": 6,
            "trainer.epochs": 2,
            "trainer.pretrain_epochs": 1,
        }
    )


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
