import numpy as np
import pytest

from imsm.harness.tasks import task_vocab
from imsm.model import ModelConfig, init_weights


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; echoed again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" | {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vocab():
    return task_vocab()


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=40)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=3, std=0.3).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def copy_model(vocab):
    """Small backbone trained with all weights on the copy task; returns (weights, result, test rows)."""
    from imsm.harness.tasks import TaskSpec, generate_task
    from imsm.tokendata import make_example
    from imsm.trainer import TrainConfig, train_full

    splits = generate_task(TaskSpec("copy", 1500, 2, 4, seed=0))
    ex = [make_example(r["prompt"], r["completion"], vocab) for r in splits["train"]]
    cfg = ModelConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=2, d_ff=128, max_seq_len=32)
    w = init_weights(cfg, seed=0)
    result = train_full(TrainConfig(lr=1e-3, batch_size=16, epochs=100, max_steps=600, weight_decay=0.0), ex, w)
    return w, result, splits["test"]
