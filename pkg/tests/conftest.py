import numpy as np
import pytest

from advfusion.adapters import Adapter, AdapterStack
from advfusion.model import ModelConfig, TransformerModel


def tiny_config(dtype="float32", **kw):
    base = dict(vocab=40, n_layers=2, hidden=16, n_heads=2, ff_dim=32, max_len=16, n_decoder_layers=1, dtype=dtype)
    base.update(kw)
    return ModelConfig(**base)


def language_stack(config, tags=("go", "java", "ruby"), seed=100, randomize=True, reduction=4):
    """Language adapters with non-zero up projections so each candidate differs."""
    adapters = []
    for i, tag in enumerate(tags):
        a = Adapter.create(config, tag, kind="language", reduction=reduction, seed=seed + i)
        if randomize:
            rng = np.random.default_rng(seed + 50 + i)
            for t in a.named_tensors().values():
                t.data = rng.uniform(-0.3, 0.3, size=t.shape).astype(t.data.dtype)
        adapters.append(a)
    return AdapterStack(adapters)


def randomize(model, names, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    for n in names:
        t = model.params[n]
        t.data = rng.uniform(-scale, scale, size=t.shape).astype(t.data.dtype)


@pytest.fixture
def cfg32():
    return tiny_config()


@pytest.fixture
def cfg64():
    return tiny_config("float64")


@pytest.fixture
def model32(cfg32):
    return TransformerModel(cfg32, seed=0)


@pytest.fixture
def tokens():
    return np.array([[7, 8, 9, 10, 11, 12], [13, 14, 15, 16, 0, 0]])


# acceptance results, filled by test_acceptance.py and printed after the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
