import numpy as np
import pytest
from hypothesis import settings

from hawqkit.models import ModelSpec, build_model

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Append (criterion, passed, detail, seconds); printed in the summary."""
    def record(n, passed, detail, seconds):
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  ({seconds:6.1f} s)  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture
def small_mlp():
    model, part = build_model(ModelSpec("mlp", [4, 8, 3]), seed=1)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 4))
    y = rng.integers(0, 3, 32)
    return model, part, (x, y)


@pytest.fixture(scope="session")
def tiny_resnet():
    spec = ModelSpec("mini-resnet", [4, 4, 6], input_shape=(1, 6, 6), num_classes=3)
    return spec


def trained_mlp(seed, widths=(6, 14, 3), n=240, epochs=8):
    """A small MLP (at most 300 parameters) trained briefly on blobs.

    Returns (model, dataset)."""
    from hawqkit.data import synth_blobs
    from hawqkit.trainer import OptimizerConfig, train_fp

    model, part = build_model(ModelSpec("mlp", list(widths)), seed=seed)
    assert part.total <= 300
    ds = synth_blobs(n, widths[-1], widths[0], seed, separation=3.0)
    train_fp(model, ds, OptimizerConfig(lr=0.05, batch_size=32, max_epochs=epochs, seed=seed,
                                        patience=epochs))
    return model, ds
