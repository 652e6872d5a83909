import numpy as np
import pytest

from srot import measures
from srot.classifier import TrainConfig, default_dims, init_model, train

# settings that reliably separate the two toy blobs while flagging the
# swapped samples; shared by several suites
TOY_AR = dict(mode="AR", lr=1e-2, epochs=1000, batch_size=32, log_every=100)


def random_instance(rng, n, m, d=2, uniform=True):
    x = rng.uniform(size=(n, d))
    y = rng.uniform(size=(m, d))
    if uniform:
        a, b = np.full(n, 1.0 / n), np.full(m, 1.0 / m)
    else:
        a, b = rng.uniform(0.2, 1.0, n), rng.uniform(0.2, 1.0, m)
        a, b = a / a.sum(), b / b.sum()
    C = np.sqrt(((x[:, None] - y[None]) ** 2).sum(-1))
    return a, b, C


@pytest.fixture(scope="session")
def toy():
    return measures.gen_toy_2d(75, 6, 4, seed=0)


@pytest.fixture(scope="session")
def toy_ar_model(toy):
    cfg = TrainConfig(eta=toy.meta["eta"], seed=0, **TOY_AR)
    model, _ = train(init_model(default_dims(2), 0), toy, cfg)
    return model


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
