import os

import numpy as np
import pytest

from sarcodesign.adversarial import TrainConfig, adv_train
from sarcodesign.dataset import generate_synthetic
from sarcodesign.model import FC, BatchNorm, Conv, Flatten, MaxPool, ReLU, build_model
from sarcodesign.quantization import quantize_model

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

# two conv blocks whose channel counts leave a partial last fold at pe_max=8
DESK_LAYERS = (
    Conv(10, 3, pad=1), BatchNorm(), ReLU(), MaxPool(2),
    Conv(20, 3, pad=1), BatchNorm(), ReLU(), MaxPool(2),
    Flatten(), FC(4),
)


@pytest.fixture(scope="session")
def desk_train():
    return generate_synthetic(4, 64, 16, seed=1)


@pytest.fixture(scope="session")
def desk_test():
    return generate_synthetic(4, 32, 16, seed=2, split="test")


@pytest.fixture(scope="session")
def desk_model(desk_train):
    graph = build_model("desk", (1, 16, 16), 4, DESK_LAYERS, seed=0)
    trained, _ = adv_train(graph, desk_train, TrainConfig(epochs=20, seed=0))
    return trained


@pytest.fixture(scope="session")
def desk_qmodel(desk_model, desk_train):
    return quantize_model(desk_model, desk_train.x)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, c1=3, c2=4, side=8, classes=3, bn=True):
    layers = [Conv(c1, 3, pad=1)]
    layers += [BatchNorm()] if bn else []
    layers += [ReLU(), MaxPool(2), Conv(c2, 3, pad=1)]
    layers += [BatchNorm()] if bn else []
    layers += [ReLU(), MaxPool(2), Flatten(), FC(classes)]
    return build_model("tiny", (1, side, side), classes, layers, seed=seed)


# ------------------------------------------------------------ acceptance log

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title}"
    ACCEPTANCE_LINES.append(line + (f"  [{detail}]" if detail else ""))
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
