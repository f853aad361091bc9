import numpy as np
import pytest
import torch
import torch.nn as nn

from memfab.data import ExampleSet, make_synthetic
from memfab.model_core import ClassifierModel, TrainConfig, make_membership_splits, train_classifier

torch.set_num_threads(1)


class LogisticNet(nn.Module):
    """Two-class model on a single pixel: logits (0, w*x + b), so p_1 = sigmoid(w*x + b)."""

    def __init__(self, w=1.0, b=0.0, dtype=torch.float64):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w, dtype=dtype))
        self.b = nn.Parameter(torch.tensor(b, dtype=dtype))

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        s = self.w * x.flatten(1)[:, :1] + self.b
        return torch.cat([torch.zeros_like(s), s], dim=1)


class ConstantNet(nn.Module):
    """Fixed logits independent of the input (the 0 * x term keeps autograd connected)."""

    def __init__(self, logits, dtype=torch.float32):
        super().__init__()
        self.register_buffer("z", torch.as_tensor(logits, dtype=dtype))

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.z.expand(len(x), -1) + 0.0 * x.flatten(1).sum(1, keepdim=True)


class MemorizerNet(nn.Module):
    """Confident on stored training images, uniform elsewhere."""

    def __init__(self, x, y, n_classes, scale=30.0):
        super().__init__()
        self.register_buffer("mem", x.flatten(1).clone())
        self.register_buffer("onehot", torch.nn.functional.one_hot(y, n_classes).float())
        self.scale = scale

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        d2 = torch.cdist(x.flatten(1), self.mem) ** 2
        return self.scale * torch.exp(-d2 / 1e-6) @ self.onehot


def wrap(net, n_classes, shape):
    return ClassifierModel(net, n_classes, "custom", shape)


@pytest.fixture
def logistic():
    def make(w=1.0, b=0.0, dtype=torch.float64):
        return wrap(LogisticNet(w, b, dtype), 2, (1, 1, 1))

    return make


@pytest.fixture
def constant_model():
    def make(logits, shape=(1, 2, 2), dtype=torch.float32):
        return wrap(ConstantNet(logits, dtype), len(logits), shape)

    return make


@pytest.fixture(scope="session")
def tiny_ds() -> ExampleSet:
    return make_synthetic(600, image_size=8, seed=3)


@pytest.fixture(scope="session")
def tiny_split(tiny_ds):
    return make_membership_splits(tiny_ds, 200, 6, seed=0, n_eval=150)


@pytest.fixture(scope="session")
def tiny_model(tiny_ds, tiny_split):
    cfg = TrainConfig(epochs=60, seed=0, learning_rate=0.05, batch_size=64)
    return train_classifier(tiny_ds, tiny_split, cfg, arch="cnn", arch_kwargs={"width": 8, "hidden": 32})


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_ds, tiny_split):
    from memfab.model_core import train_shadow_ensemble

    cfg = TrainConfig(epochs=60, seed=1, batch_size=64)
    return train_shadow_ensemble(tiny_ds, tiny_split, cfg, 6, arch="cnn", arch_kwargs={"width": 8, "hidden": 32})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
