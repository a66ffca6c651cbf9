import numpy as np
import pytest

from pepr import nn


def away_from_kinks(x, margin=1e-2):
    """Push entries away from 0 so finite differences never straddle a kink."""
    x = np.array(x, dtype=np.float64)
    small = np.abs(x) < margin
    x[small] = np.where(x[small] >= 0, 1, -1) * (margin + np.abs(x[small]))
    return x


def single_layer(kind, dim_in, dim_out, rng):
    if kind == "dense":
        layer = nn.Dense(dim_in, dim_out, rng)
        layer.params["b"] = rng.standard_normal(dim_out)
        return layer
    if kind == "batch-norm":
        layer = nn.BatchNorm(dim_in)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, dim_in)
        layer.params["beta"] = rng.standard_normal(dim_in)
        return layer
    if kind == "dropout":
        return nn.Dropout(dim_in, 0.3)
    if kind == "leaky-relu":
        return nn.LeakyReLU(dim_in, 0.1)
    return {"elu": nn.ELU, "tanh": nn.Tanh, "relu": nn.ReLU, "softmax": nn.Softmax}[kind](dim_in)


LAYER_KINDS = ["dense", "elu", "tanh", "relu", "leaky-relu", "batch-norm", "dropout", "softmax"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k.split()[0])):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
