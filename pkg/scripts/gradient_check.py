"""Finite-difference check of every layer kind and of the full embedder and regressor stacks."""

import numpy as np

from pepr import nn
from pepr.models import build_pepr_model


def layer(kind, d, rng):
    return {
        "dense": lambda: nn.Dense(d, d + 2, rng),
        "elu": lambda: nn.ELU(d),
        "tanh": lambda: nn.Tanh(d),
        "relu": lambda: nn.ReLU(d),
        "leaky-relu": lambda: nn.LeakyReLU(d, 0.1),
        "batch-norm": lambda: nn.BatchNorm(d),
        "dropout": lambda: nn.Dropout(d, 0.3),
        "softmax": lambda: nn.Softmax(d),
    }[kind]()


def main():
    rng = np.random.default_rng(0)
    for kind in ("dense", "elu", "tanh", "relu", "leaky-relu", "batch-norm", "dropout", "softmax"):
        net = nn.Network([layer(kind, 5, rng)])
        x = rng.standard_normal((6, 5))
        x[np.abs(x) < 1e-2] += 0.05  # keep clear of kinks
        err = max(nn.check_network_gradients(net, x, seed=1).values())
        print(f"{kind:12s} {err:.2e}")

    model = build_pepr_model(12, 8, None, 1 / 16, seed=0, dtype="float64")
    for name, net, width in (("embedder", model.embedder, 12), ("regressor", model.regressors[0], 8)):
        x = rng.standard_normal((10, width))
        err = max(nn.check_network_gradients(net, x, seed=2).values())
        print(f"{name:12s} {err:.2e}")


if __name__ == "__main__":
    main()
