"""A small numpy feedforward engine: sequential layers, losses, Adam and gradient checks.

Everything is row-major ``(batch, features)``. Networks own their parameters and
hold the intermediates of the last train-mode forward pass so that ``backward``
can be called right after it. Eval-mode forwards are pure.
"""

from __future__ import annotations

import io
import json
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, NumericError, UsageError

FORMAT_VERSION = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
ELU_ALPHA = 1.0
LEAKY_SLOPE = 0.1


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self, in_dim: int, out_dim: int | None = None):
        self.in_dim = int(in_dim)
        self.out_dim = int(in_dim if out_dim is None else out_dim)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}: backward called without a train-mode forward")
        return self._cache

    def config(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k, v in store.items():
                store[k] = v.astype(dtype)
        return self


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"dense dims must be positive, got {in_dim}->{out_dim}")
        super().__init__(in_dim, out_dim)
        rng = np.random.default_rng() if rng is None else rng
        # Glorot uniform, zero bias
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.params["W"] = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class ELU(Layer):
    kind = "elu"

    def forward(self, x, train=False, rng=None):
        neg = np.expm1(np.minimum(x, 0.0)) * ELU_ALPHA
        out = np.where(x > 0, x, neg)
        if train:
            self._cache = (x, out)
        return out

    def backward(self, grad):
        x, out = self._cached()
        return grad * np.where(x > 0, 1.0, out + ELU_ALPHA)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train=False, rng=None):
        out = np.tanh(x)
        if train:
            self._cache = out
        return out

    def backward(self, grad):
        out = self._cached()
        return grad * (1.0 - out * out)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * (self._cached() > 0)


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, in_dim: int, slope: float = LEAKY_SLOPE):
        if not 0.0 < slope < 1.0:
            raise ConfigError(f"leaky-relu slope must lie in (0, 1), got {slope}")
        super().__init__(in_dim)
        self.slope = float(slope)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return np.where(x > 0, x, self.slope * x)

    def backward(self, grad):
        return grad * np.where(self._cached() > 0, 1.0, self.slope)

    def config(self):
        return {**super().config(), "slope": self.slope}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        out = softmax(x)
        if train:
            self._cache = out
        return out

    def backward(self, grad):
        p = self._cached()
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: identity in eval mode."""

    kind = "dropout"

    def __init__(self, in_dim: int, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        super().__init__(in_dim)
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            if train:
                self._cache = None
                self._passthrough = True
            return x
        if rng is None:
            raise UsageError("dropout needs an rng in train mode")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        self._cache = mask
        self._passthrough = False
        return x * mask

    def backward(self, grad):
        if getattr(self, "_passthrough", False):
            return grad
        return grad * self._cached()

    def config(self):
        return {**super().config(), "rate": self.rate}


class BatchNorm(Layer):
    kind = "batch-norm"

    def __init__(self, in_dim: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 dtype=np.float64):
        super().__init__(in_dim)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params["gamma"] = np.ones(in_dim, dtype=dtype)
        self.params["beta"] = np.zeros(in_dim, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(in_dim, dtype=dtype)
        self.buffers["running_var"] = np.ones(in_dim, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        g, b = self.params["gamma"], self.params["beta"]
        if not train:
            m, v = self.buffers["running_mean"], self.buffers["running_var"]
            return (x - m) / np.sqrt(v + self.eps) * g + b
        if x.shape[0] < 2:
            raise ConfigError("batch-norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        mom = self.momentum
        self.buffers["running_mean"] = mom * self.buffers["running_mean"] + (1 - mom) * mean
        self.buffers["running_var"] = mom * self.buffers["running_var"] + (1 - mom) * var
        self._cache = (xhat, inv_std)
        return xhat * g + b

    def backward(self, grad):
        xhat, inv_std = self._cached()
        n = grad.shape[0]
        self.grads["gamma"] = (grad * xhat).sum(axis=0)
        self.grads["beta"] = grad.sum(axis=0)
        dxhat = grad * self.params["gamma"]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def config(self):
        return {**super().config(), "eps": self.eps, "momentum": self.momentum}


_ACTIVATIONS = {"elu": ELU, "tanh": Tanh, "relu": ReLU, "softmax": Softmax}


def layer_from_config(cfg: dict, dtype=np.float64) -> Layer:
    kind = cfg["kind"]
    if kind == "dense":
        return Dense(cfg["in_dim"], cfg["out_dim"], rng=np.random.default_rng(0), dtype=dtype)
    if kind == "batch-norm":
        return BatchNorm(cfg["in_dim"], eps=cfg["eps"], momentum=cfg["momentum"], dtype=dtype)
    if kind == "dropout":
        return Dropout(cfg["in_dim"], cfg["rate"])
    if kind == "leaky-relu":
        return LeakyReLU(cfg["in_dim"], cfg["slope"])
    if kind in _ACTIVATIONS:
        return _ACTIVATIONS[kind](cfg["in_dim"])
    raise ConfigError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------- network


class Network:
    """Sequential stack of layers.

    ``trainable=False`` freezes the stack: ``backward`` still propagates the
    input gradient but leaves no parameter gradients behind.
    """

    def __init__(self, layers: Iterable[Layer] = (), in_dim: int | None = None,
                 dtype=np.float64, trainable: bool = True, seed: int | None = None):
        self.layers = list(layers)
        if in_dim is None:
            if not self.layers:
                raise ConfigError("an empty network needs an explicit in_dim")
            in_dim = self.layers[0].in_dim
        self.in_dim = int(in_dim)
        self.dtype = np.dtype(dtype)
        self.trainable = trainable
        self.seed = seed
        self.anchors: dict[str, np.ndarray] | None = None
        width = self.in_dim
        for layer in self.layers:
            if layer.in_dim != width:
                raise ConfigError(
                    f"{layer.kind} expects {layer.in_dim} inputs but receives {width}")
            width = layer.out_dim
            layer.astype(self.dtype)
        self.out_dim = width
        self._has_cache = False

    def __repr__(self):
        dims = [self.in_dim] + [l.out_dim for l in self.layers if l.kind == "dense"]
        return f"Network({'->'.join(map(str, dims))}, {len(self.layers)} layers)"

    @property
    def dense_widths(self) -> list[int]:
        return [self.in_dim] + [l.out_dim for l in self.layers if l.kind == "dense"]

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(f"input of shape {x.shape} does not match in_dim {self.in_dim}")
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        if not np.isfinite(x).all():
            raise NumericError("non-finite values in network output")
        self._has_cache = train
        return x

    __call__ = forward

    def backward(self, grad):
        if not self._has_cache:
            raise UsageError("backward called without a train-mode forward")
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if not self.trainable:
                layer.grads.clear()
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.buffers.items()}

    def set_array(self, key: str, value: np.ndarray):
        idx, name = key.split(".", 1)
        layer = self.layers[int(idx)]
        store = layer.params if name in layer.params else layer.buffers
        store[name] = np.asarray(value, dtype=self.dtype).copy()

    def snapshot_anchors(self):
        """Freeze a copy of the current parameters as the anchor point."""
        anchors = {}
        for k, v in self.parameters().items():
            a = v.copy()
            a.flags.writeable = False
            anchors[k] = a
        self.anchors = anchors

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def config(self) -> list[dict]:
        return [l.config() for l in self.layers]


# ---------------------------------------------------------------- losses


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ConfigError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ConfigError(f"target index out of range [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return float(loss), grad / n


def anchored_mse_loss(z, z_hat, params: dict, anchors: dict | None, gamma: float,
                      data_weight: float = 1.0):
    """Squared error plus an L2 pull toward the anchor parameters.

    ``loss = |z - z_hat|^2 / N + |gamma * (theta - theta_anc)|^2 / N`` with N the
    batch size. Returns ``(loss, d loss / d z_hat, {key: d loss / d theta})``.
    """
    if anchors is None:
        raise ConfigError("anchored loss needs anchors; call snapshot_anchors() first")
    z = np.asarray(z)
    z_hat = np.asarray(z_hat)
    if z.shape != z_hat.shape:
        raise ConfigError(f"target shape {z.shape} != prediction shape {z_hat.shape}")
    n = z.shape[0]
    diff = z_hat - z
    loss = data_weight * float((diff * diff).sum()) / n
    grad_zhat = (2.0 * data_weight / n) * diff
    g2 = gamma * gamma
    param_grads = {}
    for key, theta in params.items():
        d = theta - anchors[key]
        loss += g2 * float((d * d).sum()) / n
        param_grads[key] = (2.0 * g2 / n) * d
    return loss, grad_zhat, param_grads


# ---------------------------------------------------------------- optimisation


def adam_update(theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One bias-corrected Adam step. Returns new (theta, m, v); inputs untouched."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-7):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None):
        """Update ``params`` in place. Parameters without a gradient are skipped."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, theta in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != theta.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
            if key not in self.m:
                self.m[key] = np.zeros_like(theta)
                self.v[key] = np.zeros_like(theta)
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            theta -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(theta.dtype)


def lr_schedule(epoch: int, base: float, epochs: int = 10, decay: float = 0.4) -> float:
    """Constant step size, cut by ``decay`` at each of the last two epochs."""
    if epoch < 1:
        raise ConfigError(f"epochs are numbered from 1, got {epoch}")
    drops = min(2, max(0, epoch - (epochs - 2)))
    return base * (1.0 - decay) ** drops


# ---------------------------------------------------------------- gradient checking


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5):
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_network_gradients(net: Network, x: np.ndarray, seed: int = 0,
                            step: float = 1e-5) -> dict[str, float]:
    """Compare analytic and central-difference gradients of a random projection
    of the train-mode output. Keys are parameter names plus ``"input"``."""
    if net.dtype != np.float64:
        raise ConfigError("gradient checks need a float64 network")
    x = np.array(x, dtype=np.float64)
    proj = np.random.default_rng(seed + 1).standard_normal((x.shape[0], net.out_dim))

    def loss():
        # same dropout mask on every evaluation
        return float((net.forward(x, train=True, rng=np.random.default_rng(seed)) * proj).sum())

    loss()
    dx = net.backward(proj)
    analytic = {k: v.copy() for k, v in net.gradients().items()}
    errors = {"input": relative_error(dx, numerical_gradient(loss, x, step))}
    for key, theta in net.parameters().items():
        errors[key] = relative_error(analytic[key], numerical_gradient(loss, theta, step))
    return errors


# ---------------------------------------------------------------- checkpoints


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False)


def save_networks(path, networks: dict[str, Network], meta: dict | None = None):
    """Write networks (specs, parameters, running stats, anchors) to one ``.npz``."""
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "networks": {}}
    arrays = {}
    for name, net in networks.items():
        header["networks"][name] = {
            "in_dim": net.in_dim,
            "dtype": net.dtype.str.lstrip("<>|="),
            "trainable": net.trainable,
            "seed": net.seed,
            "layers": net.config(),
            "anchored": net.anchors is not None,
        }
        for k, v in net.parameters().items():
            arrays[f"{name}/param/{k}"] = _le(v)
        for k, v in net.buffers().items():
            arrays[f"{name}/buffer/{k}"] = _le(v)
        if net.anchors is not None:
            for k, v in net.anchors.items():
                arrays[f"{name}/anchor/{k}"] = _le(v)
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_networks(path) -> tuple[dict[str, Network], dict]:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('format_version')}")
        nets = {}
        for name, info in header["networks"].items():
            dtype = np.dtype(info["dtype"])
            layers = [layer_from_config(c, dtype) for c in info["layers"]]
            net = Network(layers, in_dim=info["in_dim"], dtype=dtype,
                          trainable=info["trainable"], seed=info["seed"])
            for kind in ("param", "buffer"):
                prefix = f"{name}/{kind}/"
                for key in npz.files:
                    if key.startswith(prefix):
                        net.set_array(key[len(prefix):], npz[key])
            if info["anchored"]:
                prefix = f"{name}/anchor/"
                anchors = {}
                for key in npz.files:
                    if key.startswith(prefix):
                        a = npz[key].astype(dtype)
                        a.flags.writeable = False
                        anchors[key[len(prefix):]] = a
                net.anchors = anchors
            nets[name] = net
    return nets, header["meta"]
