"""Embedder, flat/grouped classifier heads and the embedding regressor.

The classifier (embedder + head) and the regressors are trained in the same
loop but through disjoint graphs: the regressor sees detached copies of the
predicted class distribution and of the embedding, so its loss never reaches
classifier parameters. Each part draws from its own RNG stream, which makes
the classifier trajectory bit-identical whatever regressors are attached.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

EMBED_WIDTHS = (512, 512, 256)
REGRESSOR_WIDTHS = (512, 256)


# ---------------------------------------------------------------- grouping


@dataclass(frozen=True)
class GroupScheme:
    """Partition of class indices into groups; each group gets an extra "others" slot."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = sorted(c for g in self.groups for c in g)
        if not self.groups or any(len(g) == 0 for g in self.groups):
            raise ConfigError("every group needs at least one class")
        if flat != list(range(len(flat))):
            raise ConfigError("groups must cover classes 0..C-1 exactly once")
        group_of = np.empty(len(flat), dtype=np.int64)
        slot_of = np.empty(len(flat), dtype=np.int64)
        for gi, g in enumerate(self.groups):
            for si, c in enumerate(g):
                group_of[c] = gi
                slot_of[c] = si
        sizes = np.array([len(g) for g in self.groups])
        offsets = np.concatenate([[0], np.cumsum(sizes + 1)[:-1]])
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "slot_of", slot_of)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "class_columns", offsets[group_of] + slot_of)
        object.__setattr__(self, "others_columns", offsets + sizes)

    @classmethod
    def contiguous(cls, n_classes: int, n_groups: int | None = None) -> "GroupScheme":
        """Even contiguous split; the remainder goes one class each to the first groups."""
        if n_groups is None:
            n_groups = default_group_count(n_classes)
        if not 1 <= n_groups <= n_classes:
            raise ConfigError(f"cannot split {n_classes} classes into {n_groups} groups")
        base, extra = divmod(n_classes, n_groups)
        groups, start = [], 0
        for g in range(n_groups):
            size = base + (g < extra)
            groups.append(tuple(range(start, start + size)))
            start += size
        return cls(tuple(groups))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_classes(self) -> int:
        return len(self.group_of)

    @property
    def width(self) -> int:
        return int((self.sizes + 1).sum())

    def slots(self, g: int) -> slice:
        return slice(int(self.offsets[g]), int(self.offsets[g] + self.sizes[g] + 1))

    def to_dict(self) -> dict:
        return {"groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupScheme":
        return cls(tuple(tuple(g) for g in d["groups"]))


def default_group_count(n_classes: int) -> int:
    return max(1, round(n_classes / 8))


def _check_width(logits, scheme: GroupScheme):
    if logits.ndim != 2 or logits.shape[1] != scheme.width:
        raise ConfigError(
            f"logit width {logits.shape[-1]} does not match group scheme width {scheme.width}")


def grouped_softmax(logits, scheme: GroupScheme):
    """Independent softmax per group, concatenated back in column order."""
    logits = np.asarray(logits)
    _check_width(logits, scheme)
    out = np.empty_like(logits)
    for g in range(scheme.n_groups):
        s = scheme.slots(g)
        out[:, s] = nn.softmax(logits[:, s])
    return out


def grouped_targets(targets, scheme: GroupScheme):
    """(batch, G) within-group target slot; non-owning groups point at "others"."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= scheme.n_classes):
        raise ConfigError(f"class index outside the scheme's {scheme.n_classes} classes")
    t = np.broadcast_to(scheme.sizes, (len(targets), scheme.n_groups)).copy()
    t[np.arange(len(targets)), scheme.group_of[targets]] = scheme.slot_of[targets]
    return t


def grouped_loss(logits, targets, scheme: GroupScheme):
    """Sum over groups of per-group cross-entropy, averaged over the batch."""
    logits = np.asarray(logits)
    _check_width(logits, scheme)
    t = grouped_targets(targets, scheme)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = 0.0
    grad = np.empty_like(logits)
    for g in range(scheme.n_groups):
        s = scheme.slots(g)
        logp = nn.log_softmax(logits[:, s])
        loss -= logp[rows, t[:, g]].sum()
        p = np.exp(logp)
        p[rows, t[:, g]] -= 1.0
        grad[:, s] = p
    return float(loss) / n, grad / n


def grouped_predict(probs, scheme: GroupScheme):
    """Class with the highest non-"others" probability across all groups."""
    return np.argmax(np.asarray(probs)[:, scheme.class_columns], axis=1)


# ---------------------------------------------------------------- architectures


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 1000
    batch_size: int = 512
    lr: float = 3e-4
    gamma_anc: float = 0.03
    seed: int = 0
    head: str = "grouped"  # or "flat"
    n_groups: int | None = None
    width_factor: float = 1.0
    dropout: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    bn_eps: float = nn.BN_EPS
    bn_momentum: float = nn.BN_MOMENTUM
    dtype: str = "float32"

    def __post_init__(self):
        if self.head not in ("flat", "grouped"):
            raise ConfigError(f"head must be 'flat' or 'grouped', got {self.head!r}")
        if self.width_factor <= 0:
            raise ConfigError("width_factor must be positive")
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _scaled(width: int, factor: float) -> int:
    return max(1, int(round(width * factor)))


def build_embedder(input_dim: int, width_factor: float = 1.0, rng=None, dtype=np.float32,
                   dropout: float = 0.1, bn_eps: float = nn.BN_EPS,
                   bn_momentum: float = nn.BN_MOMENTUM) -> nn.Network:
    """[dense+elu, batch-norm, dropout] x2, then dense+elu, batch-norm."""
    rng = np.random.default_rng() if rng is None else rng
    w1, w2, n = (_scaled(w, width_factor) for w in EMBED_WIDTHS)
    layers = []
    prev = input_dim
    for i, width in enumerate((w1, w2, n)):
        layers += [nn.Dense(prev, width, rng, dtype), nn.ELU(width),
                   nn.BatchNorm(width, bn_eps, bn_momentum, dtype)]
        if i < 2:
            layers.append(nn.Dropout(width, dropout))
        prev = width
    return nn.Network(layers, dtype=dtype)


def build_regressor(input_dim: int, embed_dim: int, width_factor: float = 1.0,
                    seed=None, dtype=np.float32) -> nn.Network:
    """dense+tanh, dense+tanh, dense, leaky-relu(0.1); anchors set to the initial weights."""
    rng = np.random.default_rng(seed)
    h1, h2 = (_scaled(w, width_factor) for w in REGRESSOR_WIDTHS)
    layers = [
        nn.Dense(input_dim, h1, rng, dtype), nn.Tanh(h1),
        nn.Dense(h1, h2, rng, dtype), nn.Tanh(h2),
        nn.Dense(h2, embed_dim, rng, dtype), nn.LeakyReLU(embed_dim, nn.LEAKY_SLOPE),
    ]
    net = nn.Network(layers, dtype=dtype, seed=None if seed is None else _seed_json(seed))
    net.snapshot_anchors()
    return net


def _seed_json(seed):
    return list(seed) if isinstance(seed, (list, tuple)) else int(seed)


@dataclass
class PeprModel:
    embedder: nn.Network
    head: nn.Network
    scheme: GroupScheme | None = None
    regressors: list[nn.Network] = field(default_factory=list)

    @property
    def variant(self) -> str:
        return "flat" if self.scheme is None else "grouped"

    @property
    def embed_dim(self) -> int:
        return self.embedder.out_dim

    @property
    def n_classes(self) -> int:
        return self.scheme.n_classes if self.scheme else self.head.out_dim

    @property
    def yhat_width(self) -> int:
        return self.head.out_dim

    def probs(self, logits):
        if self.scheme is None:
            return nn.softmax(logits)
        return grouped_softmax(logits, self.scheme)

    def predict_class(self, probs):
        if self.scheme is None:
            return np.argmax(probs, axis=1)
        return grouped_predict(probs, self.scheme)


def build_pepr_model(input_dim: int, n_classes: int, scheme: GroupScheme | None = None,
                     width_factor: float = 1.0, seed=0, n_regressors: int = 1,
                     member_seeds=None, dtype=np.float32, dropout: float = 0.1,
                     bn_eps: float = nn.BN_EPS, bn_momentum: float = nn.BN_MOMENTUM) -> PeprModel:
    """Embedder, head (flat if ``scheme`` is None) and ``n_regressors`` anchored regressors."""
    if width_factor <= 0:
        raise ConfigError("width_factor must be positive")
    if scheme is not None and scheme.n_classes != n_classes:
        raise ConfigError(f"scheme covers {scheme.n_classes} classes, expected {n_classes}")
    rng = np.random.default_rng([seed, 0])
    embedder = build_embedder(input_dim, width_factor, rng, dtype, dropout, bn_eps, bn_momentum)
    head_width = n_classes if scheme is None else scheme.width
    head = nn.Network([nn.Dense(embedder.out_dim, head_width, rng, dtype)], dtype=dtype)
    if member_seeds is None:
        member_seeds = [[seed, 2, j] for j in range(n_regressors)]
    regressors = [build_regressor(head_width, embedder.out_dim, width_factor, s, dtype)
                  for s in member_seeds]
    return PeprModel(embedder, head, scheme, regressors)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: PeprModel
    log: list[dict]
    config: TrainConfig


def _classifier_params(model: PeprModel):
    params = {f"emb/{k}": v for k, v in model.embedder.parameters().items()}
    params.update({f"head/{k}": v for k, v in model.head.parameters().items()})
    grads = {f"emb/{k}": v for k, v in model.embedder.gradients().items()}
    grads.update({f"head/{k}": v for k, v in model.head.gradients().items()})
    return params, grads


def validation_accuracy(model: PeprModel, x, y, chunk: int = 4096) -> float:
    _, probs, _ = embed_and_classify(x, model, chunk=chunk)
    return float(np.mean(model.predict_class(probs) == np.asarray(y)))


def train_pepr(x, y, config: TrainConfig, val=None, n_regressors: int = 1,
               member_seeds=None, scheme: GroupScheme | None = None) -> TrainResult:
    """Jointly train classifier and regressors on labelled in-distribution features.

    Per step: (1) embedder+head forward in train mode, classification loss,
    Adam update; (2) every regressor fits the detached embedding from the same
    forward pass given the detached class distribution, under the anchored loss.
    ``n_regressors=0`` trains the classifier alone.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise DataError(f"{len(x)} feature rows but {len(y)} labels")
    if len(y) == 0:
        raise DataError("empty training set")
    if (y < 0).any():
        raise DataError("OOD rows (label -1) must never reach training")
    n_classes = int(y.max()) + 1
    if config.head == "grouped" and scheme is None:
        scheme = GroupScheme.contiguous(n_classes, config.n_groups)
    if config.head == "flat":
        scheme = None
    if scheme is not None:
        n_classes = scheme.n_classes
    dtype = np.dtype(config.dtype)
    model = build_pepr_model(x.shape[1], n_classes, scheme, config.width_factor, config.seed,
                             n_regressors, member_seeds, dtype, config.dropout,
                             config.bn_eps, config.bn_momentum)
    adam_kw = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    cls_opt = nn.Adam(config.lr, **adam_kw)
    reg_opts = [nn.Adam(config.lr, **adam_kw) for _ in model.regressors]
    stream = np.random.default_rng([config.seed, 1])
    batch = min(config.batch_size, len(x))
    history = []

    for epoch in range(1, config.epochs + 1):
        lr = nn.lr_schedule(epoch, config.lr, config.epochs)
        cls_losses, reg_losses = [], []
        for step in range(config.steps_per_epoch):
            idx = stream.choice(len(x), size=batch, replace=False)
            xb, yb = x[idx], y[idx]
            z = model.embedder.forward(xb, train=True, rng=stream)
            logits = model.head.forward(z, train=True)
            if scheme is None:
                loss, g = nn.softmax_cross_entropy(logits, yb)
            else:
                loss, g = grouped_loss(logits, yb, scheme)
            if not math.isfinite(loss):
                raise NumericError(
                    f"classification loss is {loss} at epoch {epoch}, step {step + 1}")
            model.embedder.backward(model.head.backward(g))
            cls_opt.step(*_classifier_params(model), lr=lr)
            cls_losses.append(loss)

            if not model.regressors:
                continue
            # the regressor graph starts here: detached inputs and targets
            yhat = model.probs(logits).copy()
            target = z.copy()
            step_losses = []
            for reg, opt in zip(model.regressors, reg_opts):
                zhat = reg.forward(yhat, train=True)
                rloss, gz, anchor_grads = nn.anchored_mse_loss(
                    target, zhat, reg.parameters(), reg.anchors, config.gamma_anc)
                if not math.isfinite(rloss):
                    raise NumericError(
                        f"regression loss is {rloss} at epoch {epoch}, step {step + 1}")
                reg.backward(gz)
                grads = {k: g_ + anchor_grads[k] for k, g_ in reg.gradients().items()}
                opt.step(reg.parameters(), grads, lr=lr)
                step_losses.append(rloss)
            reg_losses.append(float(np.mean(step_losses)))

        row = {
            "epoch": epoch,
            "classification_loss": float(np.mean(cls_losses)) if cls_losses else float("nan"),
            "regression_loss": float(np.mean(reg_losses)) if reg_losses else float("nan"),
            "learning_rate": lr,
            "validation_accuracy": float("nan"),
        }
        if val is not None:
            row["validation_accuracy"] = validation_accuracy(model, *val)
        log.debug("epoch %d: %s", epoch, row)
        history.append(row)
    return TrainResult(model, history, config)


def train_ensemble(x, y, config: TrainConfig, m: int, val=None, member_seeds=None,
                   scheme: GroupScheme | None = None) -> TrainResult:
    """One classifier, ``m`` independently seeded regressors on the same (yhat, z) stream."""
    if m < 1:
        raise ConfigError("an ensemble needs at least one regressor")
    if member_seeds is not None and len(member_seeds) != m:
        raise ConfigError(f"{len(member_seeds)} member seeds for {m} regressors")
    return train_pepr(x, y, config, val, n_regressors=m, member_seeds=member_seeds,
                      scheme=scheme)


def embed_and_classify(x, model: PeprModel, chunk: int = 4096):
    """Eval-mode ``(z, yhat, logits)`` for a batch of features."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.embedder.in_dim:
        raise ConfigError(
            f"features of shape {x.shape} do not match embedder input {model.embedder.in_dim}")
    zs, ls = [], []
    for start in range(0, max(len(x), 1), chunk):
        z = model.embedder.forward(x[start:start + chunk])
        zs.append(z)
        ls.append(model.head.forward(z))
    z = np.concatenate(zs)
    logits = np.concatenate(ls)
    return z, model.probs(logits), logits


# ---------------------------------------------------------------- persistence


def save_model(path, model: PeprModel, config: TrainConfig | None = None, extra: dict | None = None):
    nets = {"embedder": model.embedder, "head": model.head}
    for j, reg in enumerate(model.regressors):
        nets[f"regressor_{j:03d}"] = reg
    meta = {
        "variant": model.variant,
        "scheme": model.scheme.to_dict() if model.scheme else None,
        "config": dataclasses.asdict(config) if config else None,
        "n_regressors": len(model.regressors),
        **(extra or {}),
    }
    nn.save_networks(path, nets, meta)


def load_model(path) -> tuple[PeprModel, TrainConfig | None, dict]:
    nets, meta = nn.load_networks(path)
    scheme = GroupScheme.from_dict(meta["scheme"]) if meta.get("scheme") else None
    regs = [nets[k] for k in sorted(nets) if k.startswith("regressor_")]
    config = TrainConfig(**meta["config"]) if meta.get("config") else None
    return PeprModel(nets["embedder"], nets["head"], scheme, regs), config, meta
