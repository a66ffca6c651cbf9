"""In-distribution scores S(x). Every score is oriented so that higher means
"more in-distribution"; KLM and MOS are negated to fit that convention."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .models import GroupScheme, PeprModel

log = logging.getLogger(__name__)

PSI = 0.01
KL_FLOOR = 1e-12


def _pos_mean_square(values):
    r = np.maximum(values, 0.0)
    return (r * r).mean(axis=1)


def regress(yhat, regressor):
    yhat = np.asarray(yhat)
    if yhat.ndim != 2 or yhat.shape[1] != regressor.in_dim:
        raise ConfigError(
            f"class distribution width {yhat.shape[-1]} != regressor input {regressor.in_dim}")
    return regressor.forward(yhat)


def score_pepr(yhat, regressor):
    """Mean squared positive part of the predicted embedding."""
    return _pos_mean_square(regress(yhat, regressor)).astype(np.float64)


def score_epow(z, psi: float = PSI):
    z = np.asarray(z, dtype=np.float64)
    return psi * (z * z).mean(axis=1)


def score_cpepr(yhat, z, regressor, psi: float = PSI):
    return score_pepr(yhat, regressor) + score_epow(z, psi)


def score_msp(probs, tol: float = 1e-4):
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > tol):
        raise ConfigError("MSP expects rows on the probability simplex (flat head output)")
    return probs.max(axis=1)


def score_max_logit(logits):
    return np.asarray(logits, dtype=np.float64).max(axis=1)


@dataclass
class KlmTemplates:
    classes: np.ndarray    # (K,) class ids with at least one training example
    templates: np.ndarray  # (K, C) mean predicted distribution per class
    eps: float = KL_FLOOR


def fit_klm_templates(probs, labels, n_classes: int | None = None) -> KlmTemplates:
    """Per-class mean predicted distribution over labelled training examples."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if (labels < 0).any():
        raise DataError("OOD rows (label -1) must never reach template fitting")
    n_classes = probs.shape[1] if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.zeros((n_classes, probs.shape[1]))
    np.add.at(sums, labels, probs)
    present = np.flatnonzero(counts)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        log.warning("KLM: no training examples for classes %s; templates omitted", missing.tolist())
    return KlmTemplates(present, sums[present] / counts[present, None])


class KlmCounter:
    """Tally of template comparisons performed by :func:`score_klm`."""

    def __init__(self):
        self.comparisons = 0


def kl_divergence(p, q, eps: float = KL_FLOOR):
    """KL(p || q) along the last axis with probabilities floored at ``eps``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return (p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(q, eps)))).sum(axis=-1)


def score_klm(probs, templates: KlmTemplates, counter: KlmCounter | None = None,
              chunk: int = 64):
    """Negated minimum over templates of KL(yhat || template)."""
    probs = np.asarray(probs, dtype=np.float64)
    eps = templates.eps
    log_p = np.log(np.maximum(probs, eps))
    log_t = np.log(np.maximum(templates.templates, eps))
    out = np.empty(len(probs))
    for start in range(0, len(probs), chunk):
        p = probs[start:start + chunk, None, :]
        # termwise so that yhat == template gives exactly 0
        kl = (p * (log_p[start:start + chunk, None, :] - log_t[None])).sum(axis=2)
        out[start:start + chunk] = kl.min(axis=1)
        if counter is not None:
            counter.comparisons += kl.size
    return -out


def score_mos(probs, scheme: GroupScheme | None):
    """Negated lowest "others" probability across groups."""
    if scheme is None:
        raise ConfigError("MOS needs a grouped head")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[1] != scheme.width:
        raise ConfigError(f"width {probs.shape[1]} does not match the group scheme ({scheme.width})")
    return -probs[:, scheme.others_columns].min(axis=1)


def ensemble_score(members):
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise ConfigError("ensemble needs at least one member")
    if len({m.shape for m in members}) != 1:
        raise ConfigError("ensemble members have different lengths")
    return np.mean(members, axis=0)


def threshold_detector(scores, threshold: float):
    """1 ("in") where score >= threshold, else 0 ("out")."""
    return (np.asarray(scores) >= threshold).astype(np.int8)


# ---------------------------------------------------------------- method registry

BASE_METHODS = ("MSP", "MLGT", "KLM", "MOS", "EPOW", "PEPR", "CPEPR")
ENSEMBLE_BASES = ("PEPR", "CPEPR", "MOS")
FLAT_METHODS = ("MSP", "MLGT", "KLM")


@dataclass(frozen=True)
class Method:
    base: str
    members: int = 1

    @property
    def name(self) -> str:
        return self.base if self.members == 1 else f"{self.base}-{self.members}"

    @property
    def variant(self) -> str:
        return "flat" if self.base in FLAT_METHODS else "grouped"


def parse_method(name: str) -> Method:
    text = name.strip().upper().replace("C-PEPR", "CPEPR")
    base, _, count = text.partition("-")
    if base not in BASE_METHODS:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(BASE_METHODS)}")
    if not count:
        return Method(base)
    if base not in ENSEMBLE_BASES:
        raise ConfigError(f"{base} has no ensemble variant")
    try:
        members = int(count)
    except ValueError:
        raise ConfigError(f"bad ensemble size in {name!r}") from None
    if members < 1:
        raise ConfigError(f"bad ensemble size in {name!r}")
    return Method(base, members)


def score_method(method: Method, outputs: dict, psi: float = PSI, klm_counter=None):
    """Score one method from precomputed model outputs.

    ``outputs`` holds the eval-mode tensors of the relevant trained model(s):
    ``flat`` -> dict(probs, logits, templates); ``grouped`` -> dict(z, probs,
    model); ``mos_members`` -> list of grouped probs for MOS ensembles.
    """
    b = method.base
    if b == "MSP":
        return score_msp(outputs["flat"]["probs"])
    if b == "MLGT":
        return score_max_logit(outputs["flat"]["logits"])
    if b == "KLM":
        f = outputs["flat"]
        return score_klm(f["probs"], f["templates"], klm_counter)
    g = outputs["grouped"]
    model: PeprModel = g["model"]
    if b == "MOS":
        members = outputs.get("mos_members") or [g["probs"]]
        if len(members) < method.members:
            raise ConfigError(f"{method.name} needs {method.members} classifiers, have {len(members)}")
        return ensemble_score([score_mos(p, model.scheme) for p in members[:method.members]])
    if b == "EPOW":
        return score_epow(g["z"], psi)
    if len(model.regressors) < method.members:
        raise ConfigError(
            f"{method.name} needs {method.members} regressors, model has {len(model.regressors)}")
    pepr = ensemble_score([score_pepr(g["probs"], r) for r in model.regressors[:method.members]])
    if b == "PEPR":
        return pepr
    return pepr + score_epow(g["z"], psi)
