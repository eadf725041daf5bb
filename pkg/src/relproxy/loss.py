"""Relational proxy objective, inference rule and the baseline objectives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import RepTriple
from .tensor import Tensor

log = logging.getLogger(__name__)

OMEGA = ("z_g", "z_L", "r")
ABLATION_VARIANTS = ("ce_head", "huber_relation", "pairwise_contrastive")
HUBER_THRESHOLD = 1.0
CONTRASTIVE_MARGIN = 0.5


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 32.0
    delta: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise LossError(f"alpha must be finite and positive, got {self.alpha}")
        if not 0 <= self.delta < 1:
            raise LossError(f"delta must lie in [0, 1), got {self.delta}")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _as_batch(x: Tensor) -> Tensor:
    return T.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def similarities(reps: RepTriple, proxies: Tensor, use=OMEGA) -> Tensor:
    """Cosine similarities of shape (B, len(use), c); reps may be batched or single."""
    P = T.l2_normalize(proxies)
    cols = [_as_batch(getattr(reps, name)) for name in use]
    B = cols[0].shape[0]
    W = T.l2_normalize(T.stack(cols, axis=1))                # (B, n, d)
    return T.reshape(T.reshape(W, (B * len(use), -1)) @ T.transpose(P), (B, len(use), P.shape[0]))


def _check_finite(S: Tensor) -> None:
    bad = ~np.isfinite(S.data).all(axis=(1, 2))
    if bad.any():
        raise T.NonFiniteError(f"non-finite similarity for batch instance {int(np.argmax(bad))}")


def rproxy_loss(reps: RepTriple, labels, proxies: Tensor, cfg: LossConfig = LossConfig(),
                use=OMEGA) -> Tensor:
    """Mean over proxies of log psi+ + log psi-.

    psi+(p) = 1 + sum over positives of exp(-alpha (s - delta)) and
    psi-(p) = 1 + sum over negatives of exp(alpha (s + delta)); every instance
    contributes one omega per representation named in ``use``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    c = proxies.shape[0]
    if labels.size == 0:
        raise LossError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise LossError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    S = similarities(reps, proxies, use)
    _check_finite(S)
    if S.shape[0] != labels.size:
        raise LossError(f"{S.shape[0]} representations for {labels.size} labels")
    pos = np.zeros(S.shape)
    pos[np.arange(labels.size), :, labels] = 1.0
    pos_term = T.exp(T.scale(T._shift(S, -cfg.delta), -cfg.alpha)) * Tensor(pos)
    neg_term = T.exp(T.scale(T._shift(S, cfg.delta), cfg.alpha)) * Tensor(1.0 - pos)
    psi_pos = T._shift(T.sum(pos_term, axis=(0, 1)), 1.0)
    psi_neg = T._shift(T.sum(neg_term, axis=(0, 1)), 1.0)
    return T.mean(T.log(psi_pos) + T.log(psi_neg))


def inference_scores(reps: RepTriple, proxies, use=OMEGA) -> np.ndarray:
    """Sum over omega of the softmax of cosine similarities to all proxies.

    Rows sum to ``len(use)``; divide by it for a distribution.
    """
    P = proxies if isinstance(proxies, Tensor) else Tensor(proxies)
    if np.any(np.linalg.norm(P.data, axis=1) == 0):
        raise ZeroDivisionError("zero proxy row")
    with T.no_grad():
        S = similarities(reps, P, use).data
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    scores = (e / e.sum(axis=-1, keepdims=True)).sum(axis=1)
    single = getattr(reps, use[0]).ndim == 1
    return scores[0] if single else scores


def predict(reps: RepTriple, proxies, use=OMEGA) -> np.ndarray:
    return np.argmax(inference_scores(reps, proxies, use), axis=-1)


# ------------------------------------------------------------ baselines

def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logits = _as_batch(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return T.scale(T.sum(T.log_softmax(logits) * Tensor(onehot)), -1.0 / labels.size)


def _pairs(labels: np.ndarray, same: bool | None):
    n = labels.size
    i, j = np.triu_indices(n, k=1)
    if same is None:
        return i, j
    keep = (labels[i] == labels[j]) == same
    return i[keep], j[keep]


def _row_norm(x: Tensor, eps: float = 0.0) -> Tensor:
    return T.sqrt(T._shift(T.sum(x * x, axis=-1), eps))


def huber_relation_term(reps: RepTriple, labels) -> Tensor:
    """Huber penalty on differences of the global-to-summary distance within classes."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    i, j = _pairs(labels, same=True)
    if i.size == 0:
        log.info("huber_relation: no same-class pair in batch, term is 0")
        return Tensor(0.0)
    dist = _row_norm(_as_batch(reps.z_g) - _as_batch(reps.z_L))
    return T.mean(T.huber(T.index(dist, i) - T.index(dist, j), HUBER_THRESHOLD))


def pairwise_contrastive_term(reps: RepTriple, labels, margin: float = CONTRASTIVE_MARGIN) -> Tensor:
    """Margin contrastive loss on unit-normalised r over all batch pairs."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    i, j = _pairs(labels, same=None)
    if i.size == 0:
        log.info("pairwise_contrastive: fewer than two instances, term is 0")
        return Tensor(0.0)
    r = T.l2_normalize(_as_batch(reps.r))
    diff = T.index(r, i) - T.index(r, j)
    sq = T.sum(diff * diff, axis=-1)
    same = (labels[i] == labels[j]).astype(np.float64)
    hinge = T.relu(T._shift(T.scale(T.sqrt(sq), -1.0), margin))
    per_pair = sq * Tensor(same) + hinge * hinge * Tensor(1.0 - same)
    return T.mean(per_pair)


def ablation_loss(variant: str, reps: RepTriple, labels, logits: Tensor) -> Tensor:
    if variant not in ABLATION_VARIANTS:
        raise LossError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    loss = cross_entropy(logits, labels)
    if variant == "huber_relation":
        loss = loss + huber_relation_term(reps, labels)
    elif variant == "pairwise_contrastive":
        loss = loss + pairwise_contrastive_term(reps, labels)
    return loss
