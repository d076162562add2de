"""Semi-supervised prototypical classification.

Prototypes are support means; a single soft k-means pass over the unlabeled
embeddings refines them, and queries are scored by negative squared
distance to the refined prototypes.  Every differentiable piece has an
explicit backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class PrototypeSet:
    protos: np.ndarray  # (N, d), row c is the prototype of local class c
    class_ids: np.ndarray

    @property
    def n_way(self) -> int:
        return self.protos.shape[0]


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    y = np.zeros((len(labels), n))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def prototypes(support_emb: np.ndarray, labels: np.ndarray, n_way: int | None = None) -> PrototypeSet:
    labels = np.asarray(labels, dtype=np.int64)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way)
    if np.any(counts[:n_way] == 0):
        raise ContractError("every episode class needs at least one support row")
    sums = _onehot(labels, n_way).T @ support_emb
    return PrototypeSet(sums / counts[:, None], np.arange(n_way))


def soft_assign(unlabeled_emb: np.ndarray, protos: PrototypeSet,
                distractor: bool = False) -> np.ndarray:
    """Softmax over negative squared distances to the prototypes.

    With ``distractor`` an extra all-zero prototype joins the softmax and its
    column is appended last, so rows still sum to one.
    """
    if unlabeled_emb.shape[0] and unlabeled_emb.shape[1] != protos.protos.shape[1]:
        raise DimensionError("embedding width differs from prototype width")
    logits = -sq_dists(unlabeled_emb, protos.protos)
    if distractor:
        logits = np.hstack([logits, -(unlabeled_emb ** 2).sum(1, keepdims=True)])
    if logits.shape[0] == 0:
        return logits
    return _softmax(logits)


def refine_prototypes(support_emb: np.ndarray, labels: np.ndarray, unlabeled_emb: np.ndarray,
                      mu: np.ndarray) -> PrototypeSet:
    """Support mean plus mu-weighted unlabeled embeddings (extra mu columns ignored)."""
    labels = np.asarray(labels, dtype=np.int64)
    n_way = int(labels.max()) + 1
    if mu.shape[0] != unlabeled_emb.shape[0]:
        raise DimensionError("mu rows must match unlabeled rows")
    m = mu[:, :n_way]
    y = _onehot(labels, n_way)
    num = y.T @ support_emb + m.T @ unlabeled_emb
    den = y.sum(0) + m.sum(0)
    return PrototypeSet(num / den[:, None], np.arange(n_way))


def query_nll(query_emb: np.ndarray, query_labels: np.ndarray,
              protos: PrototypeSet) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean negative log-probability of the true class.

    Returns ``(loss, d loss/d query_emb, d loss/d protos)``.
    """
    p = protos.protos
    logits = -sq_dists(query_emb, p)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    n = len(query_labels)
    loss = float(np.mean(logz - z[np.arange(n), query_labels]))
    g = (np.exp(z - logz[:, None]) - _onehot(query_labels, p.shape[0])) / n
    # logits_qc = -|q - p_c|^2
    grad_q = -2.0 * (g.sum(1, keepdims=True) * query_emb - g @ p)
    grad_p = 2.0 * (g.T @ query_emb - g.sum(0)[:, None] * p)
    return loss, grad_q, grad_p


def predict(query_emb: np.ndarray, protos: PrototypeSet,
            labels: np.ndarray | None = None) -> tuple[np.ndarray, float | None]:
    """Nearest refined prototype; ``argmin`` breaks ties toward the lower class index."""
    pred = np.argmin(sq_dists(query_emb, protos.protos), axis=1)
    acc = None if labels is None else float(np.mean(pred == labels))
    return pred, acc


@dataclass
class RefineCache:
    support_emb: np.ndarray
    unlabeled_emb: np.ndarray
    onehot: np.ndarray
    counts: np.ndarray
    base: np.ndarray  # unrefined prototypes
    mu_full: np.ndarray
    num: np.ndarray
    den: np.ndarray
    distractor: bool


def refine_forward(support_emb: np.ndarray, labels: np.ndarray, unlabeled_emb: np.ndarray,
                   n_way: int, distractor: bool = False) -> tuple[PrototypeSet, RefineCache]:
    """prototypes -> soft_assign -> refine_prototypes, keeping what backward needs."""
    y = _onehot(np.asarray(labels, dtype=np.int64), n_way)
    counts = y.sum(0)
    base = prototypes(support_emb, labels, n_way)
    mu_full = soft_assign(unlabeled_emb, base, distractor)
    m = mu_full[:, :n_way]
    num = y.T @ support_emb + m.T @ unlabeled_emb
    den = counts + m.sum(0)
    cache = RefineCache(support_emb, unlabeled_emb, y, counts, base.protos, mu_full, num, den, distractor)
    return PrototypeSet(num / den[:, None], base.class_ids), cache


def refine_backward(cache: RefineCache, grad_refined: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (support_emb, unlabeled_emb) given d loss/d refined prototypes."""
    n_way = cache.base.shape[0]
    refined = cache.num / cache.den[:, None]
    grad_num = grad_refined / cache.den[:, None]
    grad_den = -(grad_refined * refined).sum(1) / cache.den
    grad_s = cache.onehot @ grad_num
    u = cache.unlabeled_emb
    mu_full = cache.mu_full
    grad_u = mu_full[:, :n_way] @ grad_num
    if u.shape[0] == 0:
        return grad_s, grad_u
    grad_mu = np.zeros_like(mu_full)
    grad_mu[:, :n_way] = u @ grad_num.T + grad_den[None, :]
    grad_logit = mu_full * (grad_mu - (grad_mu * mu_full).sum(1, keepdims=True))
    g = grad_logit[:, :n_way]
    p = cache.base
    # logit_ic = -|u_i - p_c|^2
    grad_u += -2.0 * (g.sum(1, keepdims=True) * u - g @ p)
    grad_base = 2.0 * (g.T @ u - g.sum(0)[:, None] * p)
    if cache.distractor:
        grad_u += -2.0 * grad_logit[:, n_way:] * u
    grad_s += cache.onehot @ (grad_base / cache.counts[:, None])
    return grad_s, grad_u
