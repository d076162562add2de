"""Distance-threshold OOD detection for an episode's unlabeled set.

Embeddings are projected onto the unit sphere; the distance of a point to
the nearest support prototype is compared against a threshold calibrated on
the query set, whose points are known to be in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .protoss import prototypes, sq_dists


@dataclass
class OodSplit:
    id_indices: np.ndarray
    ood_indices: np.ndarray
    threshold: float
    calib_mean: float
    calib_std: float


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm embedding cannot be normalized")
    return x / norms


def nearest_distance(points: np.ndarray, protos: np.ndarray) -> np.ndarray:
    if points.shape[0] == 0:
        return np.zeros(0)
    return np.sqrt(sq_dists(points, protos).min(axis=1))


def detect(support_emb: np.ndarray, labels: np.ndarray, unlabeled_emb: np.ndarray,
           query_emb: np.ndarray, multiplier: float = 1.0) -> OodSplit:
    """Split unlabeled rows into ID / OOD at ``mean + multiplier * std`` of query distances.

    Support embeddings are normalized before averaging into prototypes, which
    keeps the split invariant to rescaling the embedding.  The standard
    deviation is the population one (``ddof=0``).
    """
    if query_emb.shape[0] < 2:
        raise ContractError("need at least two query points to calibrate the threshold")
    n_way = int(np.max(labels)) + 1
    protos = prototypes(_normalize(support_emb), labels, n_way).protos
    d_q = nearest_distance(_normalize(query_emb), protos)
    mean, std = float(d_q.mean()), float(d_q.std())
    thresh = mean + multiplier * std
    if unlabeled_emb.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return OodSplit(empty, empty.copy(), thresh, mean, std)
    d_u = nearest_distance(_normalize(unlabeled_emb), protos)
    is_ood = d_u > thresh
    return OodSplit(np.flatnonzero(~is_ood), np.flatnonzero(is_ood), thresh, mean, std)


def split_quality(split: OodSplit, truth_ood: np.ndarray) -> dict[str, float]:
    """Precision / recall / F1 with OOD as the positive class.

    ``id_precision`` and ``id_recall`` score the ID side the same way.  An
    empty denominator counts as a perfect score.
    """
    pred = np.zeros(len(truth_ood), dtype=bool)
    pred[split.ood_indices] = True
    truth = np.asarray(truth_ood, dtype=bool)

    def pr(p: np.ndarray, t: np.ndarray) -> tuple[float, float]:
        tp = np.sum(p & t)
        prec = tp / p.sum() if p.sum() else 1.0
        rec = tp / t.sum() if t.sum() else 1.0
        return float(prec), float(rec)

    prec, rec = pr(pred, truth)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    id_prec, id_rec = pr(~pred, ~truth)
    return {"precision": prec, "recall": rec, "f1": f1,
            "id_precision": id_prec, "id_recall": id_rec}
