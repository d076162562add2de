"""Sample-based variational bounds on the mutual information between an
embedding and its nearest prototype.

* ``club_upper`` is the contrastive log-ratio upper bound with a Gaussian
  variational conditional (learned mean network, fixed variance).
* ``critic_lower`` is the critic-based lower bound with the normalizer
  ``a(.)`` fixed to one, i.e. ``E_joint f - E_marginal e^f + 1``.

Both return analytic gradients for the embeddings, the prototypes and the
estimator's own parameters.  All sums are normalized by L (or L^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .oodgate import OodSplit
from .protoss import PrototypeSet, sq_dists
from .tensorcore import GradBuf, Trainable, mlp_backward, mlp_forward


@dataclass
class PairBatch:
    emb: np.ndarray
    proto: np.ndarray
    proto_idx: np.ndarray

    def __post_init__(self) -> None:
        if self.emb.shape[0] != self.proto.shape[0]:
            raise DimensionError("emb and proto must have equal row counts")

    def __len__(self) -> int:
        return self.emb.shape[0]


def pair_nearest(emb: np.ndarray, protos: PrototypeSet) -> PairBatch:
    """Pair each row with its nearest prototype (ties go to the lower index)."""
    p = protos.protos
    if p.shape[0] == 0:
        raise ContractError("no prototypes to pair with")
    if emb.shape[0] == 0:
        return PairBatch(emb.reshape(0, p.shape[1]), p[:0], np.zeros(0, dtype=np.int64))
    idx = np.argmin(sq_dists(emb, p), axis=1)
    return PairBatch(emb, p[idx], idx)


@dataclass
class VariationalDecoder:
    """Gaussian q(p | e) = N(mean_net(e), exp(log_var) I)."""

    mean_net: Trainable
    log_var: float = 0.0

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden: int = 32,
               lr: float = 1e-3) -> "VariationalDecoder":
        return cls(Trainable.create([dim, hidden, dim], rng, lr, hidden="tanh"))

    def copy(self) -> "VariationalDecoder":
        return VariationalDecoder(self.mean_net.copy(), self.log_var)


@dataclass
class Critic:
    """Scalar critic f(e, p) on concat(e, p) with one hidden layer."""

    net: Trainable

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden: int = 10,
               lr: float = 1e-3) -> "Critic":
        return cls(Trainable.create([2 * dim, hidden, 1], rng, lr, hidden="tanh"))

    def copy(self) -> "Critic":
        return Critic(self.net.copy())


def club_from_logdensity(logq: np.ndarray) -> float:
    """Estimate from an explicit matrix with ``logq[i, j] = log q(p_i | e_j)``."""
    return float(np.mean(np.diag(logq)) - np.mean(logq))


def gaussian_logdensity_matrix(pairs: PairBatch, dec: VariationalDecoder) -> np.ndarray:
    mean, _ = mlp_forward(dec.mean_net.params, pairs.emb)
    var = np.exp(dec.log_var)
    d = pairs.proto.shape[1]
    return -0.5 * sq_dists(pairs.proto, mean) / var - 0.5 * d * (np.log(2 * np.pi) + dec.log_var)


def club_upper(pairs: PairBatch, dec: VariationalDecoder
               ) -> tuple[float, np.ndarray, np.ndarray, GradBuf]:
    """Upper-bound estimate with gradients ``(value, d/d emb, d/d proto, d/d phi)``.

    The all-pairs mean of squared residuals is expanded in closed form, so the
    cost is linear in L.
    """
    L = len(pairs)
    if L < 1:
        raise ContractError("club_upper needs at least one pair")
    params = dec.mean_net.params
    m, cache = mlp_forward(params, pairs.emb)
    p = pairs.proto
    var = np.exp(dec.log_var)
    pos = np.mean(((p - m) ** 2).sum(1))
    pbar, mbar = p.mean(0), m.mean(0)
    allpairs = np.mean((p * p).sum(1)) + np.mean((m * m).sum(1)) - 2.0 * pbar @ mbar
    value = -0.5 * (pos - allpairs) / var
    if not np.isfinite(value):
        raise NumericError("non-finite log-density in club_upper")
    grad_p = (m - mbar) / (var * L)
    grad_m = (p - pbar) / (var * L)
    gphi, grad_e = mlp_backward(params, cache, grad_m)
    return float(value), grad_e, grad_p, gphi


def decoder_nll(pairs: PairBatch, dec: VariationalDecoder) -> tuple[float, GradBuf]:
    """Mean negative conditional log-likelihood (up to constants) and its phi-gradient."""
    params = dec.mean_net.params
    m, cache = mlp_forward(params, pairs.emb)
    var = np.exp(dec.log_var)
    r = m - pairs.proto
    loss = 0.5 * np.mean((r * r).sum(1)) / var
    gphi, _ = mlp_backward(params, cache, r / (var * len(pairs)))
    return float(loss), gphi


def _batches(n: int, batch_size: int | None, rng: np.random.Generator | None):
    if batch_size is None or batch_size >= n:
        while True:
            yield slice(None)
    else:
        while True:
            yield rng.choice(n, size=batch_size, replace=False)


def train_decoder(dec: VariationalDecoder, pairs: PairBatch, steps: int,
                  batch_size: int | None = None, rng: np.random.Generator | None = None) -> list[float]:
    """Adam steps maximizing log q(p_i | e_i); returns the per-step loss trace."""
    trace = []
    if len(pairs) == 0:
        return trace
    batches = _batches(len(pairs), batch_size, rng)
    for _ in range(steps):
        b = next(batches)
        loss, g = decoder_nll(PairBatch(pairs.emb[b], pairs.proto[b], pairs.proto_idx[b]), dec)
        dec.mean_net.step(g)
        trace.append(loss)
    return trace


def _critic_layers(critic: Critic):
    params = critic.net.params
    if len(params.weights) != 2 or params.out_dim != 1:
        raise ContractError("critic must have exactly one hidden layer and a scalar output")
    return params


def critic_scores(critic: Critic, emb: np.ndarray, proto: np.ndarray) -> np.ndarray:
    """f(e_i, p_i) for aligned rows."""
    out, _ = mlp_forward(critic.net.params, np.hstack([emb, proto]))
    return out[:, 0]


def critic_lower(pairs: PairBatch, critic: Critic, chunk: int | None = None
                 ) -> tuple[float, np.ndarray, np.ndarray, GradBuf]:
    """Lower-bound estimate with gradients ``(value, d/d emb, d/d proto, d/d critic)``.

    The L x L score grid ``F[i, j] = f(e_i, p_j)`` is evaluated in column
    chunks using the affine first layer, ``W1 = [W_e; W_p]``.
    """
    L = len(pairs)
    if L < 1:
        raise ContractError("critic_lower needs at least one pair")
    params = _critic_layers(critic)
    d = pairs.emb.shape[1]
    w1, b1 = params.weights[0], params.biases[0]
    w2, b2 = params.weights[1][:, 0], params.biases[1][0, 0]
    act = params.activations[0]
    A = pairs.emb @ w1[:d] + b1  # (L, H)
    B = pairs.proto @ w1[d:]  # (L, H)

    def hidden(z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if act == "tanh" else (np.maximum(z, 0.0) if act == "relu" else z)

    def dhidden(z: np.ndarray, h: np.ndarray) -> np.ndarray:
        return 1.0 - h * h if act == "tanh" else ((z > 0).astype(float) if act == "relu" else np.ones_like(z))

    if chunk is None:
        chunk = L if L * L * A.shape[1] <= 4_000_000 else 64
    zd = A + B
    hd = hidden(zd)
    fdiag = hd @ w2 + b2

    def scores(s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        z = A[:, None, :] + B[None, s:s + chunk, :]
        h = hidden(z)
        return z, h, h @ w2 + b2

    if chunk >= L:
        blocks = [scores(0)]
        fmax = float(blocks[0][2].max())
    else:
        # extra pass for the global max; chunks are recomputed below
        blocks = None
        fmax = max(float(scores(s)[2].max()) for s in range(0, L, chunk))
    scale = np.exp(fmax)
    if not np.isfinite(scale):
        raise NumericError("critic scores overflow exp()")

    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gw2 = np.zeros_like(w2)
    gb2 = 0.0
    expsum = 0.0
    for k, s in enumerate(range(0, L, chunk)):
        z, h, f = blocks[k] if blocks is not None else scores(s)
        e = np.exp(f - fmax)
        expsum += e.sum()
        g = -(e * scale) / (L * L)  # dV/dF_ij
        gh = g[:, :, None] * w2 * dhidden(z, h)
        gA += gh.sum(1)
        gB[s:s + chunk] += gh.sum(0)
        gw2 += np.einsum("ij,ijk->k", g, h)
        gb2 += g.sum()
    neg = scale * expsum / (L * L)
    value = float(np.mean(fdiag) - neg + 1.0)
    if not np.isfinite(value):
        raise NumericError("non-finite critic_lower value")
    # diagonal (joint) term
    gdiag = np.full(L, 1.0 / L)
    ghd = gdiag[:, None] * w2 * dhidden(zd, hd)
    gA += ghd
    gB += ghd
    gw2 += gdiag @ hd
    gb2 += gdiag.sum()

    gw1 = np.vstack([pairs.emb.T @ gA, pairs.proto.T @ gB])
    grads = GradBuf([gw1, gw2[:, None]], [gA.sum(0, keepdims=True), np.array([[gb2]])])
    return value, gA @ w1[:d].T, gB @ w1[d:].T, grads


def critic_lower_value(pairs: PairBatch, critic: Critic, chunk: int = 256) -> float:
    """Value of :func:`critic_lower` without gradient bookkeeping."""
    L = len(pairs)
    if L < 1:
        raise ContractError("critic_lower needs at least one pair")
    params = _critic_layers(critic)
    d = pairs.emb.shape[1]
    w1, b1 = params.weights[0], params.biases[0]
    w2, b2 = params.weights[1][:, 0], params.biases[1][0, 0]
    act = params.activations[0]
    A = pairs.emb @ w1[:d] + b1
    B = pairs.proto @ w1[d:]
    blocks = []
    for s in range(0, L, chunk):
        z = A[:, None, :] + B[None, s:s + chunk, :]
        h = np.tanh(z, out=z) if act == "tanh" else (np.maximum(z, 0.0, out=z) if act == "relu" else z)
        blocks.append((h @ w2).ravel() + b2)
    f = np.concatenate(blocks)
    fmax = float(f.max())
    neg = np.exp(fmax) * np.mean(np.exp(f - fmax))
    value = float(np.mean(critic_scores(critic, pairs.emb, pairs.proto)) - neg + 1.0)
    if not np.isfinite(value):
        raise NumericError("non-finite critic_lower value")
    return value


def train_critic(critic: Critic, pairs: PairBatch, steps: int, batch_size: int | None = None,
                 rng: np.random.Generator | None = None) -> list[float]:
    """Gradient ascent on the lower bound w.r.t. the critic only."""
    trace = []
    if len(pairs) == 0:
        return trace
    batches = _batches(len(pairs), batch_size, rng)
    for _ in range(steps):
        b = next(batches)
        value, _, _, g = critic_lower(PairBatch(pairs.emb[b], pairs.proto[b], pairs.proto_idx[b]), critic)
        for a in g.arrays():
            a *= -1.0
        critic.net.step(g)
        trace.append(value)
    return trace


@dataclass
class MiTerms:
    value: float
    i_ood: float
    i_id: float
    grad_unlabeled: np.ndarray
    grad_protos: np.ndarray


def mi_regularizer(unlabeled_emb: np.ndarray, protos: PrototypeSet, split: OodSplit,
                   dec: VariationalDecoder, critic: Critic, lam: float) -> MiTerms:
    """``lam * (I_ood - I_id)`` on the detected OOD / ID unlabeled rows.

    Gradients flow into the unlabeled embeddings and into the (refined)
    prototypes each row is paired with; estimator parameters are held fixed.
    """
    grad_u = np.zeros_like(unlabeled_emb)
    grad_p = np.zeros_like(protos.protos)
    i_ood = i_id = 0.0
    if len(split.ood_indices):
        pairs = pair_nearest(unlabeled_emb[split.ood_indices], protos)
        i_ood, ge, gp, _ = club_upper(pairs, dec)
        grad_u[split.ood_indices] += lam * ge
        np.add.at(grad_p, pairs.proto_idx, lam * gp)
    if len(split.id_indices):
        pairs = pair_nearest(unlabeled_emb[split.id_indices], protos)
        i_id, ge, gp, _ = critic_lower(pairs, critic)
        grad_u[split.id_indices] -= lam * ge
        np.add.at(grad_p, pairs.proto_idx, -lam * gp)
    return MiTerms(lam * (i_ood - i_id), i_ood, i_id, grad_u, grad_p)
