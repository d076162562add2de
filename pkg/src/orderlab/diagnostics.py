"""Self-checks exposed on the command line.

* ``grad_check_suite``: analytic gradients of every loss term against
  central differences on seeded random instances.
* ``ot_check``: the transportation simplex against brute-force vertex
  enumeration on small problems.
* ``mi_bench``: both MI estimators on correlated Gaussian pairs with known
  mutual information.
* ``ood_eval``: precision / recall of the OOD detector on synthetic episodes.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from .miestim import (Critic, PairBatch, VariationalDecoder, club_upper, critic_lower,
                      critic_lower_value, mi_regularizer, train_critic, train_decoder)
from .oodgate import OodSplit, detect, split_quality
from .orderloop import Model, TrainerConfig, make_snapshot, objective
from .otreg import DiscreteDist, cost_matrix, ot_exact, ot_loss
from .protoss import PrototypeSet, query_nll, refine_backward, refine_forward
from .taskstream import (EpisodeShape, episode_seed, make_domains, make_ood_pool, sample_episode)
from .tensorcore import check_array_grads

TOLERANCE = {"query_nll": 1e-4, "refine": 1e-4, "club_upper": 1e-4, "critic_lower": 1e-4,
             "mi_regularizer": 1e-4, "ot_loss": 1e-3, "objective": 1e-4}


def _query_nll_case(rng: np.random.Generator) -> float:
    n, d, q = 4, 3, 9
    emb = rng.standard_normal((q, d))
    protos = rng.standard_normal((n, d))
    y = rng.integers(n, size=q)

    def f():
        loss, gq, gp = query_nll(emb, y, PrototypeSet(protos, np.arange(n)))
        return loss, [gq, gp]

    return check_array_grads(f, [emb, protos])


def _refine_case(rng: np.random.Generator) -> float:
    n, k, d = 3, 2, 4
    s = rng.standard_normal((n * k, d))
    y = np.repeat(np.arange(n), k)
    u = rng.standard_normal((7, d))
    q = rng.standard_normal((6, d))
    qy = rng.integers(n, size=6)
    distractor = bool(rng.integers(2))

    def f():
        refined, cache = refine_forward(s, y, u, n, distractor)
        loss, gq, gp = query_nll(q, qy, refined)
        gs, gu = refine_backward(cache, gp)
        return loss, [gs, gu, gq]

    return check_array_grads(f, [s, u, q])


def _pairs(rng: np.random.Generator, L: int, d: int) -> PairBatch:
    e = rng.standard_normal((L, d))
    p = 0.7 * e + 0.5 * rng.standard_normal((L, d))
    return PairBatch(e, p, np.zeros(L, dtype=np.int64))


def _club_case(rng: np.random.Generator) -> float:
    pairs = _pairs(rng, 8, 3)
    dec = VariationalDecoder.create(3, rng, hidden=5)
    dec.log_var = float(rng.uniform(-0.5, 0.5))
    params = dec.mean_net.params

    def f():
        v, ge, gp, gphi = club_upper(pairs, dec)
        return v, [ge, gp, *gphi.arrays()]

    return check_array_grads(f, [pairs.emb, pairs.proto, *params.arrays()])


def _critic_case(rng: np.random.Generator) -> float:
    pairs = _pairs(rng, 8, 3)
    critic = Critic.create(3, rng, hidden=5)
    params = critic.net.params

    def f():
        v, ge, gp, g = critic_lower(pairs, critic, chunk=3)
        return v, [ge, gp, *g.arrays()]

    return check_array_grads(f, [pairs.emb, pairs.proto, *params.arrays()])


def _mi_case(rng: np.random.Generator) -> float:
    d, n = 3, 3
    protos = 2.0 * rng.standard_normal((n, d))
    u = protos[rng.integers(n, size=10)] + 0.5 * rng.standard_normal((10, d))
    perm = rng.permutation(10)
    split = OodSplit(np.sort(perm[:6]), np.sort(perm[6:]), 0.0, 0.0, 0.0)
    dec = VariationalDecoder.create(d, rng, hidden=5)
    critic = Critic.create(d, rng, hidden=5)
    lam = float(rng.uniform(0.2, 1.0))

    def f():
        mi = mi_regularizer(u, PrototypeSet(protos, np.arange(n)), split, dec, critic, lam)
        return mi.value, [mi.grad_unlabeled, mi.grad_protos]

    return check_array_grads(f, [u, protos])


def _ot_case(rng: np.random.Generator) -> float:
    cur = rng.standard_normal((5, 3))
    snap = rng.standard_normal((5, 3))

    def f():
        loss, g = ot_loss(cur, snap)
        return loss, [g]

    return check_array_grads(f, [cur])


def _objective_case(rng: np.random.Generator) -> float:
    # tanh keeps the network smooth so central differences are a valid oracle
    seed = int(rng.integers(2**31))
    domains = make_domains(2, dim=6, n_classes=6, n_heldout=3, subspace_dim=3, seed=seed)
    pool = make_ood_pool(domains, seed=seed)
    cfg = TrainerConfig(lam=float(rng.uniform(0.3, 0.7)), beta=float(rng.uniform(0.3, 0.7)),
                        hidden=(16,), embed_dim=4, seed=seed, activation="tanh")
    model = Model.create(6, cfg)

    def ep(t: int, d: int):
        return sample_episode(domains[d], 3, 2, 3, 4, 2, pool, episode_seed(seed, t))

    current = [ep(0, 1)]
    replay = []
    for t in (1, 2):
        e = ep(t, 0)
        snap = make_snapshot(model, e, cfg)
        replay.append((e, replace(snap, feats=snap.feats + 0.3 * rng.standard_normal(snap.feats.shape))))
    params = model.embed.params

    def f():
        bd, g = objective(model, current, replay, cfg)
        return bd.total, g.arrays()

    return check_array_grads(f, params.arrays())


CASES = {"query_nll": _query_nll_case, "refine": _refine_case, "club_upper": _club_case,
         "critic_lower": _critic_case, "mi_regularizer": _mi_case, "ot_loss": _ot_case,
         "objective": _objective_case}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check_suite(n_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    out = []
    for k, (name, case) in enumerate(CASES.items()):
        worst = 0.0
        for i in range(n_instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, i]))
            worst = max(worst, case(rng))
        out.append(CheckResult(name, worst, TOLERANCE[name], n_instances))
    return out


def brute_force_ot(a: np.ndarray, b: np.ndarray, C: np.ndarray) -> float:
    """Minimum cost over all basic feasible solutions of the transportation polytope.

    Each candidate basis of ``n + m - 1`` cells is solved as a square linear
    system with one redundant marginal equation dropped; nonnegative
    solutions are vertices.
    """
    n, m = C.shape
    cells = [(i, j) for i in range(n) for j in range(m)]
    A = np.zeros((n + m, n * m))
    for i, j in cells:
        A[i, i * m + j] = 1.0
        A[n + j, i * m + j] = 1.0
    rhs = np.concatenate([a, b])[:-1]
    A = A[:-1]
    best = np.inf
    for basis in itertools.combinations(range(n * m), n + m - 1):
        sub = A[:, basis]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, rhs)
        if np.all(x >= -1e-12):
            best = min(best, float(C.ravel()[list(basis)] @ x))
    return best


@dataclass
class OtCheckReport:
    instances: int
    max_cost_dev: float
    max_marginal_dev: float
    max_symmetry_dev: float
    max_identity_cost: float
    seconds: float

    @property
    def passed(self) -> bool:
        return (self.max_cost_dev <= 1e-9 and self.max_marginal_dev <= 1e-7
                and self.max_symmetry_dev <= 1e-9 and self.max_identity_cost <= 1e-9)


def ot_check(n_instances: int = 200, seed: int = 0) -> OtCheckReport:
    t0 = time.perf_counter()
    cost_dev = marg_dev = sym_dev = ident = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        n, m, d = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        mu = DiscreteDist(rng.standard_normal((n, d)), rng.dirichlet(np.ones(n)))
        nu = DiscreteDist(rng.standard_normal((m, d)), rng.dirichlet(np.ones(m)))
        plan = ot_exact(mu, nu)
        C = cost_matrix(mu.points, nu.points)
        cost_dev = max(cost_dev, abs(plan.cost - brute_force_ot(mu.weights, nu.weights, C)))
        marg_dev = max(marg_dev, np.abs(plan.row_marginals - mu.weights).max(),
                       np.abs(plan.col_marginals - nu.weights).max())
        sym_dev = max(sym_dev, abs(plan.cost - ot_exact(nu, mu).cost))
        ident = max(ident, ot_exact(mu, mu).cost)
    return OtCheckReport(n_instances, cost_dev, marg_dev, sym_dev, ident, time.perf_counter() - t0)


@dataclass
class MiBenchRow:
    rho: float
    truth: float
    lower: float
    upper: float

    @property
    def passed(self) -> bool:
        tol, band = 0.05, 0.15
        return (self.lower <= self.truth + tol and self.upper >= self.truth - tol
                and abs(self.lower - self.truth) <= band and abs(self.upper - self.truth) <= band)


def gaussian_mi(rho: float) -> float:
    return float(-0.5 * np.log(1.0 - rho * rho))


def mi_bench(rhos=(0.0, 0.5, 0.9), n_samples: int = 10_000, seed: int = 0,
             decoder_steps: int = 10_000, decoder_batch: int = 512, decoder_lr: float = 3e-3,
             critic_steps: int = 1000, critic_batch: int = 256, critic_lr: float = 1e-2
             ) -> list[MiBenchRow]:
    """Train both estimators on ``n_samples`` pairs, score them on a fresh sample."""
    rows = []
    for k, rho in enumerate(rhos):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))

        def draw(n: int) -> PairBatch:
            e = rng.standard_normal((n, 1))
            p = rho * e + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
            return PairBatch(e, p, np.zeros(n, dtype=np.int64))

        train, fresh = draw(n_samples), draw(n_samples)
        dec = VariationalDecoder.create(1, rng, lr=decoder_lr)
        critic = Critic.create(1, rng, lr=critic_lr)
        train_decoder(dec, train, decoder_steps, decoder_batch, rng)
        train_critic(critic, train, critic_steps, critic_batch, rng)
        rows.append(MiBenchRow(rho, gaussian_mi(rho), critic_lower_value(fresh, critic),
                               club_upper(fresh, dec)[0]))
    return rows


def ood_eval(n_episodes: int = 200, seed: int = 0, shape: EpisodeShape = EpisodeShape(K=5, R=100),
             offset_multiplier: float = 2.0, multiplier: float = 1.0) -> dict[str, float]:
    """Mean detector precision / recall on raw synthetic features.

    OOD cluster means sit ``offset_multiplier * radius`` class standard
    deviations (radius 4, std 1) or more from every class mean.
    """
    domains = make_domains(3, seed=seed)
    pool = make_ood_pool(domains, offset_multiplier, seed=seed)
    scores = []
    for i in range(n_episodes):
        ep = sample_episode(domains[i % len(domains)], shape.N, shape.K, shape.Z, shape.R,
                            shape.Q_size, pool, episode_seed(seed, i, 7))
        split = detect(ep.support_x, ep.support_y, ep.unlabeled_x, ep.query_x, multiplier)
        scores.append(split_quality(split, ep.unlabeled_ood))
    return {k: float(np.mean([s[k] for s in scores])) for k in scores[0]}
