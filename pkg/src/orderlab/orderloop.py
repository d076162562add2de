"""Training loop for continual semi-supervised meta-learning.

One step draws a small batch of stored tasks, adds the current tasks, and
takes a single Adam step on

    H = sum_current [L_meta + lam (I_ood - I_id)]
      + sum_memory  [L_meta + lam (I_ood - I_id)]
      + beta * OT(current features of memory tasks, stored snapshots)

after which every current task is offered to the reservoir together with a
feature snapshot computed with the updated parameters.  ``seq``, ``er`` and
``joint`` are the comparison baselines.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, OrderLabError
from .miestim import (Critic, VariationalDecoder, mi_regularizer, pair_nearest, train_critic,
                      train_decoder)
from .oodgate import OodSplit, detect
from .otreg import ot_loss
from .protoss import RefineCache, predict, query_nll, refine_backward, refine_forward
from .taskstream import (DomainSpec, Episode, EpisodeShape, FeatureSnapshot, MemoryBuffer, OodPool,
                         episode_seed, reservoir_offer, sample_episode, sample_memory_batch)
from .tensorcore import ForwardCache, GradBuf, Trainable, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

MODES = ("order", "seq", "er", "joint")


@dataclass(frozen=True)
class TrainerConfig:
    lam: float = 1e-5
    beta: float = 0.003
    lr: float = 1e-3
    meta_batch: int = 2
    memory_capacity: int = 200
    memory_batch: int = 2
    ood_multiplier: float = 1.0
    mode: str = "order"
    aux_steps: int = 1
    seed: int = 1
    ood_filter: bool = True
    distractor: bool = False
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 16
    aux_lr: float = 1e-3
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lam", "beta", "lr", "ood_multiplier", "aux_lr"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("meta_batch", "memory_capacity", "memory_batch", "aux_steps", "embed_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.meta_batch < 1:
            raise ConfigError("meta_batch must be >= 1")

    def effective(self) -> "TrainerConfig":
        """Settings the chosen mode actually trains with."""
        if self.mode == "seq":
            return replace(self, lam=0.0, beta=0.0, memory_batch=0, ood_filter=False)
        if self.mode == "er":
            return replace(self, lam=0.0, beta=0.0, ood_filter=False)
        if self.mode == "joint":
            return replace(self, beta=0.0, memory_batch=0, distractor=False)
        return replace(self, distractor=False)

    @property
    def uses_memory(self) -> bool:
        return self.mode in ("order", "er")


@dataclass
class Model:
    embed: Trainable
    decoder: VariationalDecoder
    critic: Critic

    @classmethod
    def create(cls, in_dim: int, cfg: TrainerConfig) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31337]))
        embed = Trainable.create([in_dim, *cfg.hidden, cfg.embed_dim], rng, cfg.lr,
                                 hidden=cfg.activation)
        return cls(embed,
                   VariationalDecoder.create(cfg.embed_dim, rng, lr=cfg.aux_lr),
                   Critic.create(cfg.embed_dim, rng, lr=cfg.aux_lr))

    def copy(self) -> "Model":
        return Model(self.embed.copy(), self.decoder.copy(), self.critic.copy())

    def embed_points(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.embed.params, x)[0]


@dataclass
class LossBreakdown:
    t: int
    domain_id: int
    meta_current: float = 0.0
    mi_ood: float = 0.0
    mi_id: float = 0.0
    meta_memory: float = 0.0
    mi_memory: float = 0.0
    ot: float = 0.0
    total: float = 0.0

    def reconstruct(self, lam: float, beta: float) -> float:
        return (self.meta_current + lam * (self.mi_ood - self.mi_id) + self.meta_memory
                + self.mi_memory + beta * self.ot)


@dataclass
class _TaskState:
    episode: Episode
    emb: np.ndarray
    cache: ForwardCache
    split: OodSplit | None
    used_idx: np.ndarray
    refined: object
    refine_cache: RefineCache
    snapshot: FeatureSnapshot | None = None


def _slices(ep: Episode) -> tuple[slice, slice, slice]:
    ns, nu = len(ep.support_y), len(ep.unlabeled_x)
    return slice(0, ns), slice(ns, ns + nu), slice(ns + nu, None)


def _task_forward(model: Model, ep: Episode, cfg: TrainerConfig) -> _TaskState:
    x = np.vstack([ep.support_x, ep.unlabeled_x, ep.query_x])
    emb, cache = mlp_forward(model.embed.params, x)
    s, u, q = _slices(ep)
    es, eu, eq = emb[s], emb[u], emb[q]
    split = None
    used = np.arange(eu.shape[0])
    if cfg.ood_filter or cfg.lam > 0:
        split = detect(es, ep.support_y, eu, eq, cfg.ood_multiplier)
        if cfg.ood_filter:
            used = split.id_indices
    refined, rcache = refine_forward(es, ep.support_y, eu[used], ep.n_way, cfg.distractor)
    return _TaskState(ep, emb, cache, split, used, refined, rcache)


def _task_grad(state: _TaskState, model: Model, cfg: TrainerConfig) -> tuple[float, float, float, np.ndarray]:
    """Returns (meta loss, I_ood, I_id, dH/d emb rows) for one task."""
    ep = state.episode
    s, u, q = _slices(ep)
    eu, eq = state.emb[u], state.emb[q]
    meta, grad_q, grad_p = query_nll(eq, ep.query_y, state.refined)
    grad = np.zeros_like(state.emb)
    grad[q] = grad_q
    i_ood = i_id = 0.0
    if cfg.lam > 0 and state.split is not None:
        mi = mi_regularizer(eu, state.refined, state.split, model.decoder, model.critic, cfg.lam)
        i_ood, i_id = mi.i_ood, mi.i_id
        grad[u] += mi.grad_unlabeled
        grad_p = grad_p + mi.grad_protos
    gs, gu_used = refine_backward(state.refine_cache, grad_p)
    grad[s] += gs
    gu = grad[u]
    np.add.at(gu, state.used_idx, gu_used)
    grad[u] = gu
    return meta, i_ood, i_id, grad


def _train_estimators(states: Sequence[_TaskState], model: Model, cfg: TrainerConfig) -> None:
    if cfg.lam <= 0 or cfg.aux_steps == 0:
        return
    for st in states:
        if st.split is None:
            continue
        eu = st.emb[_slices(st.episode)[1]]
        if len(st.split.ood_indices):
            pairs = pair_nearest(eu[st.split.ood_indices].copy(), st.refined)
            train_decoder(model.decoder, pairs, cfg.aux_steps)
        if len(st.split.id_indices):
            pairs = pair_nearest(eu[st.split.id_indices].copy(), st.refined)
            train_critic(model.critic, pairs, cfg.aux_steps)


def _objective(model: Model, current: Sequence[Episode],
               replay: Sequence[tuple[Episode, FeatureSnapshot]], cfg: TrainerConfig, t: int,
               train_aux: bool) -> tuple[LossBreakdown, GradBuf]:
    states = [_task_forward(model, ep, cfg) for ep in current]
    mem_states = []
    for ep, snap in replay:
        st = _task_forward(model, ep, cfg)
        st.snapshot = snap
        mem_states.append(st)
    if train_aux:
        _train_estimators(states + mem_states, model, cfg)
    bd = LossBreakdown(t, int(current[0].domain_id))
    grads = []
    for st in states:
        meta, i_ood, i_id, g = _task_grad(st, model, cfg)
        bd.meta_current += meta
        bd.mi_ood += i_ood
        bd.mi_id += i_id
        grads.append(g)
    for st in mem_states:
        meta, i_ood, i_id, g = _task_grad(st, model, cfg)
        bd.meta_memory += meta
        bd.mi_memory += cfg.lam * (i_ood - i_id)
        grads.append(g)
    if cfg.beta > 0 and mem_states:
        rows = []
        for st in mem_states:
            s, u, _ = _slices(st.episode)
            rows.append(np.concatenate([np.arange(s.start, s.stop), u.start + st.snapshot.unlabeled_idx]))
        cur = np.vstack([st.emb[r] for st, r in zip(mem_states, rows)])
        stored = np.vstack([st.snapshot.feats for st in mem_states])
        bd.ot, g_ot = ot_loss(cur, stored)
        offset = 0
        for st, r, g in zip(mem_states, rows, grads[len(states):]):
            np.add.at(g, r, cfg.beta * g_ot[offset:offset + len(r)])
            offset += len(r)
    bd.total = bd.reconstruct(cfg.lam, cfg.beta)
    total = GradBuf.zeros_like(model.embed.params)
    for st, g in zip(states + mem_states, grads):
        total.add_(mlp_backward(model.embed.params, st.cache, g)[0])
    return bd, total


def objective(model: Model, current: Sequence[Episode],
              replay: Sequence[tuple[Episode, FeatureSnapshot]], cfg: TrainerConfig,
              t: int = 0) -> tuple[LossBreakdown, GradBuf]:
    """H(theta) and its gradient without touching any state (for checks)."""
    return _objective(model, current, replay, cfg.effective(), t, train_aux=False)


def make_snapshot(model: Model, ep: Episode, cfg: TrainerConfig) -> FeatureSnapshot:
    """Embeddings of S and detected U_id under the current parameters."""
    x = np.vstack([ep.support_x, ep.unlabeled_x, ep.query_x])
    emb = model.embed_points(x)
    s, u, q = _slices(ep)
    split = detect(emb[s], ep.support_y, emb[u], emb[q], cfg.ood_multiplier)
    idx = split.id_indices
    return FeatureSnapshot(np.vstack([emb[s], emb[u][idx]]), len(ep.support_y), idx)


def _step(model: Model, t: int, current: Sequence[Episode], buffer: MemoryBuffer,
          cfg: TrainerConfig, rng: np.random.Generator) -> LossBreakdown:
    eff = cfg.effective()
    replay = sample_memory_batch(buffer, eff.memory_batch, rng) if cfg.uses_memory else []
    bd, grads = _objective(model, current, replay, eff, t, train_aux=True)
    model.embed.step(grads)
    if cfg.uses_memory:
        for ep in current:
            reservoir_offer(buffer, ep, make_snapshot(model, ep, eff), rng)
    return bd


def order_step(model: Model, t: int, episodes: Sequence[Episode], buffer: MemoryBuffer,
               cfg: TrainerConfig, rng: np.random.Generator) -> LossBreakdown:
    if cfg.mode != "order":
        raise ConfigError("order_step requires mode 'order'")
    return _step(model, t, episodes, buffer, cfg, rng)


def baseline_step(model: Model, t: int, episodes: Sequence[Episode], buffer: MemoryBuffer,
                  cfg: TrainerConfig, rng: np.random.Generator) -> LossBreakdown:
    if cfg.mode not in ("seq", "er", "joint"):
        raise ConfigError("baseline_step requires mode seq, er or joint")
    return _step(model, t, episodes, buffer, cfg, rng)


def step_fn(mode: str):
    return order_step if mode == "order" else baseline_step


@dataclass
class EvalResult:
    mean: np.ndarray
    ci95: np.ndarray
    per_episode: list[np.ndarray] = field(repr=False, default_factory=list)


def episode_accuracy(model: Model, ep: Episode, cfg: TrainerConfig) -> float:
    """Full inference path: embed, detect (if the method filters), refine, predict."""
    eff = cfg.effective()
    eval_cfg = replace(eff, lam=0.0)
    st = _task_forward(model, ep, eval_cfg)
    return predict(st.emb[_slices(ep)[2]], st.refined, ep.query_y)[1]


def evaluate(model: Model, domains: Sequence[DomainSpec], episodes_per_domain: int,
             cfg: TrainerConfig, shape: EpisodeShape, ood: OodPool | None, seed: int = 0) -> EvalResult:
    """Accuracy on held-out classes of each domain, mean and 95% half-width."""
    means, cis, per = [], [], []
    for spec in domains:
        accs = np.array([
            episode_accuracy(model, sample_episode(spec, shape.N, shape.K, shape.Z, shape.R,
                                                   shape.Q_size, ood,
                                                   episode_seed(seed, i, 99, spec.domain_id),
                                                   split="heldout"), cfg)
            for i in range(episodes_per_domain)])
        per.append(accs)
        means.append(accs.mean() if len(accs) else np.nan)
        cis.append(1.96 * accs.std(ddof=1) / np.sqrt(len(accs)) if len(accs) > 1 else 0.0)
    return EvalResult(np.array(means), np.array(cis), per)


@dataclass
class EvalRow:
    t: int
    phase: int  # index of the domain just finished; -1 for the final evaluation
    accuracies: list[float]


@dataclass
class TrainLog:
    steps: list[LossBreakdown] = field(default_factory=list)
    evals: list[EvalRow] = field(default_factory=list)
    final: EvalResult | None = None
    forgetting: float = 0.0
    error: str | None = None


def joint_stream(domains: Sequence[DomainSpec], n_tasks: int, seed: int, shape: EpisodeShape,
                 ood: OodPool | None) -> Iterator[tuple[int, Episode]]:
    """Episodes from uniformly chosen domains, ignoring any ordering."""
    for t in range(n_tasks):
        ss = episode_seed(seed, t, 1)
        pick, ep_seed = ss.spawn(2)
        d = int(np.random.default_rng(pick).integers(len(domains)))
        spec = domains[d]
        yield t, sample_episode(spec, shape.N, shape.K, shape.Z, shape.R, shape.Q_size, ood, ep_seed)


def forgetting_from(after: dict[int, float], final: np.ndarray, last_domain: int) -> float:
    """Mean over earlier domains of (accuracy right after the domain - final accuracy)."""
    past = [d for d in after if d < last_domain]
    if not past:
        return 0.0
    return float(np.mean([after[d] - final[d] for d in past]))


def train_stream(stream: Iterable[tuple[int, Episode]], cfg: TrainerConfig,
                 domains: Sequence[DomainSpec], shape: EpisodeShape, ood: OodPool | None,
                 eval_episodes: int = 100, eval_seed: int = 12345, boundaries: Sequence[int] = (),
                 model: Model | None = None) -> tuple[Model | None, TrainLog]:
    """Run the configured step function over a stream.

    Evaluation happens on all domains seen so far whenever the incoming
    episode's domain changes (for ``joint``: at the task counts listed in
    ``boundaries``) and once more at the end.  ``joint`` groups
    ``meta_batch + memory_batch`` tasks per step so that it sees as many
    tasks per update as the replay modes.
    """
    log_ = TrainLog()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4242]))
    buffer = MemoryBuffer(cfg.memory_capacity)
    fn = step_fn(cfg.mode)
    group = cfg.meta_batch + (cfg.memory_batch if cfg.mode == "joint" else 0)
    pending: list[Episode] = []
    step = 0
    seen = 0
    current_domain = None
    after: dict[int, float] = {}

    def flush() -> None:
        nonlocal step, pending
        if pending:
            log_.steps.append(fn(model, step, pending, buffer, cfg, rng))
            step += 1
            pending = []

    def checkpoint(phase: int) -> None:
        flush()
        upto = domains[: phase + 1] if cfg.mode != "joint" else domains
        res = evaluate(model, upto, eval_episodes, cfg, shape, ood, eval_seed)
        log_.evals.append(EvalRow(step, phase, [float(a) for a in res.mean]))
        after[phase] = float(res.mean[phase])

    try:
        for t, ep in stream:
            if model is None:
                model = Model.create(ep.support_x.shape[1], cfg)
            phase_change = (ep.domain_id != current_domain and current_domain is not None) \
                if cfg.mode != "joint" else seen in boundaries and seen > 0
            if phase_change:
                checkpoint(current_domain if cfg.mode != "joint" else len(after))
            current_domain = ep.domain_id
            pending.append(ep)
            seen += 1
            if len(pending) == group:
                flush()
        if current_domain is None:
            return model, log_
        flush()
        last = current_domain if cfg.mode != "joint" else len(domains) - 1
        log_.final = evaluate(model, domains[: last + 1], eval_episodes, cfg, shape, ood, eval_seed)
        log_.evals.append(EvalRow(step, -1, [float(a) for a in log_.final.mean]))
        log_.forgetting = forgetting_from(after, log_.final.mean, last)
    except OrderLabError as exc:
        log.error("training aborted at step %d: %s", step, exc)
        log_.error = f"step {step}: {exc}"
    return model, log_
