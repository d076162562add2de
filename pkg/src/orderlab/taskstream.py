"""Synthetic evolving task distributions, episodes and the reservoir memory.

Every domain is a Gaussian mixture whose class means live in a
domain-specific low-dimensional subspace of the input space.  The subspaces
of successive domains are disjoint (while dimensions last), so a feature
extractor tuned to the latest domain tends to squash the directions that
carried the earlier domains' class information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError

OOD_CLASS_BASE = 1_000_000


@dataclass(frozen=True)
class DomainSpec:
    """One task distribution: train-class means plus held-out (test) class means."""

    domain_id: int
    class_means: np.ndarray
    heldout_means: np.ndarray
    class_cov_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.class_cov_scale < 0:
            raise ConfigError("class_cov_scale must be non-negative")
        if self.class_means.ndim != 2 or self.heldout_means.shape[1:] != self.class_means.shape[1:]:
            raise ConfigError("class means must be 2-D arrays of equal width")

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def means(self, split: str = "train") -> np.ndarray:
        return self.class_means if split == "train" else self.heldout_means


@dataclass(frozen=True)
class OodPool:
    """Gaussian clusters that sit far away from every domain class mean."""

    means: np.ndarray
    std: float = 1.0

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Equal share from each cluster (remainder spread over the first ones)."""
        k = self.means.shape[0]
        counts = np.full(k, n // k)
        counts[: n % k] += 1
        cluster = np.repeat(np.arange(k), counts)
        x = self.means[cluster] + self.std * rng.standard_normal((n, self.means.shape[1]))
        return x, OOD_CLASS_BASE + cluster


def make_domains(n_domains: int = 3, dim: int = 16, n_classes: int = 20, n_heldout: int = 10,
                 radius: float = 4.0, subspace_dim: int = 4, std: float = 1.0,
                 seed: int = 0) -> list[DomainSpec]:
    """Class means on a sphere of ``radius`` inside per-domain subspaces.

    A random rotation of the input space is cut into blocks of
    ``subspace_dim`` columns; domain ``d`` uses block ``d`` (wrapping around
    when the blocks run out).
    """
    if n_domains < 1:
        raise ConfigError("need at least one domain")
    if not 1 <= subspace_dim <= dim:
        raise ConfigError("subspace_dim must lie in [1, dim]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    n_blocks = max(1, dim // subspace_dim)
    specs = []
    for d in range(n_domains):
        b = d % n_blocks
        block = basis[:, b * subspace_dim:(b + 1) * subspace_dim]
        dirs = rng.standard_normal((n_classes + n_heldout, subspace_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = radius * dirs @ block.T
        specs.append(DomainSpec(d, means[:n_classes], means[n_classes:], std,
                                int(rng.integers(2**31))))
    return specs


def make_ood_pool(domains: Sequence[DomainSpec], offset_multiplier: float = 2.0,
                  radius: float = 4.0, n_clusters: int = 3, std: float = 1.0,
                  seed: int = 0) -> OodPool:
    """OOD cluster means at norm ``(1 + offset_multiplier) * radius``.

    Since every class mean has norm ``radius``, the triangle inequality keeps
    each OOD mean at least ``offset_multiplier * radius`` away from all of them.
    """
    if not domains:
        raise ConfigError("need at least one domain")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    dim = domains[0].dim
    dirs = rng.standard_normal((n_clusters, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return OodPool((1.0 + offset_multiplier) * radius * dirs, std)


@dataclass(frozen=True)
class Episode:
    """One semi-supervised task {S, U, Q}.

    Labels are local to the episode (0..N-1, in the order of ``classes``,
    which holds the sorted global class ids).  ``unlabeled_ood`` and
    ``unlabeled_class`` are hidden ground truth for scoring OOD detection only.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_ood: np.ndarray
    unlabeled_class: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: np.ndarray
    domain_id: int

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def to_json(self) -> dict:
        return {
            "domain_id": int(self.domain_id),
            "classes": [int(c) for c in self.classes],
            "support": [[x.tolist(), int(y)] for x, y in zip(self.support_x, self.support_y)],
            "unlabeled": [[x.tolist(), {"kind": "ood" if o else "id", "class": int(c)}]
                          for x, o, c in zip(self.unlabeled_x, self.unlabeled_ood, self.unlabeled_class)],
            "query": [[x.tolist(), int(y)] for x, y in zip(self.query_x, self.query_y)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        def mat(rows: list, width: int) -> np.ndarray:
            return np.array([r[0] for r in rows], dtype=np.float64).reshape(len(rows), width)

        width = len(obj["support"][0][0])
        u = obj["unlabeled"]
        return cls(
            mat(obj["support"], width),
            np.array([r[1] for r in obj["support"]], dtype=np.int64),
            mat(u, width),
            np.array([r[1]["kind"] == "ood" for r in u], dtype=bool),
            np.array([r[1]["class"] for r in u], dtype=np.int64),
            mat(obj["query"], width),
            np.array([r[1] for r in obj["query"]], dtype=np.int64),
            np.array(obj["classes"], dtype=np.int64),
            int(obj["domain_id"]),
        )


def save_episode(ep: Episode, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(ep.to_json(), fh, indent=1)


def load_episode(path: str) -> Episode:
    with open(path) as fh:
        return Episode.from_json(json.load(fh))


def sample_episode(domain: DomainSpec, N: int, K: int, Z: int, R: int, Q_size: int,
                   ood: OodPool | None, rng: np.random.Generator | np.random.SeedSequence,
                   split: str = "train") -> Episode:
    """Draw an N-way K-shot episode with N*Z ID and R OOD unlabeled points."""
    means = domain.means(split)
    if N > means.shape[0]:
        raise ConfigError(f"N={N} exceeds the {means.shape[0]} classes of domain {domain.domain_id}")
    if min(N, K, Q_size) < 1 or Z < 0 or R < 0:
        raise ConfigError("episode sizes must be positive (Z, R may be zero)")
    if R > 0 and ood is None:
        raise ConfigError("R > 0 requires an OOD pool")
    seq = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(
        rng.integers(2**63))
    r_cls, r_lab, r_unl, r_ood, r_mix = (np.random.default_rng(s) for s in seq.spawn(5))
    classes = np.sort(r_cls.choice(means.shape[0], size=N, replace=False))
    dim, std = means.shape[1], domain.class_cov_scale

    def draw(r: np.random.Generator, per_class: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(N), per_class)
        return means[classes[y]] + std * r.standard_normal((len(y), dim)), y

    # labeled (support + query) and unlabeled draws come from separate substreams
    sx, sy = draw(r_lab, K)
    qx, qy = draw(r_lab, Q_size)
    ux, uy = draw(r_unl, Z)
    u_cls = classes[uy]
    if R > 0:
        ox, o_cls = ood.sample(R, r_ood)
        ux = np.vstack([ux, ox])
        u_cls = np.concatenate([u_cls, o_cls])
    is_ood = np.arange(len(ux)) >= N * Z
    perm = r_mix.permutation(len(ux))
    return Episode(sx, sy, ux[perm], is_ood[perm], u_cls[perm], qx, qy,
                   classes.astype(np.int64), domain.domain_id)


@dataclass(frozen=True)
class EpisodeShape:
    N: int = 5
    K: int = 1
    Z: int = 10
    R: int = 50
    Q_size: int = 15


def episode_seed(seed: int, t: int, *tags: int) -> np.random.SeedSequence:
    """Counter-based seed: depends only on (seed, t, tags), never on call order."""
    return np.random.SeedSequence([int(seed), int(t), *[int(x) for x in tags]])


def make_stream(specs: Sequence[DomainSpec], tasks_per_domain: int, seed: int,
                shape: EpisodeShape = EpisodeShape(),
                ood: OodPool | None = None) -> Iterator[tuple[int, Episode]]:
    """Yield ``(t, episode)`` for every domain in order, ``tasks_per_domain`` each."""
    if not specs:
        raise ConfigError("empty domain list")
    if tasks_per_domain < 1:
        raise ConfigError("tasks_per_domain must be >= 1")
    t = 0
    for spec in specs:
        for _ in range(tasks_per_domain):
            ep = sample_episode(spec, shape.N, shape.K, shape.Z, shape.R, shape.Q_size,
                                ood, episode_seed(seed, t))
            yield t, ep
            t += 1


@dataclass
class FeatureSnapshot:
    """Embeddings of a stored episode's S and detected U_id, taken at storage time.

    Rows ``[0, n_support)`` are the support points in order; the remaining
    rows follow ``unlabeled_idx`` into ``Episode.unlabeled_x``.
    """

    feats: np.ndarray
    n_support: int
    unlabeled_idx: np.ndarray

    def __post_init__(self) -> None:
        if self.feats.shape[0] != self.n_support + len(self.unlabeled_idx):
            raise ContractError("snapshot rows != |S| + |U_id|")


@dataclass
class MemoryBuffer:
    capacity: int
    slots: list[Episode] = field(default_factory=list)
    snapshots: list[FeatureSnapshot] = field(default_factory=list)
    seen_count: int = 0

    def __len__(self) -> int:
        return len(self.slots)


def reservoir_offer(buffer: MemoryBuffer, episode: Episode, snapshot: FeatureSnapshot,
                    rng: np.random.Generator) -> bool:
    """Algorithm R at the task level; returns whether the episode was stored."""
    if snapshot.n_support != len(episode.support_y):
        raise ContractError("snapshot does not match episode")
    buffer.seen_count += 1
    if buffer.capacity <= 0:
        return False
    if len(buffer.slots) < buffer.capacity:
        buffer.slots.append(episode)
        buffer.snapshots.append(snapshot)
        return True
    j = int(rng.random() * buffer.seen_count)
    if j < buffer.capacity:
        buffer.slots[j] = episode
        buffer.snapshots[j] = snapshot
        return True
    return False


def sample_memory_batch(buffer: MemoryBuffer, batch_size: int,
                        rng: np.random.Generator) -> list[tuple[Episode, FeatureSnapshot]]:
    """Uniform draw without replacement; everything if the buffer is smaller."""
    if batch_size < 0:
        raise ContractError("batch_size must be >= 0")
    n = len(buffer.slots)
    if n == 0 or batch_size == 0:
        return []
    if batch_size >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
    return [(buffer.slots[i], buffer.snapshots[i]) for i in idx]
