"""Experiment harness: configuration, run orchestration and metric files.

A configuration is a JSON object with three sections::

    {"trainer": {...}, "stream": {...}, "experiment": {...}}

Every run is identified by (variant, sweep axis, sweep point, seed) and is
fully determined by them, so outputs are byte-identical across repeats and
independent of how many worker processes execute the grid.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, OrderLabError
from .orderloop import LossBreakdown, TrainerConfig, joint_stream, train_stream
from .taskstream import EpisodeShape, make_domains, make_ood_pool, make_stream

log = logging.getLogger(__name__)

# variant name -> (trainer mode, overrides)
VARIANTS: dict[str, tuple[str, dict[str, Any]]] = {
    "order": ("order", {}),
    "order_nomi": ("order", {"lam": 0.0, "ood_filter": False}),
    "seq": ("seq", {}),
    "er": ("er", {}),
    "joint": ("joint", {}),
}

STEP_COLUMNS = ["run_id", "variant", "axis", "point", "seed", "t", "domain_id", "meta_current",
                "mi_ood", "mi_id", "meta_memory", "mi_memory", "ot", "total"]
EVAL_COLUMNS = ["run_id", "variant", "axis", "point", "seed", "t", "phase", "domain_id", "accuracy"]
RUN_COLUMNS = ["run_id", "variant", "axis", "point", "seed", "final_accuracy", "forgetting"]


@dataclass(frozen=True)
class TrainerSection:
    lam: float = 1e-5
    beta: float = 0.003
    lr: float = 1e-3
    meta_batch: int = 2
    memory_capacity: int = 200
    memory_batch: int = 2
    ood_multiplier: float = 1.0
    aux_steps: int = 1
    aux_lr: float = 1e-3
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 16


@dataclass(frozen=True)
class StreamSection:
    n_domains: int = 3
    tasks_per_domain: int = 300
    dim: int = 16
    n_classes: int = 20
    n_heldout: int = 10
    radius: float = 4.0
    subspace_dim: int = 4
    class_std: float = 1.0
    ood_offset: float = 2.0
    ood_clusters: int = 3
    N: int = 5
    K: int = 1
    Z: int = 10
    R: int = 50
    Q_size: int = 15
    eval_episodes: int = 100
    eval_seed: int = 12345
    domain_seed: int = 0


@dataclass(frozen=True)
class ExperimentSection:
    modes: tuple[str, ...] = ("seq", "er", "order", "joint")
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    R_values: tuple[int, ...] = (10, 50, 100)
    ood_modes: tuple[str, ...] = ("order", "order_nomi")
    memory_sizes: tuple[int, ...] = (10, 50, 200)
    memory_modes: tuple[str, ...] = ("order",)
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    trainer: TrainerSection = TrainerSection()
    stream: StreamSection = StreamSection()
    experiment: ExperimentSection = ExperimentSection()

    def trainer_config(self, variant: str, seed: int, **extra: Any) -> TrainerConfig:
        mode, overrides = VARIANTS[variant]
        kw = asdict(self.trainer)
        kw["hidden"] = tuple(kw["hidden"])
        kw.update(overrides)
        kw.update(extra)
        return TrainerConfig(mode=mode, seed=seed, **kw)

    def shape(self, R: int | None = None) -> EpisodeShape:
        s = self.stream
        return EpisodeShape(s.N, s.K, s.Z, s.R if R is None else R, s.Q_size)


# JSON spelling of fields whose Python name differs
_ALIASES = {"trainer": {"lam": "lambda"}}
_SECTIONS = {"trainer": TrainerSection, "stream": StreamSection, "experiment": ExperimentSection}


def _json_name(section: str, name: str) -> str:
    return _ALIASES.get(section, {}).get(name, name)


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError(f"{path}: expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        proto = default[0] if default else 0
        return tuple(_coerce(f"{path}[{i}]", v, proto) for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported field type")


def _validate(cfg: ExperimentConfig) -> None:
    t, s, e = cfg.trainer, cfg.stream, cfg.experiment
    nonneg = {"trainer.lambda": t.lam, "trainer.beta": t.beta, "trainer.lr": t.lr,
              "trainer.memory_capacity": t.memory_capacity, "trainer.memory_batch": t.memory_batch,
              "trainer.ood_multiplier": t.ood_multiplier, "trainer.aux_steps": t.aux_steps,
              "trainer.aux_lr": t.aux_lr, "stream.R": s.R, "stream.ood_offset": s.ood_offset}
    positive = {"trainer.meta_batch": t.meta_batch, "trainer.embed_dim": t.embed_dim,
                "stream.n_domains": s.n_domains, "stream.tasks_per_domain": s.tasks_per_domain,
                "stream.dim": s.dim, "stream.n_classes": s.n_classes, "stream.n_heldout": s.n_heldout,
                "stream.radius": s.radius, "stream.subspace_dim": s.subspace_dim,
                "stream.class_std": s.class_std, "stream.ood_clusters": s.ood_clusters,
                "stream.N": s.N, "stream.K": s.K, "stream.Q_size": s.Q_size,
                "stream.eval_episodes": s.eval_episodes}
    for path, v in nonneg.items():
        if v < 0:
            raise ConfigError(f"{path}: must be >= 0, got {v!r}")
    for path, v in positive.items():
        if v <= 0:
            raise ConfigError(f"{path}: must be > 0, got {v!r}")
    if s.Z < 0:
        raise ConfigError(f"stream.Z: must be >= 0, got {s.Z!r}")
    if s.N > min(s.n_classes, s.n_heldout):
        raise ConfigError("stream.N: exceeds the number of classes per domain")
    if s.subspace_dim > s.dim:
        raise ConfigError("stream.subspace_dim: exceeds stream.dim")
    if any(h <= 0 for h in t.hidden):
        raise ConfigError("trainer.hidden: widths must be > 0")
    for name in ("modes", "seeds", "R_values", "ood_modes", "memory_sizes", "memory_modes"):
        if not getattr(e, name):
            raise ConfigError(f"experiment.{name}: must be non-empty")
    for name in ("modes", "ood_modes", "memory_modes"):
        bad = [m for m in getattr(e, name) if m not in VARIANTS]
        if bad:
            raise ConfigError(f"experiment.{name}: unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
    if any(r < 0 for r in e.R_values):
        raise ConfigError("experiment.R_values: must be >= 0")
    if any(m < 0 for m in e.memory_sizes):
        raise ConfigError("experiment.memory_sizes: must be >= 0")


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(obj) - set(_SECTIONS))
    parts = {}
    for sec, cls in _SECTIONS.items():
        raw = obj.get(sec, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{sec}: expected an object")
        known = {_json_name(sec, f.name): f for f in fields(cls)}
        unknown += [f"{sec}.{k}" for k in sorted(set(raw) - set(known))]
        kw = {f.name: _coerce(f"{sec}.{key}", raw[key], f.default)
              for key, f in known.items() if key in raw}
        parts[sec] = cls(**kw)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = ExperimentConfig(**parts)
    _validate(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for sec in _SECTIONS:
        part = getattr(cfg, sec)
        out[sec] = {_json_name(sec, f.name): (list(v) if isinstance(v, tuple) else v)
                    for f in fields(part) for v in [getattr(part, f.name)]}
    return out


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a JSON config; an empty file means all defaults."""
    text = Path(path).read_text()
    if not text.strip():
        return config_from_dict({})
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(obj)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


@dataclass(frozen=True)
class Job:
    variant: str
    seed: int
    axis: str = "base"
    point: int = 0

    @property
    def run_id(self) -> str:
        return f"{self.variant}/{self.axis}={self.point}/seed={self.seed}"


@dataclass
class RunRecord:
    job: Job
    steps: list[LossBreakdown] = field(default_factory=list)
    evals: list[tuple[int, int, list[float]]] = field(default_factory=list)
    final: list[float] = field(default_factory=list)
    forgetting: float = 0.0
    error: str | None = None

    @property
    def final_accuracy(self) -> float:
        return float(np.mean(self.final)) if self.final else float("nan")


def run_one(cfg: ExperimentConfig, job: Job) -> RunRecord:
    """Train one variant on one stream; never raises for training failures."""
    s = cfg.stream
    extra = {"memory_capacity": job.point} if job.axis == "memory" else {}
    R = job.point if job.axis == "R" else None
    rec = RunRecord(job)
    try:
        tcfg = cfg.trainer_config(job.variant, job.seed, **extra)
        shape = cfg.shape(R)
        domains = make_domains(s.n_domains, s.dim, s.n_classes, s.n_heldout, s.radius,
                               s.subspace_dim, s.class_std, s.domain_seed)
        pool = make_ood_pool(domains, s.ood_offset, s.radius, s.ood_clusters, s.class_std,
                             s.domain_seed)
        boundaries: tuple[int, ...] = ()
        if tcfg.mode == "joint":
            # same number of optimizer steps and tasks per step as the replay modes
            per = s.tasks_per_domain * (tcfg.meta_batch + tcfg.memory_batch) // tcfg.meta_batch
            stream = joint_stream(domains, per * s.n_domains, job.seed, shape, pool)
            boundaries = tuple(per * (d + 1) for d in range(s.n_domains - 1))
        else:
            stream = make_stream(domains, s.tasks_per_domain, job.seed, shape, pool)
        _, tlog = train_stream(stream, tcfg, domains, shape, pool, s.eval_episodes, s.eval_seed,
                               boundaries)
    except OrderLabError as exc:
        rec.error = str(exc)
        return rec
    rec.steps = tlog.steps
    rec.evals = [(e.t, e.phase, e.accuracies) for e in tlog.evals]
    rec.error = tlog.error
    if tlog.final is not None and tlog.error is None:
        rec.final = [float(a) for a in tlog.final.mean]
        rec.forgetting = tlog.forgetting
    elif rec.error is None:
        rec.error = "empty stream"
    return rec


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ORDERLAB_THREADS", "1")))
    except ValueError:
        return 1


def execute(cfg: ExperimentConfig, jobs: Sequence[Job]) -> list[RunRecord]:
    """Run every job; results come back in job order whatever the parallelism."""
    n = min(_threads(), len(jobs))
    if n <= 1:
        return [run_one(cfg, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run_one, [cfg] * len(jobs), jobs))


def _fmt(v: Any) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _key(job: Job) -> list[Any]:
    return [job.run_id, job.variant, job.axis, job.point, job.seed]


def write_records(records: Sequence[RunRecord], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    step_rows, eval_rows, run_rows = [], [], []
    for rec in records:
        k = _key(rec.job)
        for b in rec.steps:
            step_rows.append(k + [b.t, b.domain_id, b.meta_current, b.mi_ood, b.mi_id,
                                  b.meta_memory, b.mi_memory, b.ot, b.total])
        for t, phase, accs in rec.evals:
            eval_rows += [k + [t, phase, d, a] for d, a in enumerate(accs)]
        if rec.error is None:
            run_rows.append(k + [rec.final_accuracy, rec.forgetting])
    _write_csv(out_dir / "metrics.csv", STEP_COLUMNS, step_rows)
    _write_csv(out_dir / "evals.csv", EVAL_COLUMNS, eval_rows)
    _write_csv(out_dir / "runs.csv", RUN_COLUMNS, run_rows)


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% t-interval half-width (0 for fewer than two values)."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        return float("nan"), float("nan")
    if len(x) < 2:
        return float(x.mean()), 0.0
    half = stats.t.ppf(0.975, len(x) - 1) * x.std(ddof=1) / np.sqrt(len(x))
    return float(x.mean()), float(half)


def summarize_rows(rows: Sequence[dict[str, str]]) -> dict[str, Any]:
    """Group ``runs.csv`` rows by (variant, axis, point) and reduce over seeds."""
    groups: dict[tuple[str, str, int], list[dict[str, str]]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["axis"], int(r["point"])), []).append(r)
    out = []
    for (variant, axis, point), rs in groups.items():
        acc = [float(r["final_accuracy"]) for r in rs]
        fg = [float(r["forgetting"]) for r in rs]
        am, ac = mean_ci(acc)
        fm, fc = mean_ci(fg)
        out.append({"variant": variant, "axis": axis, "point": point,
                    "seeds": [int(r["seed"]) for r in rs], "final_accuracy_mean": am,
                    "final_accuracy_ci95": ac, "forgetting_mean": fm, "forgetting_ci95": fc})
    return {"groups": out}


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _finish(records: Sequence[RunRecord], out_dir: Path, extra: dict[str, Any] | None = None
            ) -> dict[str, Any]:
    write_records(records, out_dir)
    summary = summarize_rows(read_csv(out_dir / "runs.csv"))
    summary["failures"] = [{"run_id": r.job.run_id, "error": r.error} for r in records if r.error]
    if extra:
        summary.update(extra)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for f in summary["failures"]:
        log.error("run %s failed: %s", f["run_id"], f["error"])
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> int:
    """One run per (variant, seed); returns 0 when every run succeeded."""
    out = Path(out_dir or cfg.experiment.out_dir)
    jobs = [Job(v, s) for v in cfg.experiment.modes for s in cfg.experiment.seeds]
    summary = _finish(execute(cfg, jobs), out)
    return 1 if summary["failures"] else 0


def _sweep(cfg: ExperimentConfig, axis: str, points: Sequence[int], modes: Sequence[str],
           out: Path) -> dict[str, Any]:
    if not points:
        raise ConfigError(f"sweep over {axis} needs at least one point")
    jobs = [Job(v, s, axis, int(p)) for v in modes for p in points for s in cfg.experiment.seeds]
    records = execute(cfg, jobs)
    write_records(records, out)
    summary = summarize_rows(read_csv(out / "runs.csv"))
    table = [[g["variant"], g["point"], g["final_accuracy_mean"], g["final_accuracy_ci95"],
              len(g["seeds"])] for g in summary["groups"]]
    _write_csv(out / f"{axis}_table.csv", ["variant", axis, "accuracy_mean", "accuracy_ci95", "n"],
               table)
    slopes, changes = {}, {}
    for v in modes:
        pts = [(g["point"], g["final_accuracy_mean"]) for g in summary["groups"] if g["variant"] == v]
        if len(pts) >= 2:
            xs, ys = zip(*pts)
            slopes[v] = float(np.polyfit(xs, ys, 1)[0])
            changes[v] = float(ys[-1] - ys[0])
    summary[f"{axis}_slope"] = slopes
    summary[f"{axis}_change"] = changes
    summary["failures"] = [{"run_id": r.job.run_id, "error": r.error} for r in records if r.error]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def sweep_ood(cfg: ExperimentConfig, R_values: Sequence[int] | None = None,
              out_dir: str | os.PathLike | None = None) -> dict[str, Any]:
    """Accuracy per (variant, R); ``R_change`` is accuracy at the last R minus the first."""
    R_values = cfg.experiment.R_values if R_values is None else R_values
    return _sweep(cfg, "R", R_values, cfg.experiment.ood_modes, Path(out_dir or cfg.experiment.out_dir))


def sweep_memory(cfg: ExperimentConfig, sizes: Sequence[int] | None = None,
                 out_dir: str | os.PathLike | None = None) -> dict[str, Any]:
    sizes = cfg.experiment.memory_sizes if sizes is None else sizes
    return _sweep(cfg, "memory", sizes, cfg.experiment.memory_modes,
                  Path(out_dir or cfg.experiment.out_dir))


def with_overrides(cfg: ExperimentConfig, modes: Sequence[str] | None = None,
                   seeds: Sequence[int] | None = None, out_dir: str | None = None) -> ExperimentConfig:
    exp = cfg.experiment
    if modes:
        bad = [m for m in modes if m not in VARIANTS]
        if bad:
            raise ConfigError(f"--mode: unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
        exp = replace(exp, modes=tuple(modes), ood_modes=tuple(modes), memory_modes=tuple(modes))
    if seeds:
        exp = replace(exp, seeds=tuple(seeds))
    if out_dir:
        exp = replace(exp, out_dir=out_dir)
    return replace(cfg, experiment=exp)
