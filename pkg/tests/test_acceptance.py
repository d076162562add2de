"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.

The desk-scale experiment criteria (6-8) train on the default synthetic stream
and take several minutes each on one core; their runs are shared through
module-scoped fixtures.
"""

import time

import numpy as np
import pytest
from scipy import stats

from orderlab.bench import config_from_dict, run_experiment, sweep_memory, sweep_ood
from orderlab.diagnostics import gaussian_mi, grad_check_suite, ood_eval, ot_check
from orderlab.taskstream import EpisodeShape, MemoryBuffer, reservoir_offer

GRAD_INSTANCES, GRAD_SECONDS = 20, 60.0
OT_INSTANCES, OT_SECONDS = 200, 30.0
MI_TOL, MI_BAND, MI_SECONDS = 0.05, 0.15, 180.0
OOD_MIN, OOD_EPISODES, OOD_OFFSET_STDS = 0.9, 200, 8.0
RESERVOIR_CASES, RESERVOIR_TRIALS, RESERVOIR_SE = ((5, 50), (200, 1000)), 10_000, 3.0
SEEDS = (1, 2, 3, 4, 5)
EXPERIMENT_SECONDS, CONFIDENCE = 15 * 60.0, 0.95


def test_criterion_1_gradients(report):
    t0 = time.perf_counter()
    results = grad_check_suite(GRAD_INSTANCES, seed=0)
    elapsed = time.perf_counter() - t0
    ok = all(r.passed and r.instances >= 20 for r in results) and elapsed < GRAD_SECONDS
    worst = ", ".join(f"{r.name}={r.max_rel_err:.1e}" for r in results)
    report(1, ok, f"max rel err {worst}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_ot_oracle(report):
    rep = ot_check(OT_INSTANCES, seed=0)
    ok = rep.passed and rep.seconds < OT_SECONDS
    report(2, ok, f"{rep.instances} instances, cost dev {rep.max_cost_dev:.1e}, marginals "
                  f"{rep.max_marginal_dev:.1e}, symmetry {rep.max_symmetry_dev:.1e}, identity "
                  f"{rep.max_identity_cost:.1e}; {rep.seconds:.1f}s")
    assert ok


def test_criterion_3_mi_sandwich(report, mi_bench_rows):
    rows, elapsed = mi_bench_rows
    checks = []
    for r in rows:
        assert r.truth == pytest.approx(gaussian_mi(r.rho))
        checks.append(r.lower <= r.truth + MI_TOL and r.upper >= r.truth - MI_TOL
                      and abs(r.lower - r.truth) <= MI_BAND and abs(r.upper - r.truth) <= MI_BAND)
    ok = [r.rho for r in rows] == [0.0, 0.5, 0.9] and all(checks) and elapsed < MI_SECONDS
    detail = "; ".join(f"rho={r.rho}: lower {r.lower:.3f} truth {r.truth:.4f} upper {r.upper:.3f}" for r in rows)
    report(3, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


def test_criterion_4_ood_detector(report):
    from test_oodgate import test_raising_multiplier_never_adds_ood, test_scale_invariance

    offset_multiplier = 2.0
    assert offset_multiplier * 4.0 >= OOD_OFFSET_STDS  # radius 4, class std 1
    res = ood_eval(OOD_EPISODES, seed=0, shape=EpisodeShape(K=5, R=100),
                   offset_multiplier=offset_multiplier)
    props = True
    try:
        test_raising_multiplier_never_adds_ood()
        test_scale_invariance()
    except AssertionError:
        props = False
    ok = res["precision"] >= OOD_MIN and res["recall"] >= OOD_MIN and props
    report(4, ok, f"precision {res['precision']:.3f}, recall {res['recall']:.3f} over {OOD_EPISODES} "
                  f"episodes (K=5, R=100); property tests {'pass' if props else 'fail'}")
    assert ok


def _inclusion_z(k: int, n: int, trials: int) -> np.ndarray:
    from test_taskstream import dummy_snapshot, tiny_episode

    eps = [tiny_episode(i) for i in range(n)]
    snaps = [dummy_snapshot(e) for e in eps]
    index = {id(e): i for i, e in enumerate(eps)}
    counts = np.zeros(n)
    rng = np.random.default_rng(np.random.SeedSequence([0, k, n]))
    for _ in range(trials):
        buf = MemoryBuffer(k)
        for e, s in zip(eps, snaps):
            reservoir_offer(buf, e, s, rng)
        for e in buf.slots:
            counts[index[id(e)]] += 1
    p = k / n
    return (counts / trials - p) / np.sqrt(p * (1 - p) / trials)


def test_criterion_5_reservoir(report):
    # Every item is checked against 3 standard errors.  A correct sampler puts
    # about 0.27% of items outside that band, so up to the 99% binomial quantile
    # of that count is allowed; the z-scores must also be jointly N(0, 1).
    ok, parts = True, []
    for k, n in RESERVOIR_CASES:
        z = _inclusion_z(k, n, RESERVOIR_TRIALS)
        outside = int((np.abs(z) > RESERVOIR_SE).sum())
        allowed = int(stats.binom.ppf(0.99, n, 2 * stats.norm.sf(RESERVOIR_SE)))
        p_chi = float(stats.chi2.sf(np.sum(z**2) * (n - 1) / n, n - 1))
        ok &= outside <= allowed and p_chi > 0.01
        parts.append(f"(k={k}, n={n}) {outside}/{n} items beyond 3 SE (allowed {allowed}), "
                     f"max |z| {np.abs(z).max():.2f}, chi2 p {p_chi:.2f}")
    report(5, ok, "; ".join(parts))
    assert ok


@pytest.fixture(scope="module")
def default_cfg():
    return config_from_dict({"experiment": {"seeds": list(SEEDS)}})


@pytest.fixture(scope="module")
def default_run(default_cfg, tmp_path_factory):
    import csv
    import json

    out = tmp_path_factory.mktemp("default")
    cfg = config_from_dict({"experiment": {"modes": ["seq", "er", "order", "joint"],
                                           "seeds": list(SEEDS)}})
    t0 = time.perf_counter()
    status = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    runs = list(csv.DictReader(open(out / "runs.csv")))
    summary = json.loads((out / "summary.json").read_text())
    return status, elapsed, runs, summary


def _per_seed(runs, variant, field):
    rows = sorted((int(r["seed"]), float(r[field])) for r in runs if r["variant"] == variant)
    return np.array([v for _, v in rows])


@pytest.mark.slow
def test_criterion_6_forgetting(report, default_run):
    status, elapsed, runs, summary = default_run
    acc = {v: _per_seed(runs, v, "final_accuracy").mean() for v in ("seq", "er", "order", "joint")}
    f_order = _per_seed(runs, "order", "forgetting")
    f_seq = _per_seed(runs, "seq", "forgetting")
    p = float(stats.ttest_rel(f_order, f_seq, alternative="less").pvalue)
    ok = (status == 0 and len(f_order) == len(SEEDS) and len(f_seq) == len(SEEDS)
          and acc["order"] >= acc["er"] >= acc["seq"]
          and acc["joint"] >= max(acc["order"], acc["er"], acc["seq"])
          and p < 1 - CONFIDENCE and elapsed < EXPERIMENT_SECONDS)
    report(6, ok, "final acc " + ", ".join(f"{v}={a:.4f}" for v, a in acc.items())
           + f"; forgetting order={f_order.mean():.4f} seq={f_seq.mean():.4f} (paired p={p:.1e}); "
           f"{elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_ood_robustness(report, default_cfg, default_run, tmp_path_factory):
    import csv

    summary = sweep_ood(default_cfg, [10, 100], tmp_path_factory.mktemp("sweep_ood"))
    acc = {(g["variant"], g["point"]): g["final_accuracy_mean"] for g in summary["groups"]}
    drop = {v: acc[(v, 10)] - acc[(v, 100)] for v in ("order", "order_nomi")}

    # OT-only ablation (no MI terms) at the default R=50 against plain replay
    out = tmp_path_factory.mktemp("ot_only")
    cfg = config_from_dict({"experiment": {"modes": ["order_nomi"], "seeds": list(SEEDS)}})
    status = run_experiment(cfg, out)
    ot_only = np.mean([float(r["final_accuracy"]) for r in csv.DictReader(open(out / "runs.csv"))])
    er = _per_seed(default_run[2], "er", "final_accuracy").mean()

    robust = not summary["failures"] and drop["order"] < drop["order_nomi"]
    beats = status == 0 and ot_only > er
    report(7, robust and beats,
           f"drop R=10->100 order={drop['order']:.4f} < no-MI={drop['order_nomi']:.4f}: "
           f"{'yes' if robust else 'no'}; OT-only {ot_only:.6f} > er {er:.6f} at R=50: "
           f"{'yes' if beats else 'no'}")
    assert robust and beats


@pytest.mark.slow
def test_criterion_8_memory_size(report, default_cfg, tmp_path_factory):
    sizes = [10, 50, 200]
    summary = sweep_memory(default_cfg, sizes, tmp_path_factory.mktemp("sweep_memory"))
    acc = [g["final_accuracy_mean"] for g in summary["groups"] if g["variant"] == "order"]
    ok = not summary["failures"] and len(acc) == 3 and all(a <= b for a, b in zip(acc, acc[1:]))
    report(8, ok, "order accuracy " + " -> ".join(f"{s}:{a:.4f}" for s, a in zip(sizes, acc)))
    assert ok


def test_criterion_9_determinism(report, tmp_path, monkeypatch):
    cfg = config_from_dict({"stream": {"tasks_per_domain": 20, "eval_episodes": 20},
                            "experiment": {"modes": ["seq", "er", "order", "joint"], "seeds": [1, 2]}})
    names = ("metrics.csv", "evals.csv", "runs.csv")
    outs = []
    for k, threads in enumerate(("1", "1", "2")):
        monkeypatch.setenv("ORDERLAB_THREADS", threads)
        run_experiment(cfg, tmp_path / str(k))
        outs.append([(tmp_path / str(k) / n).read_bytes() for n in names])
    ok = outs[0] == outs[1] == outs[2]
    report(9, ok, f"{len(names)} CSVs byte-identical across 3 repeats (1, 1, 2 workers): "
                  f"{'yes' if ok else 'no'}")
    assert ok
