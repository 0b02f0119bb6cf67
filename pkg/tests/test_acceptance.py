"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Tolerances and budgets are fixed here and not tuned per run:

 1  gradient check: max relative error < 1e-4 (h = 1e-5), 20 models, < 5 s
 2  metrics equal a brute-force oracle exactly, 50 instances, < 5 s
 3  100 random attacks: BIM/PGD |D|inf <= eps + 1e-6, FGSM row norms in {0, eps} +- 1e-6
 4  BIM(L=1, alpha=eps) == clip(FGSM) entrywise to 1e-6, 10 models
 5  PGD with zero init is bit-identical to BIM
 6  synthetic, eps=0.5, alpha=eps/4, L=25, 3 seeds: nDCG(BIM), nDCG(PGD) <= 0.5 nDCG(FGSM),
    nDCG(FGSM) < initial, < 10 min
 7  L=25: some eps* <= 0.2 on the sweep grid has BIM drop >= FGSM(0.5) drop, 3 seeds
 8  rho(AMF, FGSM) < rho(BPR-MF, FGSM), 3 seeds
 9  rho(0.2033, 0.1216) = 40.19 +- 0.01
10  k-core {2,3,4,6,8}: mean LS slope of rho vs density (BPR-MF, PGD) < 0, 3 seeds, < 15 min
11  two identical end-to-end runs give byte-identical report CSVs
12  model and delta files round-trip bit-exactly; truncations raise FormatError
"""
import dataclasses
import time

import numpy as np
import pytest

from advrec import runner
from advrec.adversarial import (
    Delta,
    PerturbationConfig,
    apply_delta,
    apr_train,
    clip_to_budget,
    fgsm_delta,
    iterative_delta,
    load_delta,
    save_delta,
)
from advrec.config import DEFAULTS, load_config
from advrec.dataset import ImplicitDataset, leave_one_out_split, synthetic_dataset
from advrec.errors import FormatError
from advrec.metrics import evaluate, fit_line, rho
from advrec.mf import ModelParams, Triples, bpr_gradients, load_params, save_params, train_bpr

from oracles import brute_metrics, brute_topk, bpr_loss_loops, numeric_gradient, relative_error

SEEDS = (0, 1, 2)


def _toy_dataset(rng, n_users, n_items, density=0.3):
    users, items = [], []
    for u in range(n_users):
        k = max(1, int(rng.binomial(n_items - 2, density)))
        for i in rng.choice(n_items, size=k, replace=False):
            users.append(u)
            items.append(int(i))
    ts = rng.permutation(len(users)).astype(np.int64)
    return ImplicitDataset.from_pairs(
        np.array(users), np.array(items),
        np.array([f"u{u}" for u in range(n_users)]), np.array([f"i{i}" for i in range(n_items)]),
        timestamps=ts,
    )


def _toy_model(rng, n_users, n_items, d, scale=0.5, dtype=np.float32):
    return ModelParams(rng.normal(0, scale, (n_users, d)).astype(dtype),
                       rng.normal(0, scale, (n_items, d)).astype(dtype))


def test_c01_gradient_check(acceptance_line):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        nu, ni, d = rng.integers(2, 6), rng.integers(3, 8), rng.integers(1, 5)
        params = _toy_model(rng, nu, ni, d, dtype=np.float64)
        n = int(rng.integers(1, 12))
        triples = Triples(rng.integers(nu, size=n), rng.integers(ni, size=n), rng.integers(ni, size=n))
        l2 = float(rng.choice([0.0, 0.01]))
        g = bpr_gradients(params, triples, l2)
        tri = list(zip(triples.users, triples.pos, triples.neg))
        nP, nQ = numeric_gradient(lambda P, Q: bpr_loss_loops(P, Q, tri, l2),
                                  params.P.copy(), params.Q.copy())
        worst = max(worst, relative_error(g.P, nP), relative_error(g.Q, nQ))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 5
    acceptance_line(1, "BPR gradient vs finite differences", ok,
                    f"max rel err {worst:.2e} < 1e-4, {elapsed:.2f}s < 5s")
    assert ok


def test_c02_metrics_match_bruteforce(acceptance_line):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    mismatches = []
    for case in range(50):
        nu, ni = int(rng.integers(2, 11)), int(rng.integers(12, 21))
        k = int(rng.choice([1, 3, 5, 10]))
        seen, test = {}, {}
        users, items = [], []
        for u in range(nu):
            order = rng.permutation(ni)
            n_seen = int(rng.integers(1, ni - 1))
            seen[u] = set(int(i) for i in order[:n_seen])
            test[u] = int(order[n_seen])
            users += [u] * n_seen
            items += sorted(seen[u])
        train = ImplicitDataset.from_pairs(np.array(users), np.array(items),
                                           np.array([f"u{u}" for u in range(nu)]),
                                           np.array([f"i{i}" for i in range(ni)]))
        # small integer embeddings: exact scores and frequent ties
        params = ModelParams(rng.integers(-2, 3, (nu, 3)).astype(np.float32),
                             rng.integers(-2, 3, (ni, 3)).astype(np.float32))
        got = evaluate(params, train, test, k).metrics()
        slates = brute_topk(params.P, params.Q, seen, k)
        want = brute_metrics(slates, test, seen, nu, k)
        for name, value in want.items():
            if got[name] != value:
                mismatches.append((case, name, got[name], value))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 5
    acceptance_line(2, "six metrics equal brute-force oracle", ok,
                    f"{len(mismatches)} mismatches over 50 instances, {elapsed:.2f}s < 5s")
    assert ok, mismatches[:5]


def test_c03_budget_respected(acceptance_line):
    rng = np.random.default_rng(303)
    worst_inf, worst_row = 0.0, 0.0
    for trial in range(100):
        nu, ni, d = int(rng.integers(3, 9)), int(rng.integers(5, 12)), int(rng.integers(1, 6))
        train = _toy_dataset(rng, nu, ni)
        params = _toy_model(rng, train.num_users, train.num_items, d)
        eps = float(10 ** rng.uniform(-3, 1))
        strategy = ("FGSM", "BIM", "PGD")[trial % 3]
        cfg = PerturbationConfig(strategy, epsilon=eps, iterations=int(rng.integers(1, 8)),
                                 seed=trial)
        if strategy == "FGSM":
            delta = fgsm_delta(params, train, eps, seed=trial)
            for norms in delta.row_norms():
                dist = np.minimum(np.abs(norms), np.abs(norms - eps))
                worst_row = max(worst_row, float(dist.max()))
        else:
            delta = iterative_delta(params, train, cfg)
            worst_inf = max(worst_inf, delta.max_abs() - eps)
    ok = worst_inf <= 1e-6 and worst_row <= 1e-6
    acceptance_line(3, "perturbation budgets", ok,
                    f"max(|D|inf - eps) {worst_inf:.2e} <= 1e-6, FGSM row-norm dev {worst_row:.2e} <= 1e-6")
    assert ok


def test_c04_bim_one_step_is_clipped_fgsm(acceptance_line):
    rng = np.random.default_rng(404)
    worst = 0.0
    for m in range(10):
        train = _toy_dataset(rng, 6, 10)
        params = _toy_model(rng, train.num_users, train.num_items, 4)
        eps = float(rng.uniform(0.05, 1.0))
        fg = fgsm_delta(params, train, eps, seed=m)
        clipped = clip_to_budget(apply_delta(params, fg), params, eps)
        bim = iterative_delta(params, train, PerturbationConfig("BIM", eps, alpha=eps, iterations=1, seed=m))
        worst = max(worst,
                    float(np.abs((clipped.P - params.P) - bim.dP).max()),
                    float(np.abs((clipped.Q - params.Q) - bim.dQ).max()))
    ok = worst <= 1e-6
    acceptance_line(4, "BIM(L=1, alpha=eps) equals clipped FGSM", ok, f"max diff {worst:.2e} <= 1e-6")
    assert ok


def test_c05_pgd_zero_init_is_bim(acceptance_line):
    rng = np.random.default_rng(505)
    identical = True
    for m in range(10):
        train = _toy_dataset(rng, 7, 12)
        params = _toy_model(rng, train.num_users, train.num_items, 5)
        kw = dict(epsilon=0.3, iterations=6, seed=m)
        bim = iterative_delta(params, train, PerturbationConfig("BIM", **kw))
        pgd = iterative_delta(params, train, PerturbationConfig("PGD", **kw), init_override="zeros")
        identical &= bim.dP.tobytes() == pgd.dP.tobytes() and bim.dQ.tobytes() == pgd.dQ.tobytes()
    acceptance_line(5, "PGD with zero init bit-identical to BIM", identical, "10 models, byte compare")
    assert identical


# --- desk-scale synthetic experiments ------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs():
    """BPR-MF and AMF trained with the default desk config on three synthetic seeds."""
    t0 = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        cfg = load_config(seed=seed)
        ds = runner.load_base_dataset(cfg)
        split = leave_one_out_split(ds, cfg.split_mode, cfg.split_seed)
        tcfg = dataclasses.replace(cfg.train, checkpoint_epochs=(cfg.apr.warm_start_epoch,))
        bpr = train_bpr(split.train, tcfg)
        amf = apr_train(split.train, bpr.checkpoints[cfg.apr.warm_start_epoch], cfg.apr, tcfg)
        runs[seed] = {"cfg": cfg, "split": split, "bpr": bpr.params, "amf": amf.params}
    runs["train_seconds"] = time.perf_counter() - t0
    return runs


def _ndcg(run, params, delta=None):
    if delta is not None:
        params = apply_delta(params, delta)
    return evaluate(params, run["split"].train, run["split"].test, run["cfg"].k).ndcg


def _attack(run, params, strategy, eps, iterations=25):
    train = run["split"].train
    seed = run["cfg"].seed
    if strategy == "FGSM":
        return fgsm_delta(params, train, eps, seed=seed)
    cfg = PerturbationConfig(strategy, epsilon=eps, alpha=eps / 4, iterations=iterations, seed=seed)
    return iterative_delta(params, train, cfg)


@pytest.mark.slow
def test_c06_iterative_attacks_dominate_fgsm(desk_runs, acceptance_line):
    t0 = time.perf_counter()
    vals = {"init": [], "FGSM": [], "BIM": [], "PGD": []}
    for seed in SEEDS:
        run = desk_runs[seed]
        vals["init"].append(_ndcg(run, run["bpr"]))
        for s in ("FGSM", "BIM", "PGD"):
            vals[s].append(_ndcg(run, run["bpr"], _attack(run, run["bpr"], s, 0.5)))
    m = {k: float(np.mean(v)) for k, v in vals.items()}
    elapsed = time.perf_counter() - t0 + desk_runs["train_seconds"]
    ok = (m["BIM"] <= 0.5 * m["FGSM"] and m["PGD"] <= 0.5 * m["FGSM"]
          and m["FGSM"] < m["init"] and elapsed < 600)
    acceptance_line(6, "BIM/PGD nDCG <= 0.5 x FGSM nDCG, FGSM < initial", ok,
                    f"init {m['init']:.4f}, FGSM {m['FGSM']:.4f}, BIM {m['BIM']:.4f} "
                    f"({m['BIM'] / m['FGSM']:.3f}x), PGD {m['PGD']:.4f} ({m['PGD'] / m['FGSM']:.3f}x), "
                    f"{elapsed:.0f}s < 600s")
    assert ok


@pytest.mark.slow
def test_c07_small_budget_bim_matches_fgsm(desk_runs, acceptance_line):
    grid = [e for e in DEFAULTS["sweeps"]["epsilon"] if e <= 0.2]
    init = [_ndcg(desk_runs[s], desk_runs[s]["bpr"]) for s in SEEDS]
    fgsm = [_ndcg(desk_runs[s], desk_runs[s]["bpr"], _attack(desk_runs[s], desk_runs[s]["bpr"], "FGSM", 0.5))
            for s in SEEDS]
    fgsm_drop = float(np.mean(np.subtract(init, fgsm)))
    drops = {}
    for eps in grid:
        after = [_ndcg(desk_runs[s], desk_runs[s]["bpr"], _attack(desk_runs[s], desk_runs[s]["bpr"], "BIM", eps))
                 for s in SEEDS]
        drops[eps] = float(np.mean(np.subtract(init, after)))
    winners = [e for e, dr in drops.items() if dr >= fgsm_drop]
    ok = bool(winners)
    detail = ", ".join(f"eps {e:g}: {d:.4f}" for e, d in drops.items())
    acceptance_line(7, "BIM at eps* <= 0.2 matches FGSM(0.5) damage", ok,
                    f"FGSM(0.5) drop {fgsm_drop:.4f}; BIM drops {detail}; eps* = {winners[:1]}")
    assert ok


@pytest.mark.slow
def test_c08_amf_more_robust_to_fgsm(desk_runs, acceptance_line):
    rhos = {"bpr": [], "amf": []}
    for seed in SEEDS:
        run = desk_runs[seed]
        for name in rhos:
            p = run[name]
            rhos[name].append(rho(_ndcg(run, p), _ndcg(run, p, _attack(run, p, "FGSM", 0.5))))
    b, a = float(np.mean(rhos["bpr"])), float(np.mean(rhos["amf"]))
    ok = a < b
    acceptance_line(8, "AMF rho under FGSM below BPR-MF rho", ok, f"AMF {a:.2f}% < BPR-MF {b:.2f}%")
    assert ok


def test_c09_rho_reference_value(acceptance_line):
    value = rho(0.2033, 0.1216)
    ok = abs(value - 40.19) <= 0.01
    acceptance_line(9, "rho(0.2033, 0.1216) = 40.19%", ok, f"{value:.4f} within 0.01")
    assert ok


@pytest.mark.slow
def test_c10_kcore_density_slope_negative(acceptance_line):
    t0 = time.perf_counter()
    slopes = []
    for seed in SEEDS:
        cfg = load_config(seed=seed, overrides=[
            "apr=null", "perturbations=[{strategy: PGD, epsilon: 0.5, iterations: 25}]",
            "sweeps.kcore=[2, 3, 4, 6, 8]",
        ])
        rows, _, _ = runner.kcore_rows(cfg)
        slopes.append(fit_line([(r["density"], r["rho"]) for r in rows]).slope)
    mean = float(np.mean(slopes))
    elapsed = time.perf_counter() - t0
    ok = mean < 0 and elapsed < 900
    acceptance_line(10, "k-core rho vs density slope negative (BPR-MF, PGD)", ok,
                    f"mean slope {mean:.1f} < 0 (per seed {', '.join(f'{s:.1f}' for s in slopes)}), "
                    f"{elapsed:.0f}s < 900s")
    assert ok


def _pipeline(out):
    cfg = load_config(output=out, overrides=["sweeps.epsilon=[0.01, 0.5, 2]", "sweeps.kcore=[2, 4]",
                                             "sweeps.kcore_epochs=60"])
    runner.cmd_prepare(cfg)
    runner.cmd_train(cfg)
    runner.cmd_attack(cfg)
    runner.cmd_kcore_study(cfg)
    runner.cmd_report(cfg.output)
    return {p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*.csv"))}


@pytest.mark.slow
def test_c11_end_to_end_deterministic(tmp_path, acceptance_line):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a)
    acceptance_line(11, "repeated end-to-end runs give byte-identical CSVs", same,
                    f"{len(a)} CSV files compared")
    assert same and len(a) >= 8


def test_c12_binary_roundtrip_and_truncation(tmp_path, acceptance_line):
    rng = np.random.default_rng(1212)
    params = _toy_model(rng, 7, 11, 5)
    delta = Delta(rng.normal(size=(7, 5)).astype(np.float32), rng.normal(size=(11, 5)).astype(np.float32),
                  epsilon=0.5, strategy="PGD", alpha=0.125, iterations_run=25, seed=3)
    save_params(params, tmp_path / "m.bin")
    save_delta(delta, tmp_path / "d.bin")
    back = load_params(tmp_path / "m.bin")
    dback = load_delta(tmp_path / "d.bin")
    exact = (back.P.tobytes() == params.P.tobytes() and back.Q.tobytes() == params.Q.tobytes()
             and dback.dP.tobytes() == delta.dP.tobytes() and dback.dQ.tobytes() == delta.dQ.tobytes()
             and (dback.strategy, dback.epsilon, dback.alpha, dback.iterations_run, dback.seed)
             == ("PGD", 0.5, 0.125, 25, 3))
    rejected = 0
    total = 0
    for name, loader in (("m.bin", load_params), ("d.bin", load_delta)):
        blob = (tmp_path / name).read_bytes()
        for cut in sorted(set(np.linspace(0, len(blob) - 1, 25).astype(int))):
            (tmp_path / "cut.bin").write_bytes(blob[:cut])
            total += 1
            try:
                loader(tmp_path / "cut.bin")
            except FormatError:
                rejected += 1
    ok = exact and rejected == total
    acceptance_line(12, "binary files round-trip; truncations rejected", ok,
                    f"bit-exact {exact}, {rejected}/{total} truncations raised FormatError")
    assert ok
