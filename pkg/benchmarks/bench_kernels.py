"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--users 2000 --items 3000 --interactions 100000]
"""
import argparse
import time

import numpy as np

from advrec import kernels
from advrec.dataset import synthetic_dataset
from advrec.mf import TrainConfig, all_triples, init_params, train_bpr


def bench_gradient(backend, params, triples, repeats):
    gP, gQ = np.zeros_like(params.P), np.zeros_like(params.Q)
    t0 = time.perf_counter()
    for _ in range(repeats):
        gP[:] = 0
        gQ[:] = 0
        kernels.bpr_accumulate(params.P, params.Q, *triples, 0.0, gP, gQ, backend=backend)
    return (time.perf_counter() - t0) / repeats


def bench_epochs(backend, ds, epochs):
    kernels._impl = kernels._load(backend)
    t0 = time.perf_counter()
    train_bpr(ds, TrainConfig(epochs=epochs, batch_size=512, lr=0.01, d=64, checkpoint_epochs=()))
    return (time.perf_counter() - t0) / epochs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--items", type=int, default=3000)
    ap.add_argument("--interactions", type=int, default=100_000)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    ds = synthetic_dataset(seed=0, num_users=args.users, num_items=args.items,
                           num_interactions=args.interactions)
    params = init_params(ds.num_users, ds.num_items, 64, seed=0)
    triples = all_triples(ds, 0)
    print(f"dataset: {ds.num_users} users, {ds.num_items} items, {ds.num_interactions} interactions")
    print(f"{'backend':<8} {'full-gradient s':>16} {'epoch s':>10}")
    default = kernels._impl
    results = {}
    for b in kernels.available_backends():
        g = bench_gradient(b, params, triples, args.repeats)
        e = bench_epochs(b, ds, args.epochs)
        results[b] = (g, e)
        print(f"{b:<8} {g:>16.4f} {e:>10.3f}")
    kernels._impl = default
    if len(results) == 2:
        (cg, ce), (pg, pe) = results["cython"], results["python"]
        print(f"speedup: gradient {pg / cg:.1f}x, epoch {pe / ce:.1f}x")


if __name__ == "__main__":
    main()
