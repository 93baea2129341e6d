#!/usr/bin/env python3
"""Speedup experiment on well-separated clustered data.

Builds a large Gaussian-cluster dataset at a bandwidth where the near
neighbors dominate the KDE, then compares the exact estimator, permuted
sampling at its fastest error-qualifying sample count, and the combined
estimator.  Prints one JSON line per estimator.
"""

import argparse
import json
import math

import numpy as np

from deann import Dataset, KernelSpec, domination_delta, ivf_build, naive_kde
from deann.harness import ExperimentSpec, _evaluate_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--components", type=int, default=100)
    ap.add_argument("--bandwidth", type=float, default=0.5)
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--budget", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    opts = ap.parse_args()

    rng = np.random.default_rng(opts.seed)
    centers = rng.normal(0.0, 10.0, size=(opts.components, opts.d))
    pts = centers[np.arange(opts.n) % opts.components] + rng.normal(size=(opts.n, opts.d))
    ds = Dataset.from_array(pts.astype(np.float32))
    kernel = KernelSpec("exponential", opts.bandwidth)
    queries = centers[rng.integers(0, opts.components, size=opts.queries)] \
        + rng.normal(size=(opts.queries, opts.d))
    exact = naive_kde(ds, kernel, queries).values
    delta = max(domination_delta(ds, kernel, queries[i], 2 * opts.n // opts.components)
                for i in range(5))
    print(json.dumps({"n": opts.n, "d": opts.d, "bandwidth": opts.bandwidth,
                      "domination_delta": delta}))

    def run(estimator, params, cache=None, timing=True):
        spec = ExperimentSpec(estimator=estimator, kernel=kernel,
                              seed=opts.seed, repetitions=1)
        row, _ = _evaluate_config(spec, ds, queries, exact, params, timing, cache,
                                  None, None)
        return row

    rows = [run("naive", {})]

    m = 1024
    rsp = None
    while m < opts.n:
        if run("rsp", {"m": m}, timing=False).mean_rel_err <= opts.budget:
            rsp = run("rsp", {"m": m})
            break
        m = int(m * math.sqrt(2))
    rows.append(rsp if rsp is not None else run("rsp", {"m": opts.n}))

    index = ivf_build(ds, opts.components, seed=opts.seed)
    cache = {(opts.components, opts.seed): (index, 0.0)}
    per_cluster = opts.n // opts.components
    for k, m_s, n_probe in ((per_cluster // 4, 1000, 1), (per_cluster // 2, 2000, 2),
                            (per_cluster, 2000, 2)):
        params = {"k": k, "m": m_s, "n_clusters": opts.components, "n_probe": n_probe}
        if run("deannp", params, cache=cache, timing=False).mean_rel_err <= opts.budget:
            rows.append(run("deannp", params, cache=cache))
            break

    base = rows[0].mean_query_time_ms
    for row in rows:
        record = row.to_dict()
        record["speedup_vs_naive"] = base / row.mean_query_time_ms
        print(json.dumps(record))


if __name__ == "__main__":
    main()
