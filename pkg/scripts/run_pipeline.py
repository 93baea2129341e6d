#!/usr/bin/env python3
"""End-to-end demo of the experiment pipeline on a desk-scale dataset.

Generates a Gaussian mixture, splits it, fits a bandwidth to a target
median KDE, computes ground truth, grid-searches two estimators on the
validation set, evaluates the winners on the test set, and reports the
index recall.  Everything goes through the `deann` CLI, so this doubles
as a usage example.
"""

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path


def run(args):
    cmd = [sys.executable, "-m", "deann.cli", *map(str, args)]
    print("+", " ".join(cmd[2:]))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        print(proc.stderr, file=sys.stderr)
        raise SystemExit(proc.returncode)
    print(proc.stdout.rstrip())
    return proc.stdout


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--components", type=int, default=8)
    ap.add_argument("--target-mu", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--workdir", default=None, help="keep artifacts here instead of a temp dir")
    opts = ap.parse_args()

    ctx = tempfile.TemporaryDirectory() if opts.workdir is None else None
    work = Path(opts.workdir or ctx.name)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data.bin"

    run(["synth", "--kind", "gaussian_mixture", "--n", opts.n, "--d", opts.d,
         "--components", opts.components, "--seed", opts.seed, "--out", data])
    split_out = run(["split", "--dataset", data, "--out-prefix", work / "parts",
                     "--seed", opts.seed])
    paths = json.loads(split_out)["paths"]

    fit_out = run(["fit-bandwidth", "--dataset", paths["train"],
                   "--queries", paths["validation"], "--kernel", "exponential",
                   "--target-mu", opts.target_mu])
    bandwidth = json.loads(fit_out)["bandwidth"]

    gt_val = work / "gt_validation.json"
    gt_test = work / "gt_test.json"
    for queries, out in ((paths["validation"], gt_val), (paths["test"], gt_test)):
        run(["ground-truth", "--dataset", paths["train"], "--queries", queries,
             "--kernel", "exponential", "--bandwidth", bandwidth, "--out", out])

    for estimator in ("rsp", "deannp"):
        search = run(["grid-search", "--dataset", paths["train"],
                      "--queries", paths["validation"], "--ground-truth", gt_val,
                      "--estimator", estimator, "--repetitions", "3",
                      "--n-clusters", "64,128", "--n-probe", "1,5",
                      "--seed", opts.seed])
        selected = json.loads(search.strip().splitlines()[-1])["selected"]
        if selected is None:
            print(f"{estimator}: no configuration met the error budget")
            continue
        flags = []
        for name in ("k", "m", "n_clusters", "n_probe"):
            if selected[name] is not None:
                flags += [f"--{name.replace('_', '-')}", selected[name]]
        run(["evaluate", "--dataset", paths["train"], "--queries", paths["test"],
             "--ground-truth", gt_test, "--estimator", estimator, *flags,
             "--repetitions", "5", "--seed", opts.seed, "--format", "table"])

    run(["recall", "--dataset", paths["train"], "--queries", paths["validation"],
         "--k", "50", "--n-clusters", "128", "--n-probe", "5", "--seed", opts.seed])
    if ctx is not None:
        ctx.cleanup()


if __name__ == "__main__":
    main()
