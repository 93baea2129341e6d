"""Command-line interface for the estimation toolkit.

Subcommands: synth, split, ground-truth, fit-bandwidth, grid-search,
evaluate, recall.  All output is machine-readable JSON lines by default;
pass --format table for a human-readable table.  Exit codes: 0 success,
2 invalid arguments or inconsistent inputs, 3 infeasible request (for
example an unreachable bandwidth target).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import data as dio
from .analysis import DEFAULT_KDE_FLOOR, NoBandwidthError, fit_bandwidth
from .harness import (
    DEFAULT_REL_ERR_BUDGET,
    DEFAULT_REPETITIONS,
    DEFAULT_TIME_CAP_S,
    ESTIMATORS,
    ExperimentSpec,
    ResultRow,
    average_recall,
    dataset_sha256,
    evaluate,
    grid_search,
    ground_truth,
)
from .kernels import KernelSpec
from .synth import gaussian_mixture, mixture_queries, planted_query, power_law_planted

EXIT_INVALID = 2
EXIT_INFEASIBLE = 3

_TABLE_COLUMNS = [
    "estimator", "k", "m", "n_clusters", "n_probe", "bandwidth",
    "mean_rel_err", "mean_query_time_ms", "mean_kernel_evals", "recall",
    "repetitions", "excluded_count", "preprocessing_s", "timed_out", "selected",
]


def _fmt_cell(name: str, value) -> str:
    if value is None:
        return "-"
    if name == "mean_query_time_ms":
        return f"{value:.3f}"
    if name in ("mean_rel_err", "recall", "bandwidth"):
        return f"{value:.6g}"
    if name in ("preprocessing_s", "mean_kernel_evals"):
        return f"{value:.3f}"
    return str(value)


def _emit_rows(rows: list[ResultRow], fmt: str, out_path: str | None) -> None:
    lines = [r.to_json() for r in rows]
    if out_path:
        with open(out_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    if fmt == "json":
        for line in lines:
            print(line)
        return
    cells = [[_fmt_cell(c, getattr(r, c)) for c in _TABLE_COLUMNS] for r in rows]
    widths = [max(len(col), max((len(row[i]) for row in cells), default=0)) for i, col in enumerate(_TABLE_COLUMNS)]
    print("  ".join(col.ljust(widths[i]) for i, col in enumerate(_TABLE_COLUMNS)))
    for row in cells:
        print("  ".join(row[i].ljust(widths[i]) for i in range(len(row))))


def _load_dataset(path: str) -> dio.Dataset:
    fmt = "csv" if str(path).endswith(".csv") else "binary"
    return dio.load(path, fmt)


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _read_ground_truth(path: str, dataset: dio.Dataset, n_queries: int, args) -> tuple[KernelSpec, np.ndarray]:
    with open(path) as f:
        manifest = json.load(f)
    values = np.asarray(manifest["values"], dtype=np.float64)
    if len(values) != n_queries:
        _fail(f"ground truth holds {len(values)} values but there are {n_queries} queries")
    if manifest.get("dataset_sha256") and manifest["dataset_sha256"] != dataset_sha256(dataset):
        _fail("ground truth was computed against a different dataset")
    kernel = KernelSpec(manifest["kernel"], manifest["bandwidth"])
    if args.kernel is not None and args.kernel != kernel.family.value:
        _fail(f"--kernel {args.kernel} conflicts with ground truth kernel {kernel.family.value}")
    if args.bandwidth is not None and abs(args.bandwidth - kernel.bandwidth) > 1e-12 * kernel.bandwidth:
        _fail(f"--bandwidth {args.bandwidth} conflicts with ground truth bandwidth {kernel.bandwidth}")
    return kernel, values


def _fail(message: str, code: int = EXIT_INVALID):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _cmd_synth(args) -> None:
    if args.kind == "gaussian_mixture":
        ds = gaussian_mixture(args.n, args.d, args.components, args.seed,
                              args.center_scale, args.component_std)
        if args.queries_out:
            q = mixture_queries(args.seed, args.n_queries, args.d, args.components,
                                args.center_scale, args.component_std)
            dio.save(dio.Dataset.from_array(q.astype(np.float32)), args.queries_out)
    else:
        if args.alpha is None or args.beta is None:
            _fail("power_law_planted requires --alpha and --beta")
        ds = power_law_planted(args.n, args.alpha, args.beta, args.d)
        if args.queries_out:
            q = planted_query(args.d).reshape(1, -1)
            dio.save(dio.Dataset.from_array(q.astype(np.float32)), args.queries_out)
    dio.save(ds, args.out)
    print(json.dumps({"out": args.out, "n": ds.n, "d": ds.d, "kind": args.kind, "seed": args.seed}))


def _cmd_split(args) -> None:
    ds = _load_dataset(args.dataset)
    splits = dio.split(ds, args.seed)
    paths = {}
    for part in ("train", "validation", "test"):
        path = f"{args.out_prefix}.{part}.bin"
        dio.save(getattr(splits, part), path)
        paths[part] = path
    manifest = {
        "seed": args.seed,
        "sizes": {p: getattr(splits, p).n for p in ("train", "validation", "test")},
        "paths": paths,
    }
    with open(f"{args.out_prefix}.split.json", "w") as f:
        json.dump(manifest, f, indent=2)
    print(json.dumps(manifest))


def _cmd_ground_truth(args) -> None:
    ds = _load_dataset(args.dataset)
    queries = _load_dataset(args.queries)
    kernel = KernelSpec(args.kernel, args.bandwidth)
    manifest = ground_truth(ds, queries.data64(), kernel)
    with open(args.out, "w") as f:
        json.dump(manifest, f)
    summary = {k: v for k, v in manifest.items() if k != "values"}
    summary["out"] = args.out
    print(json.dumps(summary))


def _cmd_fit_bandwidth(args) -> None:
    ds = _load_dataset(args.dataset)
    queries = _load_dataset(args.queries)
    try:
        h = fit_bandwidth(ds, queries.data64(), args.kernel, args.target_mu, args.rel_tol)
    except NoBandwidthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_INFEASIBLE)
    from .estimators import naive_kde

    achieved = float(np.sort(naive_kde(ds, KernelSpec(args.kernel, h), queries.data64()).values)
                     [(queries.n - 1) // 2])
    print(json.dumps({
        "bandwidth": float(f"{h:.6g}"),
        "achieved_median_kde": achieved,
        "target_mu": args.target_mu,
        "kernel": args.kernel,
    }))


def _make_spec(args, kernel: KernelSpec) -> ExperimentSpec:
    return ExperimentSpec(
        estimator=args.estimator,
        kernel=kernel,
        seed=args.seed,
        k_grid=args.k or [],
        m_grid=args.m or [],
        n_clusters_grid=args.n_clusters or [],
        n_probe_grid=args.n_probe or [],
        repetitions=args.repetitions,
        rel_err_budget=args.rel_err_budget,
        kde_floor=args.kde_floor,
        time_cap_s=args.time_cap,
    )


def _cmd_grid_search(args) -> None:
    ds = _load_dataset(args.dataset)
    queries = _load_dataset(args.queries)
    kernel, exact = _read_ground_truth(args.ground_truth, ds, queries.n, args)
    spec = _make_spec(args, kernel)
    timing = not args.no_timing
    if args.parallel > 1 and timing:
        _fail("--parallel requires --no-timing; timed runs are single-threaded")
    outcome = grid_search(spec, ds, queries.data64(), exact,
                          timing=timing, parallel=args.parallel)
    _emit_rows(outcome.rows, args.format, args.out)
    if outcome.best is not None:
        print(json.dumps({"selected": outcome.best.to_dict()}))
    else:
        fallback = min(outcome.rows, key=lambda r: r.mean_rel_err)
        print(json.dumps({"selected": None,
                          "best_achievable_rel_err": fallback.mean_rel_err,
                          "best_achievable": fallback.to_dict()}))


def _cmd_evaluate(args) -> None:
    ds = _load_dataset(args.dataset)
    queries = _load_dataset(args.queries)
    kernel, exact = _read_ground_truth(args.ground_truth, ds, queries.n, args)
    spec = _make_spec(args, kernel)
    params = {}
    for name, flag in (("k", args.k), ("m", args.m), ("n_clusters", args.n_clusters),
                       ("n_probe", args.n_probe)):
        if flag:
            if len(flag) != 1:
                _fail(f"evaluate takes a single value for --{name.replace('_', '-')}")
            params[name] = flag[0]
    if spec.estimator in ("rs", "rsp", "deann", "deannp") and "m" not in params:
        _fail("this estimator requires --m")
    if spec.estimator in ("deann", "deannp"):
        if "k" not in params:
            _fail(f"{spec.estimator} requires --k")
        if params["k"] > 0:
            # k = 0 falls back to pure sampling and needs no index
            for required in ("n_clusters", "n_probe"):
                if required not in params:
                    _fail(f"{spec.estimator} requires --{required.replace('_', '-')}")
    row, per_query = evaluate(spec, ds, queries.data64(), exact, params,
                              timing=not args.no_timing)
    _emit_rows([row], args.format, args.out)
    if args.per_query:
        with open(args.per_query, "w") as f:
            for record in per_query:
                f.write(json.dumps(record) + "\n")


def _cmd_recall(args) -> None:
    ds = _load_dataset(args.dataset)
    queries = _load_dataset(args.queries)
    value = average_recall(ds, queries.data64(), args.k, args.n_clusters,
                           args.n_probe, args.seed)
    print(json.dumps({"recall": value, "k": args.k, "n_clusters": args.n_clusters,
                      "n_probe": args.n_probe, "seed": args.seed}))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--out", default=None, help="also write JSON lines to this file")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--estimator", required=True, choices=ESTIMATORS)
    p.add_argument("--kernel", choices=("exponential", "gaussian", "laplacian"), default=None)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--k", type=_int_list, default=None)
    p.add_argument("--m", type=_int_list, default=None)
    p.add_argument("--n-clusters", type=_int_list, default=None)
    p.add_argument("--n-probe", type=_int_list, default=None)
    p.add_argument("--repetitions", type=int, default=DEFAULT_REPETITIONS)
    p.add_argument("--rel-err-budget", type=float, default=DEFAULT_REL_ERR_BUDGET)
    p.add_argument("--kde-floor", type=float, default=DEFAULT_KDE_FLOOR)
    p.add_argument("--time-cap", type=float, default=DEFAULT_TIME_CAP_S)
    p.add_argument("--no-timing", action="store_true",
                   help="skip per-query timing (required for --parallel)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deann", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--kind", choices=("gaussian_mixture", "power_law_planted"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--center-scale", type=float, default=10.0)
    p.add_argument("--component-std", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--queries-out", default=None)
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("split", help="split a dataset into train/validation/test")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("ground-truth", help="exact KDE values for a query file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--kernel", choices=("exponential", "gaussian", "laplacian"), required=True)
    p.add_argument("--bandwidth", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ground_truth)

    p = sub.add_parser("fit-bandwidth", help="bandwidth matching a target median KDE")
    p.add_argument("--dataset", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--kernel", choices=("exponential", "gaussian", "laplacian"), required=True)
    p.add_argument("--target-mu", type=float, required=True)
    p.add_argument("--rel-tol", type=float, default=0.01)
    p.set_defaults(func=_cmd_fit_bandwidth)

    p = sub.add_parser("grid-search", help="evaluate a parameter grid on validation queries")
    _add_experiment_flags(p)
    p.add_argument("--parallel", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=_cmd_grid_search)

    p = sub.add_parser("evaluate", help="run one fixed configuration on test queries")
    _add_experiment_flags(p)
    p.add_argument("--per-query", default=None, help="write per-query JSON lines here")
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("recall", help="average inverted-file recall vs exact neighbors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n-clusters", type=int, required=True)
    p.add_argument("--n-probe", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_recall)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # argparse errors and explicit _fail calls
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
