"""``aida`` command-line tool.

Subcommands: gen, fit, score, explain, dpp, bench, isoprob. Any long flag
can also come from a ``key=value`` file passed with ``--config``; flags on
the command line win. Exit codes: 0 ok, 1 usage/config, 2 data or I/O,
3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import probability_grid
from .dataset import (
    CROSS,
    HIDDEN,
    TWO_CLUSTERS,
    DataError,
    Dataset,
    GeneratorSpec,
    SchemaError,
    generate,
    load_csv,
    write_csv,
    zscore_normalize,
)
from .detector import ModelParams, auc, calibrate, fit, load_model, save_model, score_all
from .explain import (
    ADDITIVE,
    RANK,
    RefineParams,
    TixParams,
    dpp,
    minimal_subspace,
    refine,
    stage_sizes,
    tix,
    write_dpp_csv,
    write_dpp_svg,
    write_explanation_csv,
)
from .isolation import EXPECTATION, VARIANCE, ScoreConfig
from .metric import MetricConfig

logger = logging.getLogger("aida")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

KINDS = {"cross": CROSS, "hidden": HIDDEN, "two-clusters": TWO_CLUSTERS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _subspace(text: str):
    """``"0,1,2:10"`` -> ((0, 1, 2), 10)."""
    try:
        feats, count = text.split(":")
        return tuple(int(t) for t in feats.split(",")), int(count)
    except ValueError:
        raise argparse.ArgumentTypeError(f"subspace must look like 0,1:10, got {text!r}") from None


# -- argument groups -------------------------------------------------------------


def _add_data_args(p, label=True):
    p.add_argument("--data", required=True, help="input CSV (header row required)")
    p.add_argument("--nominal", default="", help="comma-separated nominal column names")
    if label:
        p.add_argument("--label", default=None, help="label column name (0 = inlier, 1 = outlier)")


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--N", type=int, default=100, help="number of subsamples")
    g.add_argument("--psi-min", type=int, default=50)
    g.add_argument("--psi-max", type=int, default=512)
    g.add_argument("--alpha", type=float, default=1.0, help="gap exponent")
    g.add_argument("--alpha-min", type=float, default=None, help="draw alpha per subsample from [alpha-min, alpha-max]")
    g.add_argument("--alpha-max", type=float, default=None)
    g.add_argument("--score-fn", choices=(VARIANCE, EXPECTATION), default=VARIANCE)
    g.add_argument("--p", type=float, default=1.0, help="Minkowski exponent")
    g.add_argument("--aggregation", choices=("aom", "average", "max"), default="aom")
    g.add_argument("--q", type=int, default=5, help="subsamples per AOM bucket")
    g.add_argument("--bagging", choices=("auto", "on", "off"), default="auto")


def _add_tix_args(p):
    g = p.add_argument_group("explainer")
    g.add_argument("--M", type=int, default=10, help="repetitions per subsample")
    g.add_argument("--L", type=int, default=None, help="max iterations per run (default 50*d)")
    g.add_argument("--delta-min", type=float, default=0.01)
    g.add_argument("--delta-max", type=float, default=0.015)
    g.add_argument("--greedy", action="store_true", help="turn the tempered acceptance off")
    g.add_argument("--tix-score-fn", choices=(VARIANCE, EXPECTATION), default=VARIANCE,
                   help="isolation statistic compared between feature sets")


def _add_refine_args(p):
    g = p.add_argument_group("refinement")
    g.add_argument("--refine", action="store_true")
    g.add_argument("--beta", type=float, default=1.5)
    g.add_argument("--kmin", type=int, default=10)
    g.add_argument("--offset-mode", choices=(RANK, ADDITIVE), default=RANK)


def build_parser() -> _Parser:
    parser = _Parser(prog="aida", description="Isolation and distance-based anomaly detection and explanation.")
    parser.add_argument("--version", action="version", version=f"aida {__version__}")
    parser.add_argument("--config", default=None, help="key=value file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen", help="write a synthetic dataset and its ground truth")
    p.add_argument("--kind", choices=sorted(KINDS), required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--subspace", type=_subspace, action="append", default=[],
                   help="hidden subspace as features:outliers, e.g. 0,1:10 (repeatable)")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("fit", help="fit a model and save it")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--zscore", action="store_true", help="Z-score numeric columns before fitting")
    p.add_argument("--calibrate", action="store_true", help="store training-batch column stats for single-row scoring")
    p.add_argument("--model", required=True, help="output model file")
    common(p)

    p = sub.add_parser("score", help="score a CSV with a saved model")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--zscore", action="store_true")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("explain", help="rank the features of one row")
    _add_data_args(p)
    p.add_argument("--model", required=True, help="model fitted with --bagging off")
    p.add_argument("--row", type=int, required=True, help="0-based data row to explain")
    _add_tix_args(p)
    _add_refine_args(p)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("dpp", help="distance profile summaries over growing feature prefixes")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--order", type=_int_list, default=None, help="feature indices, most relevant first")
    p.add_argument("--from-report", default=None, help="take the feature order from an explain report")
    p.add_argument("--m-max", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    common(p)

    p = sub.add_parser("bench", help="explainer and runtime benchmarks")
    p.add_argument("--cross", action="store_true", help="SA vs greedy explanations on the cross dataset")
    p.add_argument("--runtime", action="store_true", help="scoring time over n and d sweeps")
    p.add_argument("--d", type=_int_list, default=[5, 10, 20, 30, 50])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mode", choices=("sa", "greedy", "both"), default="both")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--M", type=int, default=10)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--psi-min", type=int, default=50)
    p.add_argument("--psi-max", type=int, default=512)
    p.add_argument("--delta-min", type=float, default=0.01)
    p.add_argument("--delta-max", type=float, default=0.015)
    p.add_argument("--L", type=int, default=None)
    _add_refine_args(p)
    p.add_argument("--sweep-n", type=_int_list, default=[1000, 2000, 4000])
    p.add_argument("--sweep-d", type=_int_list, default=[200, 400, 800])
    p.add_argument("--repeats", type=int, default=3, help="timing repeats; the minimum is kept")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("isoprob", help="probability that random trees cover a hidden subspace")
    p.add_argument("--d", type=_int_list, required=True)
    p.add_argument("--r", type=_int_list, required=True)
    p.add_argument("--h", type=_int_list, required=True)
    p.add_argument("--out", default=None, help="CSV file (default: stdout)")
    return parser


# -- config file -------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    # global flags come before the command, so the first bare word names it
    command = next((a for a in rest if not a.startswith("-")), None)
    if known.config is None or command not in COMMANDS:
        return parser.parse_args(argv)
    try:
        values = read_config(known.config)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from None
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"{known.config}: unknown setting {key!r} for {command}")
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif a.type is not None:
            try:
                defaults[key] = a.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{known.config}: bad value for {key}: {exc}") from None
        else:
            defaults[key] = raw
        if a.choices is not None and defaults[key] not in a.choices:
            raise UsageError(f"{known.config}: {key} must be one of {sorted(a.choices)}")
        # a value from the file satisfies a required flag
        a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers -----------------------------------------------------------------------


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load(args, categories=None) -> Dataset:
    path = Path(args.data)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), None)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if header is None:
        raise DataError(f"{path}: empty file")
    index = {name: i for i, name in enumerate(header)}

    def col(name):
        if name not in index:
            raise DataError(f"{path}: no column named {name!r}")
        return index[name]

    nominal = [col(n) for n in _names(args.nominal)]
    label = col(args.label) if getattr(args, "label", None) else None
    return load_csv(path, nominal_columns=nominal, label_column=label, categories=categories)


def _model_params(args) -> ModelParams:
    if (args.alpha_min is None) != (args.alpha_max is None):
        raise UsageError("--alpha-min and --alpha-max go together")
    alpha_range = None if args.alpha_min is None else (args.alpha_min, args.alpha_max)
    bagging = {"auto": None, "on": True, "off": False}[args.bagging]
    return ModelParams(
        n_subsamples=args.N,
        psi_min=args.psi_min,
        psi_max=args.psi_max,
        feature_bagging=bagging,
        metric=MetricConfig(p=args.p),
        score=ScoreConfig(score_fn=args.score_fn, alpha=args.alpha, alpha_range=alpha_range),
        aggregation=args.aggregation,
        q=args.q,
        seed=args.seed,
    )


def _tix_params(args, M=None) -> TixParams:
    return TixParams(
        M=args.M if M is None else M,
        L=args.L,
        delta_range=(args.delta_min, args.delta_max),
        greedy=getattr(args, "greedy", False),
        seed=args.seed,
        n_jobs=args.threads,
        score_fn=getattr(args, "tix_score_fn", VARIANCE),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def _check_schema(model, ds: Dataset):
    if tuple(model.feature_names) != tuple(ds.feature_names):
        raise SchemaError(f"data columns {list(ds.feature_names)} differ from the model's {list(model.feature_names)}")


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = GeneratorSpec(kind=KINDS[args.kind], n=args.n, d=args.d, subspaces=tuple(args.subspace), seed=args.seed)
    g = generate(spec)
    out = Path(args.out)
    write_csv(g.dataset, out)
    truth = out.with_suffix(".truth.csv")
    with truth.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "relevant_features"])
        for row in sorted(g.relevant):
            w.writerow([row, ";".join(str(j) for j in g.relevant[row])])
    logger.info("wrote %s (%d rows) and %s", out, g.dataset.n, truth)
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _load(args)
    if args.zscore:
        ds, zp = zscore_normalize(ds)
        for msg in zp.warnings:
            logger.warning(msg)
    model = fit(ds, _model_params(args))
    if args.calibrate:
        model = calibrate(model, ds, args.threads)
    save_model(model, args.model)
    logger.info("saved model with %d subsamples to %s", model.n_subsamples, args.model)
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(args.model)
    ds = _load(args, categories=model.categories)
    _check_schema(model, ds)
    if args.zscore:
        ds, _ = zscore_normalize(ds)
    sv = score_all(model, ds, n_jobs=args.threads)
    N = model.n_subsamples
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["row", "score"] + [f"raw_{j}" for j in range(N)] + [f"norm_{j}" for j in range(N)]
        if ds.labels is not None:
            header.append("label")
        w.writerow(header)
        for i in range(ds.n):
            row = [i, _fmt(sv.final[i])] + [_fmt(v) for v in sv.raw[i]] + [_fmt(v) for v in sv.normalized[i]]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            w.writerow(row)
    if ds.labels is not None and 0 < ds.labels.sum() < ds.n:
        print(f"AUC={auc(sv.final, ds.labels):.6f}")
    return EXIT_OK


def _query(model, ds: Dataset, row: int):
    if not 0 <= row < ds.n:
        raise DataError(f"row {row} out of range (data has {ds.n} rows)")
    return ds.numeric[row], ds.nominal[row]


def cmd_explain(args) -> int:
    model = load_model(args.model)
    ds = _load(args, categories=model.categories)
    _check_schema(model, ds)
    x = _query(model, ds, args.row)
    if args.refine:
        res = refine(model, x, _tix_params(args), RefineParams(args.beta, args.kmin, args.offset_mode))
        write_explanation_csv(args.out, model.feature_names, res.scores, res.offsets)
    else:
        table = tix(model, x, _tix_params(args))
        write_explanation_csv(args.out, model.feature_names, table.scores())
    return EXIT_OK


def _order_from_report(path, names) -> list[int]:
    index = {n: i for i, n in enumerate(names)}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [index[r["feature"]] for r in rows]
    except KeyError as exc:
        raise DataError(f"{path}: unknown feature {exc}") from None


def cmd_dpp(args) -> int:
    model = load_model(args.model)
    ds = _load(args, categories=model.categories)
    _check_schema(model, ds)
    x = _query(model, ds, args.row)
    if args.from_report:
        order = _order_from_report(args.from_report, model.feature_names)
    elif args.order:
        order = args.order
    else:
        order = list(range(model.d))
    rows = dpp(model, x, order, args.m_max)
    write_dpp_csv(rows, args.out, model.feature_names)
    if args.svg:
        write_dpp_svg(rows, args.svg, model.feature_names)
    return EXIT_OK


def bench_cross(args) -> list[dict]:
    modes = ["sa", "greedy"] if args.mode == "both" else [args.mode]
    results = []
    for d in args.d:
        for mode in modes:
            sizes, seconds = [], 0.0
            for run in range(args.runs):
                g = generate(GeneratorSpec(kind=CROSS, n=args.n, d=d, seed=args.seed + run))
                (row, relevant), = g.relevant.items()
                params = ModelParams(n_subsamples=args.N, psi_min=args.psi_min, psi_max=args.psi_max,
                                     feature_bagging=False, seed=args.seed + run)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    model = fit(g.dataset, params)
                x = g.dataset.numeric[row]
                t0 = time.perf_counter()
                tp = TixParams(M=args.M, L=args.L, delta_range=(args.delta_min, args.delta_max),
                               greedy=mode == "greedy", seed=args.seed + run, n_jobs=args.threads)
                if args.refine:
                    M = budget_matched_M(args.M, d, args.beta, args.kmin)
                    tp = TixParams(M=M, L=tp.L, delta_range=tp.delta_range, greedy=tp.greedy,
                                   seed=tp.seed, n_jobs=tp.n_jobs)
                    scores = refine(model, x, tp, RefineParams(args.beta, args.kmin, args.offset_mode)).scores
                else:
                    scores = tix(model, x, tp).scores()
                seconds += time.perf_counter() - t0
                sizes.append(minimal_subspace(scores, relevant))
            results.append({
                "d": d, "mode": mode, "mean": float(np.mean(sizes)), "std": float(np.std(sizes)),
                "sizes": ";".join(map(str, sizes)), "seconds": round(seconds, 2),
            })
            logger.info("cross d=%d %s: %s", d, mode, sizes)
    return results


def budget_matched_M(M: int, d: int, beta: float, k_min: int) -> int:
    """Repetitions per refinement stage so that the summed stage sizes match ``M`` passes over ``d`` features."""
    return max(1, round(M * d / sum(stage_sizes(d, beta, k_min))))


def time_scoring(shapes, seed: int, repeats: int, threads: int = 1) -> list[float]:
    """Best-of-``repeats`` scoring time for each ``(n, d)`` in ``shapes``.

    Repeats go round-robin over the shapes so that slow drift in machine
    speed hits every shape alike instead of biasing one end of a sweep.
    """
    jobs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n, d in shapes:
            rng = np.random.default_rng(seed)
            ds = Dataset(rng.random((n, d)), np.zeros((n, 0), dtype=np.int64))
            jobs.append((fit(ds, ModelParams(seed=seed)), ds))
        best = [float("inf")] * len(jobs)
        for _ in range(repeats):
            for t, (model, ds) in enumerate(jobs):
                t0 = time.perf_counter()
                score_all(model, ds, n_jobs=threads)
                best[t] = min(best[t], time.perf_counter() - t0)
    return best


def bench_runtime(args) -> list[dict]:
    shapes = [("n", n, 50) for n in args.sweep_n] + [("d", 1000, d) for d in args.sweep_d]
    seconds = time_scoring([(n, d) for _, n, d in shapes], args.seed, args.repeats, args.threads)
    return [{"sweep": sw, "n": n, "d": d, "seconds": sec} for (sw, n, d), sec in zip(shapes, seconds)]


def _write_dicts(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_bench(args) -> int:
    if not (args.cross or args.runtime):
        raise UsageError("bench needs --cross and/or --runtime")
    out = Path(args.out)
    if args.cross:
        rows = bench_cross(args)
        path = out if not args.runtime else out.with_name(out.stem + ".cross" + out.suffix)
        _write_dicts(path, rows)
        for r in rows:
            print(f"d={r['d']:<4} {r['mode']:<6} minimal subspace {r['mean']:.1f} +- {r['std']:.1f}")
    if args.runtime:
        rows = bench_runtime(args)
        path = out if not args.cross else out.with_name(out.stem + ".runtime" + out.suffix)
        _write_dicts(path, rows)
        for r in rows:
            print(f"{r['sweep']}: n={r['n']} d={r['d']} {r['seconds']:.2f}s")
    return EXIT_OK


def cmd_isoprob(args) -> int:
    rows = probability_grid(args.d, args.r, args.h)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["d", "r", "h_M", "p"])
        for d, r, h, p in rows:
            w.writerow([d, r, h, repr(p)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "score": cmd_score,
    "explain": cmd_explain,
    "dpp": cmd_dpp,
    "bench": cmd_bench,
    "isoprob": cmd_isoprob,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
