"""Batch command-line interface.

Subcommands: ``eval`` (solve rows of logits under bounds), ``verify`` (compare
all solvers against the enumeration oracle), ``bench`` (runtime scaling CSV),
``calibrate`` (fit and evaluate a calibrator), ``gen`` (synthetic dataset).

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from . import core, oracle
from ._validation import EPS_EQ
from .calibration import LabeledLogitSet, ece, fit_calibrator, gen_synthetic, save_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

_FLOAT_FMT = "%.17g"


class CliError(Exception):
    """Fatal CLI failure with an explicit exit code."""

    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this interface reserves 2 for data
    # errors and uses 1 for usage problems
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Instance generation (shared by verify, bench, and the acceptance suite)
# ---------------------------------------------------------------------------


def sample_instances(rng: np.random.Generator, n: int, k: int):
    """Random benchmark instances: logits plus feasible box bounds.

    Logits are N(0, 3).  Upper bounds start uniform on [0, 1] and are divided
    by ``min(1, sum(b))``, which enlarges deficient rows onto the simplex-
    feasible set; lower bounds are uniform on [0, 1/K] capped at ``b``.  A
    final clamp keeps every upper bound at most one.
    """
    x = rng.normal(0.0, np.sqrt(3.0), size=(n, k))
    b = rng.uniform(0.0, 1.0, size=(n, k))
    sums = np.minimum(1.0, b.sum(axis=1, keepdims=True))
    b = np.minimum(b / sums, 1.0)
    b = np.maximum(b, 1e-12)  # guard against an exact-zero uniform draw
    a = np.minimum(rng.uniform(0.0, 1.0 / k, size=(n, k)), b)
    return x, a, b


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------


def _fmt_row(values) -> str:
    return ",".join(_FLOAT_FMT % v for v in values)


def _read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise CliError(f"{path}: {exc}") from exc
    if not rows:
        raise CliError(f"{path}: empty file (expected a header row)")
    return rows[0], rows[1:]


def _column_block(header, prefix):
    cols = [i for i, name in enumerate(header) if name.startswith(prefix)]
    expect = [f"{prefix}{j}" for j in range(len(cols))]
    if [header[i] for i in cols] != expect:
        raise CliError(f"malformed header: expected contiguous {prefix}0..{prefix}N")
    return cols


def read_logit_csv(path) -> LabeledLogitSet | None:
    """Parse ``logit_*[,label][,feat_*]`` rows; None for a header-only file."""
    header, body = _read_csv(path)
    logit_cols = _column_block(header, "logit_")
    if not logit_cols:
        raise CliError(f"{path}: no logit_* columns in header")
    feat_cols = _column_block(header, "feat_")
    label_col = header.index("label") if "label" in header else None
    logits, labels, feats = [], [], []
    for rownum, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CliError(f"{path} line {rownum}: expected {len(header)} fields")
        try:
            logits.append([float(row[i]) for i in logit_cols])
            if label_col is not None:
                labels.append(int(row[label_col]))
            if feat_cols:
                feats.append([float(row[i]) for i in feat_cols])
        except ValueError as exc:
            raise CliError(f"{path} line {rownum}: {exc}") from exc
    if not logits:
        return None
    logits = np.asarray(logits)
    labels = (
        np.asarray(labels, dtype=np.int64)
        if label_col is not None
        else np.zeros(len(logits), dtype=np.int64)
    )
    features = np.asarray(feats) if feat_cols else None
    try:
        return LabeledLogitSet(logits, labels, features)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc


def read_labeled_csv(path) -> LabeledLogitSet:
    header, _ = _read_csv(path)
    if "label" not in header:
        raise CliError(f"{path}: calibration data needs a 'label' column")
    data = read_logit_csv(path)
    if data is None:
        raise CliError(f"{path}: no data rows")
    return data


def read_bounds_csv(path, k: int):
    """Parse ``a_0..a_{K-1},b_0..b_{K-1}`` rows into (N, K) bound arrays."""
    header, body = _read_csv(path)
    a_cols = _column_block(header, "a_")
    b_cols = _column_block(header, "b_")
    if len(a_cols) != k or len(b_cols) != k:
        raise CliError(f"{path}: bounds are for K={len(a_cols)}, logits have K={k}")
    lowers, uppers = [], []
    for rownum, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CliError(f"{path} line {rownum}: expected {len(header)} fields")
        try:
            lowers.append([float(row[i]) for i in a_cols])
            uppers.append([float(row[i]) for i in b_cols])
        except ValueError as exc:
            raise CliError(f"{path} line {rownum}: {exc}") from exc
    if not lowers:
        raise CliError(f"{path}: no bound rows")
    return np.asarray(lowers), np.asarray(uppers)


def _write_lines(path, lines) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    header, body = _read_csv(args.input)
    logit_cols = _column_block(header, "logit_")
    if not logit_cols:
        raise CliError(f"{args.input}: no logit_* columns in header")
    k = len(logit_cols)

    if args.bounds is not None:
        lowers, uppers = read_bounds_csv(args.bounds, k)
    else:
        lowers = np.full((1, k), args.lower)
        uppers = np.full((1, k), args.upper)

    if args.algo == "select" and np.any(lowers > 0.0):
        raise CliError(
            "--algo select handles upper bounds only; lower bounds must be zero",
            EXIT_USAGE,
        )

    def solve(x, a, b):
        if args.algo == "select":
            return core.ubsoftmax_select(x, b, args.tau)[0]
        if args.algo == "quadratic":
            return core.bcsoftmax_quadratic(x, a, b, args.tau)[0]
        return core.bcsoftmax(x, a, b, args.tau)[0]

    out = [",".join(f"p_{j}" for j in range(k))]
    if len(body) and len(lowers) not in (1, len(body)):
        raise CliError(
            f"{args.bounds}: {len(lowers)} bound rows for {len(body)} logit rows"
        )
    for rownum, row in enumerate(body):
        if len(row) != len(header):
            raise CliError(f"{args.input} line {rownum + 2}: field count mismatch")
        try:
            x = np.array([float(row[i]) for i in logit_cols])
        except ValueError as exc:
            raise CliError(f"{args.input} line {rownum + 2}: {exc}") from exc
        a = lowers[0] if len(lowers) == 1 else lowers[rownum]
        b = uppers[0] if len(uppers) == 1 else uppers[rownum]
        try:
            y = solve(x, a, b)
        except ValueError as exc:
            raise CliError(f"{args.input} line {rownum + 2}: {exc}") from exc
        out.append(_fmt_row(y))
    _write_lines(args.out, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    if args.K > oracle.MAX_ENUMERATION_SIZE:
        raise CliError(
            f"verify needs K <= {oracle.MAX_ENUMERATION_SIZE} for the oracle",
            EXIT_USAGE,
        )
    rng = np.random.default_rng(args.seed)
    devs = {"bcsoftmax": 0.0, "bcsoftmax_quadratic": 0.0, "ubsoftmax_sorted": 0.0,
            "ubsoftmax_select": 0.0, "lbsoftmax": 0.0}
    for _ in range(args.trials):
        x, a, b = (arr[0] for arr in sample_instances(rng, 1, args.K))
        truth = oracle.solve_enumerate(x, a, b, args.tau)
        devs["bcsoftmax"] = max(
            devs["bcsoftmax"],
            float(np.abs(core.bcsoftmax(x, a, b, args.tau)[0] - truth).max()),
        )
        devs["bcsoftmax_quadratic"] = max(
            devs["bcsoftmax_quadratic"],
            float(np.abs(core.bcsoftmax_quadratic(x, a, b, args.tau)[0] - truth).max()),
        )
        ub_truth = oracle.solve_enumerate(x, np.zeros(args.K), b, args.tau)
        devs["ubsoftmax_sorted"] = max(
            devs["ubsoftmax_sorted"],
            float(np.abs(core.ubsoftmax_sorted(x, b, args.tau)[0] - ub_truth).max()),
        )
        devs["ubsoftmax_select"] = max(
            devs["ubsoftmax_select"],
            float(np.abs(core.ubsoftmax_select(x, b, args.tau)[0] - ub_truth).max()),
        )
        lb_truth = oracle.solve_enumerate(x, a, np.ones(args.K), args.tau)
        devs["lbsoftmax"] = max(
            devs["lbsoftmax"],
            float(np.abs(core.lbsoftmax(x, a, args.tau)[0] - lb_truth).max()),
        )
    print(f"verified {args.trials} instances at K={args.K}, tau={args.tau}")
    failed = False
    for name, dev in devs.items():
        status = "ok" if dev <= EPS_EQ else "FAIL"
        if dev > EPS_EQ:
            failed = True
        print(f"  {name:<22} max deviation {dev:.3e}  [{status}]")
    if failed:
        print(f"verification FAILED (tolerance {EPS_EQ:g})", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _time_batch(solve, xs, lowers, uppers) -> float:
    start = time.perf_counter_ns()
    for x, a, b in zip(xs, lowers, uppers):
        solve(x, a, b)
    return (time.perf_counter_ns() - start) / len(xs)


def cmd_bench(args) -> int:
    def is_pow2(v):
        return v >= 1 and (v & (v - 1)) == 0

    if not (is_pow2(args.kmin) and is_pow2(args.kmax) and args.kmin <= args.kmax):
        raise CliError("--kmin/--kmax must be powers of two with kmin <= kmax",
                       EXIT_USAGE)
    rng = np.random.default_rng(args.seed)
    algos = {
        "bcsoftmax": lambda x, a, b: core.bcsoftmax(x, a, b),
        "bcsoftmax_quadratic": lambda x, a, b: core.bcsoftmax_quadratic(x, a, b),
        "ubsoftmax_select": lambda x, a, b: core.ubsoftmax_select(x, b),
    }
    lines = ["K,algo,median_ns,p10_ns,p90_ns"]
    k = args.kmin
    while k <= args.kmax:
        xs, lowers, uppers = sample_instances(rng, args.batch, k)
        for name, solve in algos.items():
            _time_batch(solve, xs, lowers, uppers)  # warm-up rep, excluded
            samples = [
                _time_batch(solve, xs, lowers, uppers) for _ in range(args.reps)
            ]
            med, p10, p90 = np.percentile(samples, [50, 10, 90])
            lines.append(f"{k},{name},{med:.1f},{p10:.1f},{p90:.1f}")
        k *= 2
    _write_lines(args.out, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate / gen
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    train = read_labeled_csv(args.train)
    test = read_labeled_csv(args.test)
    if train.n_classes != test.n_classes:
        raise CliError("train and test disagree on the number of classes")
    use_lower = args.ablate in ("both", "lower")
    use_upper = args.ablate in ("both", "upper")
    config = dict(epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    if args.method != "ts":
        config.update(use_lower=use_lower, use_upper=use_upper)
    elif args.ablate != "both":
        raise CliError("--ablate applies to pb-*/lb-* methods only", EXIT_USAGE)
    if args.method in ("pb-l", "lb-l") and train.features is None:
        raise CliError(
            f"method {args.method} needs feat_* columns in the training file",
            EXIT_USAGE,
        )
    try:
        model = fit_calibrator(args.method, train, **config)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    pre = ece(None, test, args.bins)
    post = ece(model, test, args.bins)
    print(f"method={args.method} ablate={args.ablate} epochs={args.epochs} "
          f"seed={args.seed} bins={args.bins}")
    print(f"fitted tau = {model.tau_:.6f}")
    print(f"{'':<14}{'ECE':>10}{'Accuracy':>12}")
    print(f"{'uncalibrated':<14}{pre.ece:>10.4f}{pre.accuracy:>12.4f}")
    print(f"{args.method:<14}{post.ece:>10.4f}{post.accuracy:>12.4f}")
    if args.model_out:
        save_model(model, args.model_out)
        print(f"model written to {args.model_out}")
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        data = gen_synthetic(args.N, args.K, args.scale, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    k, d = data.n_classes, data.features.shape[1]
    header = (
        [f"logit_{j}" for j in range(k)]
        + ["label"]
        + [f"feat_{j}" for j in range(d)]
    )
    lines = [",".join(header)]
    for i in range(data.n_samples):
        lines.append(
            _fmt_row(data.logits[i])
            + f",{data.labels[i]},"
            + _fmt_row(data.features[i])
        )
    _write_lines(args.out, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bcsoftmax", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", parents=[], help="solve logit rows under bounds")
    p.add_argument("--input", required=True, help="CSV with logit_* columns")
    p.add_argument("--bounds", help="CSV with a_*/b_* columns (1 row or per-row)")
    p.add_argument("--lower", type=float, default=0.0,
                   help="uniform lower bound when no bounds file is given")
    p.add_argument("--upper", type=float, default=1.0,
                   help="uniform upper bound when no bounds file is given")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--algo", choices=["auto", "sorted", "select", "quadratic"],
                   default="auto")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="compare all solvers to the oracle")
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="runtime scaling across K, CSV output")
    p.add_argument("--kmin", type=int, default=32)
    p.add_argument("--kmax", type=int, default=1024)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="fit a calibrator and report ECE")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--method", choices=["ts", "pb-c", "pb-l", "lb-c", "lb-l"],
                   required=True)
    p.add_argument("--ablate", choices=["both", "lower", "upper"], default="both")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--model-out", help="write the fitted model as JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen", help="generate a synthetic logit dataset")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
