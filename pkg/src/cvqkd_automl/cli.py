"""Command-line entry point.

Exit codes: 0 success, 2 infeasible or invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .channel import ProtocolParams
from .errors import InfeasibleError, NumericalFailure
from .pipeline import (
    DatasetAuditError,
    DatasetFile,
    DatasetSpec,
    benchmark_speedup,
    emit_report,
    generate_dataset,
    run_auto_ml,
    split_and_standardize,
    train_from_config,
    write_manifest,
)
from .solver import SolverConfig, Status, compute_key_rate
from .surrogate import TrainConfig, evaluate_model, load_model, predict_key_rate, save_model
from .tpe import SearchSpace, TPEConfig

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _load_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        return np.atleast_2d(np.asarray(json.loads(path.read_text()), dtype=float))
    return DatasetFile.load(path).features


def cmd_gen_data(args):
    spec = DatasetSpec.load(args.spec)
    run = Path(args.out_dir)
    try:
        data = generate_dataset(spec, workers=args.workers, progress_every=args.progress)
    except DatasetAuditError as exc:
        # keep the rejected rows for inspection; the run still fails
        exc.data.save(run / "dataset.rejected.csv")
        _dump(exc.violations, run / "audit_violations.json")
        raise
    data.save(run / "dataset.csv")
    write_manifest(run, "gen-data", {"spec": str(args.spec)}, ["dataset.csv", "dataset.csv.meta.json"])
    print(json.dumps({"rows": len(data), "excluded_nonpositive": data.meta["excluded_nonpositive"],
                      "failures": len(data.meta["failures"])}))


def cmd_solve(args):
    params = ProtocolParams(args.alpha, args.L, args.xi)
    cfg = SolverConfig(cutoff=args.cutoff, max_fw_iterations=args.max_iter)
    res = compute_key_rate(params, cfg)
    print(json.dumps(res.to_dict(), indent=2, default=float))
    if res.status == Status.INFEASIBLE:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, seed=args.seed)


def cmd_search(args):
    space = SearchSpace.load(args.space)
    data = DatasetFile.load(args.dataset)
    run = Path(args.out_dir)
    train, test, preproc = split_and_standardize(data, args.test_fraction, args.seed)
    train.save(run / "train.csv")
    test.save(run / "test.csv")
    tpe_cfg = TPEConfig(max_trials=args.max_trials, seed=args.seed)
    model, history = run_auto_ml(train, space, tpe_cfg, _train_config(args), preproc=preproc, run_dir=run)
    save_model(model, run / "model.json")
    report = evaluate_model(model, test.features, test.key_rate)
    _dump({"secure_fraction": report.secure_fraction, "within_20": report.within_20,
           "within_40": report.within_40, "n_test": report.n}, run / "evaluation.json")
    write_manifest(run, "search", {"space": str(args.space), "dataset": str(args.dataset), "seed": args.seed},
                   ["train.csv", "test.csv", "trials.json", "model.json", "evaluation.json"])
    print(json.dumps({"best_objective": min(t.objective for t in history if t.status == "Ok"),
                      "secure_fraction": report.secure_fraction}))


def cmd_train(args):
    config = json.loads(Path(args.arch).read_text())
    data = DatasetFile.load(args.dataset)
    run = Path(args.out_dir)
    train, test, preproc = split_and_standardize(data, args.test_fraction, args.seed)
    model, loss = train_from_config(config, train, preproc, _train_config(args))
    save_model(model, run / "model.json")
    test.save(run / "test.csv")
    write_manifest(run, "train", {"arch": str(args.arch), "dataset": str(args.dataset)}, ["model.json", "test.csv"])
    print(json.dumps({"best_validation_loss": loss, "best_epoch": model.best_epoch}))


def cmd_predict(args):
    model = load_model(args.model)
    rates = np.atleast_1d(predict_key_rate(model, _load_features(args.features)))
    print(json.dumps([float(r) for r in rates]))


def cmd_evaluate(args):
    model = load_model(args.model)
    data = DatasetFile.load(args.dataset)
    report = evaluate_model(model, data.features, data.key_rate)
    out = {"n": report.n, "secure_fraction": report.secure_fraction,
           "within_20": report.within_20, "within_40": report.within_40,
           "bin_edges": report.bin_edges, "bin_fractions": report.bin_fractions}
    if args.out:
        _dump(out, Path(args.out))
    print(json.dumps(out))


def cmd_bench(args):
    model = load_model(args.model)
    points = json.loads(Path(args.points).read_text())
    params = [ProtocolParams(p["alpha"], p["L"], p["xi"]) for p in points]
    rows = benchmark_speedup(model, params, SolverConfig(cutoff=args.cutoff, max_fw_iterations=args.max_iter))
    if args.out:
        _dump(rows, Path(args.out))
    print(json.dumps(rows, indent=2))


def cmd_report(args):
    run = Path(args.run_dir)
    model = load_model(run / "model.json")
    test = DatasetFile.load(run / "test.csv")
    bench_path = run / "bench.json"
    bench = json.loads(bench_path.read_text()) if bench_path.exists() else None
    report = emit_report(model, test, bench, out_dir=run / "report")
    write_manifest(run / "report", "report", {"run_dir": str(run)},
                   ["report.json", "deviation_histogram.csv", "runtime_ratios.csv"])
    print(json.dumps({"secure_fraction": report.secure_fraction, "within_20": report.within_20,
                      "within_40": report.within_40}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvqkd-automl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="solve a dataset grid")
    g.add_argument("spec")
    g.add_argument("--out-dir", default="runs/data")
    g.add_argument("--workers", type=int, default=None)
    g.add_argument("--progress", type=int, default=100)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="certified key rate for one point")
    s.add_argument("--xi", type=float, required=True)
    s.add_argument("--L", type=float, required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--cutoff", type=int, default=12)
    s.add_argument("--max-iter", type=int, default=300)
    s.set_defaults(func=cmd_solve)

    for name, func, first in (("search", cmd_search, "space"), ("train", cmd_train, "arch")):
        t = sub.add_parser(name)
        t.add_argument(first)
        t.add_argument("dataset")
        t.add_argument("--out-dir", default=f"runs/{name}")
        t.add_argument("--test-fraction", type=float, default=0.05)
        t.add_argument("--epochs", type=int, default=200)
        t.add_argument("--seed", type=int, default=0)
        if name == "search":
            t.add_argument("--max-trials", type=int, default=10)
        t.set_defaults(func=func)

    pr = sub.add_parser("predict")
    pr.add_argument("model")
    pr.add_argument("features", help="JSON list of feature vectors or a dataset CSV")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate")
    e.add_argument("model")
    e.add_argument("dataset")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench")
    b.add_argument("model")
    b.add_argument("points", help="JSON list of {xi, L, alpha}")
    b.add_argument("--cutoff", type=int, default=6)
    b.add_argument("--max-iter", type=int, default=40)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report")
    r.add_argument("--run-dir", default="runs/search")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
