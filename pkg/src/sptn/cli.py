"""Command-line front end.

Subcommands: train, search, eval, marginal, conditional, score, grid,
sample, flower. Every subcommand is deterministic given --seed; reported
log-densities are always in the original data units (the model's stored
standardization is applied on the way in and its log-volume correction on
the way out). Exit codes: 0 success, 1 failure, 2 usage, 3 not tractable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from . import data as data_mod
from . import ginfer, metrics, model_io
from . import train as train_mod
from .errors import NotTractableError, SptnError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NOT_TRACTABLE = 3

METRICS_SCHEMA_VERSION = 1


def _fmt(value: float) -> str:
    return "%.17g" % value


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        data_mod._atomic_write_text(out_path, text)
    else:
        sys.stdout.write(text)


def _emit_json(doc: dict, out_path: str | None, echo: bool = True) -> None:
    text = json.dumps(doc, indent=1) + "\n"
    if out_path:
        data_mod._atomic_write_text(out_path, text)
    if echo or not out_path:
        sys.stdout.write(text)


def _load_bundle(path) -> model_io.ModelBundle:
    return model_io.load_model(path)


def _standardized(bundle: model_io.ModelBundle, features: np.ndarray) -> np.ndarray:
    if bundle.standardization is None:
        return features
    return bundle.standardization.transform(features)


def _log_volume(bundle: model_io.ModelBundle) -> float:
    if bundle.standardization is None:
        return 0.0
    return bundle.standardization.log_volume


def _original_logpdf(bundle: model_io.ModelBundle, features: np.ndarray) -> np.ndarray:
    return bundle.circuit.logpdf(_standardized(bundle, features)) + _log_volume(bundle)


def _parse_mask(mask: str, dim: int) -> ginfer.EvidenceQuery:
    compact = mask.replace(",", "").replace(" ", "")
    return ginfer.EvidenceQuery.from_mask(compact, dim)


def _density_csv(values: np.ndarray) -> str:
    lines = ["log_density"]
    lines.extend(_fmt(v) for v in values)
    return "\n".join(lines) + "\n"


def _train_overrides(args) -> dict:
    return {"sharing": args.sharing, "parametrization": args.parametrization,
            "nonlinearity": args.nonlinearity}


def _split_metrics(bundle_or_circ, std, splits: dict) -> dict:
    out = {}
    correction = std.log_volume if std is not None else 0.0
    for name, ds in splits.items():
        z = std.transform(ds.features) if std is not None else ds.features
        ll = bundle_or_circ.logpdf(z) + correction
        out[name] = {"mean_loglik": metrics.mean_loglik(ll), "rows": int(ds.n)}
    return out


def cmd_train(args) -> int:
    dataset = data_mod.load_csv(args.data, args.labels_col)
    tr, va, te = data_mod.split(dataset, data_mod.SplitSpec(seed=args.seed))
    std = data_mod.Standardization.fit(tr.features)
    config = train_mod.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                                   iterations=args.iterations, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    spec, circuit = train_mod.sample_architecture(
        args.family, dataset.dim, rng, _train_overrides(args))
    _, trace = train_mod.train(circuit, std.transform(tr.features), config)
    model_io.save_model(args.out, circuit, standardization=std,
                        arch_spec=spec.to_dict(), train_config=asdict(config),
                        seed=args.seed)
    finite = trace[np.isfinite(trace)]
    doc = {"schema_version": METRICS_SCHEMA_VERSION, "command": "train",
           "arch": spec.to_dict(), "num_parameters": circuit.num_parameters,
           "iterations": int(trace.size),
           "skipped_batches": int(trace.size - finite.size),
           "final_loss": float(finite[-1]) if finite.size else None,
           "splits": _split_metrics(circuit, std,
                                    {"train": tr, "valid": va, "test": te})}
    _emit_json(doc, args.out + ".metrics.json")
    return EXIT_OK


def cmd_search(args) -> int:
    dataset = data_mod.load_csv(args.data, args.labels_col)
    tr, va, te = data_mod.split(dataset, data_mod.SplitSpec(seed=args.seed))
    std = data_mod.Standardization.fit(tr.features)
    config = train_mod.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                                   iterations=args.iterations, seed=args.seed)
    best, board = train_mod.random_search(
        args.family, std.transform(tr.features), std.transform(va.features),
        valid_labels=va.labels, max_architectures=args.budget,
        criterion=args.criterion, config=config, seed=args.seed,
        overrides=_train_overrides(args))
    model_io.save_model(args.out, best.circuit, standardization=std,
                        arch_spec=best.arch.to_dict(), train_config=asdict(config),
                        seed=args.seed)
    rows = []
    for r in board:
        row = r.summary()
        row.pop("train_seconds", None)  # keep emitted JSON seed-deterministic
        rows.append(row)
    doc = {"schema_version": METRICS_SCHEMA_VERSION, "command": "search",
           "criterion": args.criterion, "budget": args.budget,
           "best": {"arch": best.arch.to_dict(),
                    "num_parameters": best.num_parameters,
                    "criterion": best.criterion},
           "leaderboard": rows,
           "splits": _split_metrics(best.circuit, std,
                                    {"train": tr, "valid": va, "test": te})}
    _emit_json(doc, args.out + ".metrics.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.model)
    dataset = data_mod.load_csv(args.data, args.labels_col)
    ll = _original_logpdf(bundle, dataset.features)
    doc = {"schema_version": METRICS_SCHEMA_VERSION, "command": "eval",
           "mean_loglik": metrics.mean_loglik(ll), "rows": int(dataset.n)}
    _emit_json(doc, args.out)
    return EXIT_OK


def cmd_marginal(args) -> int:
    bundle = _load_bundle(args.model)
    dataset = data_mod.load_csv(args.data, args.labels_col)
    query = _parse_mask(args.mask, bundle.circuit.dim)
    z = _standardized(bundle, dataset.features)
    vals = ginfer.marginal_logpdf(bundle.circuit, z, query.targets)
    if bundle.standardization is not None and query.observed:
        vals = vals - np.log(bundle.standardization.std[list(query.observed)]).sum()
    _emit(_density_csv(vals), args.out)
    return EXIT_OK


def cmd_conditional(args) -> int:
    bundle = _load_bundle(args.model)
    dataset = data_mod.load_csv(args.data, args.labels_col)
    query = _parse_mask(args.mask, bundle.circuit.dim)
    z = _standardized(bundle, dataset.features)
    vals = ginfer.conditional_logpdf(bundle.circuit, z, query.observed)
    if bundle.standardization is not None and query.targets:
        vals = vals - np.log(bundle.standardization.std[list(query.targets)]).sum()
    _emit(_density_csv(vals), args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    if not args.labels_col:
        raise SptnError("score needs --labels-col naming the 0/1 label column")
    dataset = data_mod.load_csv(args.data, args.labels_col)
    if dataset.labels is None:
        raise SptnError("score needs a labeled dataset")
    bundle = _load_bundle(args.model)
    ll = _original_logpdf(bundle, dataset.features)
    scores = -ll
    auc_value = metrics.auc(scores, dataset.labels)
    normal = dataset.labels == 0
    doc = {"schema_version": METRICS_SCHEMA_VERSION, "command": "score",
           "auc": auc_value,
           "mean_loglik": metrics.mean_loglik(ll),
           "mean_loglik_normal": metrics.mean_loglik(ll[normal]),
           "mean_loglik_anomaly": metrics.mean_loglik(ll[~normal]),
           "rows": int(dataset.n),
           "scores": [float(s) for s in scores]}
    _emit_json(doc, args.out)
    return EXIT_OK


def cmd_grid(args) -> int:
    bundle = _load_bundle(args.model)
    if bundle.circuit.dim != 2:
        raise SptnError(f"grid needs a 2-D model, this one has dim {bundle.circuit.dim}")
    try:
        xmin, xmax, ymin, ymax = (float(v) for v in args.bounds.split(","))
    except ValueError:
        raise SptnError(f"--bounds must be xmin,xmax,ymin,ymax, got {args.bounds!r}") from None
    parts = args.resolution.split(",")
    try:
        if len(parts) == 1:
            nx = ny = int(parts[0])
        elif len(parts) == 2:
            nx, ny = int(parts[0]), int(parts[1])
        else:
            raise ValueError
        if nx < 1 or ny < 1:
            raise ValueError
    except ValueError:
        raise SptnError(f"--resolution must be n or nx,ny >= 1, got {args.resolution!r}") from None
    xs = np.linspace(xmin, xmax, nx)
    ys = np.linspace(ymin, ymax, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    points = np.column_stack([gx.ravel(), gy.ravel()])  # row-major: x outer
    ll = _original_logpdf(bundle, points)
    lines = [f"# xmin={_fmt(xmin)} xmax={_fmt(xmax)} ymin={_fmt(ymin)} "
             f"ymax={_fmt(ymax)} nx={nx} ny={ny}",
             "x\ty\tlogpdf"]
    for (px, py), v in zip(points, ll):
        lines.append(f"{_fmt(px)}\t{_fmt(py)}\t{_fmt(v)}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    bundle = _load_bundle(args.model)
    rng = np.random.default_rng(args.seed)
    draws = bundle.circuit.sample(rng, args.n)
    if bundle.standardization is not None:
        draws = bundle.standardization.inverse(draws)
    ds = data_mod.Dataset(draws.reshape(args.n, bundle.circuit.dim))
    cols = tuple(f"x{i}" for i in range(bundle.circuit.dim))
    lines = [",".join(cols)]
    for row in ds.features:
        lines.append(",".join(_fmt(v) for v in row))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_flower(args) -> int:
    ds = data_mod.make_flower(args.n, petals=args.petals, seed=args.seed)
    if args.out:
        data_mod.save_csv(args.out, ds)
    else:
        lines = [",".join(ds.columns)]
        for row in ds.features:
            lines.append(",".join(_fmt(v) for v in row))
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sptn",
        description="Density estimation with sum-product-transform networks.")
    parser.add_argument("--version", action="version", version=f"sptn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data(p, required=True):
        p.add_argument("--data", required=required, help="input CSV/TSV path")
        p.add_argument("--labels-col", default=None,
                       help="name of the 0/1 label column, if any")

    def add_model(p):
        p.add_argument("--model", required=True, help="model JSON path")

    def add_train_flags(p):
        p.add_argument("--iterations", type=int, default=10_000)
        p.add_argument("--batch-size", type=int, default=100)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--family", choices=("gmm", "spn", "gsptn"), default="gsptn")
        p.add_argument("--sharing", choices=train_mod.SHARING_MODES, default=None)
        p.add_argument("--parametrization", choices=train_mod.PARAMETRIZATIONS,
                       default=None)
        p.add_argument("--nonlinearity", choices=train_mod.NONLINEARITIES,
                       default=None)

    p = sub.add_parser("train", help="train one sampled architecture")
    add_data(p)
    add_train_flags(p)
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="random architecture search")
    add_data(p)
    add_train_flags(p)
    p.add_argument("--budget", type=int, default=100,
                   help="number of architectures to try")
    p.add_argument("--criterion", choices=("valid_loglik", "valid_auc"),
                   default="valid_loglik")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="mean log-likelihood of a dataset")
    add_model(p)
    add_data(p)
    p.add_argument("--out", default=None, help="metrics JSON path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("marginal", help="log-density of the observed columns")
    add_model(p)
    add_data(p)
    p.add_argument("--mask", required=True,
                   help="per-column o (observed) / m (marginalized), e.g. o,m,o")
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_marginal)

    p = sub.add_parser("conditional",
                       help="log-density of target columns given observed ones")
    add_model(p)
    add_data(p)
    p.add_argument("--mask", required=True,
                   help="per-column o (evidence) / m (target), e.g. o,m,o")
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_conditional)

    p = sub.add_parser("score", help="anomaly scores and AUC on labeled data")
    add_model(p)
    add_data(p)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("grid", help="density grid of a 2-D model (TSV)")
    add_model(p)
    p.add_argument("--bounds", default="-4,4,-4,4", help="xmin,xmax,ymin,ymax")
    p.add_argument("--resolution", default="64", help="n or nx,ny")
    p.add_argument("--out", default=None, help="output TSV path (default stdout)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sample", help="draw samples from a model")
    add_model(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("flower", help="generate the synthetic flower dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--petals", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_flower)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NotTractableError as exc:
        print(f"error: not tractable: {exc}", file=sys.stderr)
        return EXIT_NOT_TRACTABLE
    except (SptnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
