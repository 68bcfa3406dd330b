"""Command-line entry point: simulate, fit, deconvolve, normalize, evaluate, export-grn."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .baselines import baseline_nmf_deconvolve
from .errors import DataError, NumericalError, SymphonyError
from .evaluation import (
    export_grn,
    f_score_clustering,
    matched_f_score,
    normalize_cells,
    rmse_peaks,
    weighted_sum_check,
)
from .inference import FitConfig, fit
from .model import Dims, HyperParams
from .simulate import SimConfig, simulate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("symphony")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    g = _Parser(add_help=False)
    g.add_argument("--seed", type=int, default=None, help="master seed (falls back to SYMPHONY_SEED, then 0)")
    g.add_argument("--config", default=None, help="key = value file; command-line flags take precedence")
    g.add_argument("--out-dir", default=".", help="directory for output files")
    g.add_argument("--k", type=int, default=3, help="number of clusters")
    g.add_argument("--max-iters", type=int, default=500)
    g.add_argument("--tol", type=float, default=1e-6, help="relative objective change for convergence")
    g.add_argument("--e-step", choices=("soft", "map"), default="soft")
    g.add_argument("--fixed-labels", default=None, help="TSV (cell, cluster) fixing the clustering")
    g.add_argument("--quiet", action="store_true")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="symphony", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset and its ground truth")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--l", type=int, default=50)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--motif-density", type=float, default=0.3)
    p.add_argument("--noise-free", action="store_true")

    for name, helptext in (("fit", "fit the model and write a checkpoint"),
                           ("deconvolve", "fit and write the deconvolved peak profiles")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--expr", required=True, help="genes x cells TSV")
        p.add_argument("--bulk", required=True, help="regions x replicates TSV")
        p.add_argument("--mapping", required=True, help="region mapping TSV")
        p.add_argument("--raw-counts", action="store_true", help="apply log(count + 1) to the expression")
        p.add_argument("--hyperparams", default=None,
                       help="checkpoint whose hyperparameters are used instead of empirical ones")
        if name == "deconvolve":
            p.add_argument("--no-expression", action="store_true", help="ablation: ignore the expression view")
            p.add_argument("--baseline", choices=("nmf",), default=None)

    p = sub.add_parser("normalize", parents=[common], help="remove per-cell scalings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--raw-counts", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="compare a fit with the ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--bulk", default=None, help="bulk TSV for the weighted-sum correlation")

    p = sub.add_parser("export-grn", parents=[common], help="write the strongest network edges")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--zscore", action="store_true")
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config:
        values = io.read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]!r}")
        converted = {}
        for a in sub._actions:
            if a.dest in values:
                raw = values[a.dest]
                if isinstance(a, (argparse._StoreTrueAction,)):
                    converted[a.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    converted[a.dest] = a.type(raw) if a.type else raw
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("SYMPHONY_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"SYMPHONY_SEED is not an integer: {env!r}") from None
    return args


# --------------------------------------------------------------------------
# commands


def _labels(prefix, count):
    return [f"{prefix}{i + 1}" for i in range(count)]


def cmd_simulate(args) -> int:
    cfg = SimConfig(dims=Dims(n=args.n, d=args.d, l=args.l, r=args.r, K=args.k),
                    motif_density=args.motif_density, noise_free=args.noise_free, seed=args.seed)
    gt = simulate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    genes, cells = _labels("gene", args.d), _labels("cell", args.n)
    regions, reps = _labels("region", args.l), _labels("rep", args.r)
    io.write_matrix(out / "expression.tsv", gt.dataset.X, genes, cells, "gene")
    io.write_matrix(out / "bulk.tsv", gt.dataset.C, regions, reps, "region")
    io.write_mapping(out / "mapping.tsv", gt.prior, genes, regions)
    io.write_labels(out / "labels.tsv", gt.state.z, cells)
    settings = {"n": args.n, "d": args.d, "l": args.l, "r": args.r, "k": args.k, "seed": args.seed,
                "motif_density": args.motif_density, "noise_free": args.noise_free}
    io.write_config(out / "simulate.cfg", settings)
    ckpt = io.Checkpoint(cfg.dims, gt.hp, gt.state,
                         provenance={"seed": args.seed, "config_hash": io.config_hash(settings),
                                     "tool_version": io.TOOL_VERSION, "kind": "ground_truth"},
                         labels={"genes": genes, "cells": cells, "regions": regions})
    io.write_checkpoint(out / "truth.json", ckpt)
    files = [out / f for f in ("expression.tsv", "bulk.tsv", "mapping.tsv", "labels.tsv",
                               "simulate.cfg", "truth.json")]
    print(io.file_digest(files))
    return EXIT_OK


def _fit_config(args, loaded, **extra) -> FitConfig:
    fixed = None
    if args.fixed_labels:
        fixed = io.read_labels(args.fixed_labels, loaded.cells)
        if fixed.max() >= args.k:
            raise DataError(f"{args.fixed_labels}: cluster id {fixed.max() + 1} exceeds --k {args.k}")
    return FitConfig(K=args.k, max_outer_iters=args.max_iters, elbo_rel_tol=args.tol,
                     e_step_mode=args.e_step, fixed_z=fixed, seed=args.seed, **extra)


def _run_fit(args, **extra):
    loaded = io.load_dataset(args.expr, args.bulk, args.raw_counts)
    prior = io.load_regulatory_prior(args.mapping, loaded.genes, loaded.regions, loaded.dataset.X)
    if args.hyperparams:
        hp = io.read_checkpoint(args.hyperparams).hp
        if hp.d != loaded.dataset.d or hp.l != loaded.dataset.l:
            raise DataError(f"{args.hyperparams}: hyperparameters do not match the data dimensions")
    else:
        hp = HyperParams.empirical(loaded.dataset)
    cfg = _fit_config(args, loaded, **extra)
    state, resp, report = fit(loaded.dataset, prior, hp, cfg)
    settings = {k: v for k, v in vars(args).items() if k not in ("func",)}
    ckpt = io.Checkpoint(loaded.dataset.dims(args.k), hp, state, report,
                         provenance={"seed": args.seed, "config_hash": io.config_hash(settings),
                                     "tool_version": io.TOOL_VERSION, "kind": "fit"},
                         labels={"genes": loaded.genes, "cells": loaded.cells, "regions": loaded.regions})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(out / "checkpoint.json", ckpt)
    io.write_labels(out / "fitted_labels.tsv", state.z, loaded.cells)
    if not args.quiet:
        print(f"iterations={report.iterations_run} converged={report.converged} "
              f"objective={report.elbo_trace[-1]:.6f}")
    return loaded, state, report


def cmd_fit(args) -> int:
    _run_fit(args)
    return EXIT_OK


def cmd_deconvolve(args) -> int:
    loaded, state, _ = _run_fit(args, use_expression=not args.no_expression)
    out = Path(args.out_dir)
    clusters = _labels("cluster", args.k)
    io.write_matrix(out / "profiles.tsv", state.p, clusters, loaded.regions, "cluster")
    if args.baseline == "nmf":
        res = baseline_nmf_deconvolve(loaded.dataset.C, args.k, seed=args.seed)
        io.write_matrix(out / "nmf_profiles.tsv", res.W.T, clusters, loaded.regions, "cluster")
        io.write_matrix(out / "nmf_weights.tsv", res.h[:, None], clusters, ["weight"], "cluster")
    return EXIT_OK


def cmd_normalize(args) -> int:
    ckpt = io.read_checkpoint(args.checkpoint)
    expr = io.read_matrix(args.expr)
    X = np.log1p(expr.values) if args.raw_counts else expr.values
    if X.shape != (ckpt.dims.d, ckpt.dims.n):
        raise DataError(f"{args.expr}: shape {X.shape} does not match checkpoint ({ckpt.dims.d}, {ckpt.dims.n})")
    Y = normalize_cells(X, ckpt.state)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_matrix(out / "normalized.tsv", Y, expr.row_labels, expr.col_labels, expr.corner)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = io.read_checkpoint(args.checkpoint)
    truth = io.read_checkpoint(args.truth)
    fitted, true = ckpt.state, truth.state
    if fitted.z.shape != true.z.shape:
        raise DataError("checkpoint and truth have different numbers of cells")
    rows = [("f_score", f_score_clustering(fitted.z, true.z)),
            ("f_score_matched", matched_f_score(fitted.z, true.z))]
    if fitted.p.shape == true.p.shape:
        rows.append(("rmse_peaks", rmse_peaks(fitted.p, true.p)))
    if args.bulk:
        C = io.read_matrix(args.bulk).values
        rows.append(("weighted_sum_corr", weighted_sum_check(C, fitted.p, fitted.pi).correlation))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = "metric\tvalue\n" + "".join(f"{k}\t{v!r}\n" for k, v in rows)
    (out / "metrics.tsv").write_text(text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_grn(args) -> int:
    if args.threshold < 0:
        raise UsageError("--threshold must be nonnegative")
    ckpt = io.read_checkpoint(args.checkpoint)
    export = export_grn(ckpt.state, args.threshold, zscore=args.zscore)
    genes = ckpt.labels.get("genes") or _labels("gene", ckpt.dims.d)
    cols = ["cluster", "regulator", "target", "weight", "sign", "covariance"]
    if args.zscore:
        cols += ["weight_z", "covariance_z"]
    lines = ["\t".join(cols)]
    for e in export.edges:
        fields = [str(e.cluster + 1), genes[e.regulator], genes[e.target], repr(e.weight), str(e.sign),
                  repr(e.covariance)]
        if args.zscore:
            fields += [repr(e.weight_z), repr(e.covariance_z)]
        lines.append("\t".join(fields))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "edges.tsv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print(f"edges={len(export)}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "deconvolve": cmd_deconvolve,
            "normalize": cmd_normalize, "evaluate": cmd_evaluate, "export-grn": cmd_export_grn}


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"symphony: usage error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"symphony: data error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"symphony: usage error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"symphony: numerical failure: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, ValueError, SymphonyError) as exc:
        print(f"symphony: data error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
