"""Command-line front end.

Every verb reads and writes inside one output directory::

    hpf simulate --n-users 200 --n-items 300 --output run
    hpf prepare run/ratings.tsv --output run
    hpf train --output run
    hpf recommend --output run --m 20
    hpf eval --output run
    hpf ppc --output run

Exit codes: 0 success (converged), 2 training stopped at max-iters,
3 input or resource error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as data_mod
from .config import ConfigError, RunConfig, load_config, with_overrides
from .evaluation import ResourceError, evaluate, ppc_user_activity, write_histogram
from .inference import NumericalFailure, fit, write_trace
from .model import load_model, save_latents, save_model, simulate_generative
from .recommend import recommend_all, write_recommendations

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4

_logger = logging.getLogger("hpf")


class InputError(Exception):
    pass


def _out(cfg: RunConfig, *parts: str) -> str:
    return os.path.join(cfg.paths.output, *parts)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_split(cfg: RunConfig):
    train_dir = _out(cfg, "train")
    if not os.path.isdir(train_dir):
        raise InputError(f"no prepared data in {cfg.paths.output}; run 'prepare' first")
    train = data_mod.load_dataset(train_dir)
    validation = data_mod.read_triplets(_out(cfg, "validation.tsv"))
    test = data_mod.read_triplets(_out(cfg, "test.tsv"))
    return train, validation, test


def _load_model(cfg: RunConfig):
    model_dir = _out(cfg, "model")
    for name in ("model.json", "theta.tsv", "beta.tsv"):
        if not os.path.exists(os.path.join(model_dir, name)):
            raise InputError(f"missing model file {os.path.join(model_dir, name)}; run 'train' first")
    return load_model(model_dir)


def cmd_prepare(cfg: RunConfig) -> int:
    if cfg.paths.input is None:
        raise InputError("no input file given")
    with open(cfg.paths.input, "rb") as f:
        raw = data_mod.parse_ratings(f, cfg.paths.input_format, source=cfg.paths.input)
    ds = data_mod.build_dataset(raw, cfg.binarize)
    sp = data_mod.split(ds, cfg.split.test_frac, cfg.split.valid_frac, cfg.fit.seed)
    os.makedirs(cfg.paths.output, exist_ok=True)
    data_mod.save_dataset(sp.train, _out(cfg, "train"), {"seed": sp.seed, "binarize": cfg.binarize})
    data_mod.write_triplets(_out(cfg, "validation.tsv"), sp.validation)
    data_mod.write_triplets(_out(cfg, "test.tsv"), sp.test)
    meta = {
        "input": cfg.paths.input,
        "seed": sp.seed,
        "binarize": cfg.binarize,
        "test_frac": cfg.split.test_frac,
        "valid_frac": cfg.split.valid_frac,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "nnz": ds.nnz,
        "n_train": sp.train.nnz,
        "n_validation": len(sp.validation),
        "n_test": len(sp.test),
        "ingest": raw.report.to_dict(),
    }
    _write_json(_out(cfg, "meta.json"), meta)
    _logger.info(
        "kept %d records (%d zero-valued dropped); train/valid/test = %d/%d/%d",
        raw.report.kept,
        raw.report.dropped_zero,
        sp.train.nnz,
        len(sp.validation),
        len(sp.test),
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    train, validation, _ = _load_split(cfg)
    model, trace = fit(train, validation, cfg.hyperparameters, cfg.fit_options())
    save_model(model, _out(cfg, "model"))
    write_trace(_out(cfg, "trace.tsv"), trace, timings=cfg.timings)
    meta = model.fit_meta
    _logger.info(
        "%s after %d iterations (validation log-likelihood %s)",
        "converged" if meta.converged else "stopped",
        meta.iterations,
        meta.valid_loglik,
    )
    return EXIT_OK if meta.converged else EXIT_NOT_CONVERGED


def cmd_recommend(cfg: RunConfig, users: list[str] | None = None) -> int:
    train, _, _ = _load_split(cfg)
    model = _load_model(cfg)
    dense = None
    if users:
        dense = []
        for uid in users:
            if uid not in train.user_index:
                raise InputError(f"unknown user id {uid!r}")
            dense.append(train.user_index[uid])
    lists = recommend_all(model, train, cfg.evaluation.m, dense)
    n = write_recommendations(_out(cfg, "recommendations.tsv"), lists, train)
    _logger.info("wrote %d recommendations", n)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    train, _, test = _load_split(cfg)
    model = _load_model(cfg)
    report = evaluate(model, train, test, cfg.evaluation.m, cfg.evaluation.percentiles)
    with open(_out(cfg, "metrics.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_json())
    _logger.info(
        "normalized precision@%d %.4f, recall@%d %.4f over %d users (%d skipped)",
        report.m,
        report.mean_norm_precision_at_m,
        report.m,
        report.mean_recall_at_m,
        report.n_users,
        report.n_skipped,
    )
    return EXIT_OK


def cmd_ppc(cfg: RunConfig, axis: str = "user") -> int:
    train, _, _ = _load_split(cfg)
    model = _load_model(cfg)
    ev = cfg.evaluation
    report = ppc_user_activity(model, train, cfg.fit.seed, axis, ev.cell_budget, ev.stream)
    with open(_out(cfg, "ppc.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_json())
    write_histogram(_out(cfg, "ppc_observed.tsv"), report.observed_activity)
    write_histogram(_out(cfg, "ppc_replicated.tsv"), report.replicated_activity)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, n_users: int, n_items: int) -> int:
    if n_users < 1 or n_items < 1:
        raise InputError("--n-users and --n-items must be >= 1")
    latents, ds = simulate_generative(cfg.hyperparameters, n_users, n_items, cfg.fit.seed)
    os.makedirs(cfg.paths.output, exist_ok=True)
    with open(_out(cfg, "ratings.tsv"), "w", encoding="utf-8", newline="\n") as f:
        for u, i, y in ds.entries:
            f.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\t{y}\n")
    data_mod.save_dataset(ds, _out(cfg, "simulated"), {"seed": cfg.fit.seed})
    save_latents(latents, _out(cfg, "latents"))
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--output", help="working directory for all outputs")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="number of latent components")
    common.add_argument("--variant", choices=("hpf", "bpf"))
    common.add_argument("--binarize", type=int, metavar="T")
    common.add_argument("--m", type=int, help="recommendation list length")
    common.add_argument("--threads", type=int)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--rel-tol", type=float)
    common.add_argument(
        "--no-timings", dest="timings", action="store_const", const=False,
        help="write zero wall-clock times so outputs are byte-reproducible",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hpf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="ingest and split ratings")
    p.add_argument("input", nargs="?")
    p.add_argument("--format", choices=("tsv", "csv"))
    sub.add_parser("train", parents=[common], help="fit the model")
    p = sub.add_parser("recommend", parents=[common], help="top-M lists")
    p.add_argument("--users", help="comma-separated external user ids")
    sub.add_parser("eval", parents=[common], help="precision/recall on the test split")
    p = sub.add_parser("ppc", parents=[common], help="posterior predictive check")
    p.add_argument("--axis", choices=("user", "item"), default="user")
    p.add_argument("--cell-budget", type=int)
    p.add_argument("--stream", action="store_const", const=True)
    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic dataset")
    p.add_argument("--n-users", type=int, required=True)
    p.add_argument("--n-items", type=int, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = with_overrides(
            load_config(args.config),
            input=getattr(args, "input", None),
            format=getattr(args, "format", None),
            output=args.output,
            seed=args.seed,
            k=args.k,
            variant=args.variant,
            binarize=args.binarize,
            m=args.m,
            threads=args.threads,
            max_iters=args.max_iters,
            rel_tol=args.rel_tol,
            timings=args.timings,
            cell_budget=getattr(args, "cell_budget", None),
            stream=getattr(args, "stream", None),
        )
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "recommend":
            users = args.users.split(",") if args.users else None
            return cmd_recommend(cfg, users)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ppc":
            return cmd_ppc(cfg, args.axis)
        return cmd_simulate(cfg, args.n_users, args.n_items)
    except NumericalFailure as exc:
        print(f"hpf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (
        InputError,
        ConfigError,
        ResourceError,
        data_mod.ParseError,
        data_mod.EmptyDatasetError,
        OSError,
        ValueError,
    ) as exc:
        print(f"hpf: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
