"""Command-line entry point: ``geomgen train | generate | evaluate | selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint
from .chem import XYZParseError, format_xyz, load_dataset, split_dataset
from .config import ConfigError, load_config
from .model import ModelConfig, UnsupportedElementError, init_params
from .sampler import CompositionPlan, GenerationError, GenerationGrid, generate, parse_composition
from .trainer import NonFiniteLossError, TrainConfig, train

log = logging.getLogger("geomgen")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="geomgen", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the model to an XYZ dataset")
    _common(t)
    t.add_argument("--data", help="XYZ file or manifest of XYZ files")
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--n-train", type=int, dest="n_train")
    t.add_argument("--train-fraction", type=float, dest="train_fraction")
    t.add_argument("--val-interval", type=int, dest="val_interval")
    t.add_argument("--val-samples", type=int, dest="val_samples")
    t.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    t.add_argument("--checkpoint")
    t.add_argument("--metrics")
    t.add_argument("--features", type=int)
    t.add_argument("--interactions", type=int)
    t.add_argument("--rbf", type=int)
    t.add_argument("--bins", type=int)
    t.add_argument("--d-max", type=float, dest="d_max")
    t.add_argument("--grid-extent", type=float, dest="grid_extent")
    t.add_argument("--resume", action="store_true", help="continue from --checkpoint")

    g = sub.add_parser("generate", help="sample molecules from a checkpoint")
    _common(g)
    g.add_argument("--checkpoint")
    g.add_argument("--count", type=int)
    g.add_argument("--composition")
    g.add_argument("--temperature", type=float, dest="t_gen")
    g.add_argument("--grid-extent", type=float, dest="grid_extent")
    g.add_argument("--grid-steps", type=int, dest="grid_steps")
    g.add_argument("--out")
    g.add_argument("--trace", help="write per-step JSON lines here")

    e = sub.add_parser("evaluate", help="match statistics and RMSD summaries")
    _common(e)
    e.add_argument("--generated", help="generated molecules (XYZ)")
    e.add_argument("--train", dest="train_ref", help="training reference molecules (XYZ)")
    e.add_argument("--test", dest="test_ref", help="test reference molecules (XYZ)")
    e.add_argument("--rmsd-pairs", nargs=2, metavar=("A", "B"), help="paired XYZ files, RMSD per block")
    e.add_argument("--match", choices=("index", "greedy"), default="index")
    e.add_argument("--report", help="also write the report to this file")

    s = sub.add_parser("selftest", help="gradient check and sampler oracle")
    s.add_argument("--fast", action="store_true", help="use a reduced model for the gradient check")
    return parser


def _overrides(args, names):
    return {k: getattr(args, k, None) for k in names}


def _read(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    try:
        return load_dataset(p)
    except (XYZParseError, UnsupportedElementError, OSError) as exc:
        raise UsageError(f"cannot read {what} {p}: {exc}") from None


def _echo(cfg):
    for line in cfg.lines():
        log.info("config %s", line)


def cmd_train(args):
    names = [
        "seed", "threads", "data", "iters", "batch", "lr", "n_train", "train_fraction", "val_interval",
        "val_samples", "checkpoint_interval", "checkpoint", "metrics", "features", "interactions", "rbf",
        "bins", "d_max", "grid_extent",
    ]
    cfg = load_config(args.config, _overrides(args, names))
    _echo(cfg)
    molecules = _read(cfg.data, "data file")
    model_cfg = ModelConfig(
        n_features=cfg.features,
        n_rbf=cfg.rbf,
        n_interactions=cfg.interactions,
        n_bins=cfg.bins,
        d_max=cfg.effective_d_max,
    )
    for m in molecules:
        bad = set(m.charges.tolist()) - set(model_cfg.elements)
        if bad:
            raise UsageError(f"unsupported elements {sorted(bad)} in {cfg.data}")
    heldout = None
    if cfg.n_train is not None or cfg.train_fraction is not None:
        molecules, heldout = split_dataset(
            molecules, np.random.default_rng([cfg.seed, 2]), n_train=cfg.n_train, train_fraction=cfg.train_fraction
        )
    if not molecules:
        raise UsageError("training set is empty")
    if any(len(m) < 2 for m in molecules):
        raise UsageError("every training molecule needs at least two atoms")
    tcfg = TrainConfig(
        iterations=cfg.iters,
        batch_size=cfg.batch,
        seed=cfg.seed,
        val_interval=cfg.val_interval,
        val_samples=cfg.val_samples,
        val_temperature=cfg.t_gen,
        train_temperature=cfg.t_train,
        checkpoint_path=cfg.checkpoint,
        checkpoint_interval=cfg.checkpoint_interval,
        metrics_path=cfg.metrics,
        threads=cfg.threads,
        lr=cfg.lr,
    )
    resume = {}
    if args.resume:
        try:
            ckpt = load_checkpoint(cfg.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot resume from {cfg.checkpoint}: {exc}") from None
        resume = dict(params=ckpt.params, adam=ckpt.adam, start_iteration=ckpt.iteration, rng_state=ckpt.rng_state)
    else:
        resume = dict(params=init_params(model_cfg, np.random.default_rng([cfg.seed, 0])))
    result = train(molecules, tcfg, heldout=heldout, **resume)
    if result.losses:
        it, value, terms = result.losses[-1]
        log.info("iteration %d loss %.6f (%.4f per term)", it, value, value / max(terms, 1))
    print(f"trained {len(result.losses)} iterations; checkpoint {cfg.checkpoint}")
    return 0


GENERATION_ATTEMPTS = 5


def _generate_one(params, composition, seed, k, temperature, grid):
    """Molecule ``k`` of a run; a failed draw is retried on a fresh stream."""
    for attempt in range(GENERATION_ATTEMPTS):
        key = [seed, k] if attempt == 0 else [seed, k, attempt]
        rng = np.random.default_rng(key)
        plan = CompositionPlan.random(composition, rng)
        trace = []
        try:
            return generate(plan, params, temperature, rng, grid=grid, trace=trace), trace, attempt
        except GenerationError as exc:
            log.warning("molecule %d attempt %d: %s", k, attempt, exc)
    raise UsageError(f"molecule {k}: generation failed {GENERATION_ATTEMPTS} times (model too untrained for T={temperature}?)")


def cmd_generate(args):
    names = ["seed", "threads", "checkpoint", "count", "composition", "t_gen", "grid_extent", "grid_steps", "out", "trace"]
    cfg = load_config(args.config, _overrides(args, names))
    _echo(cfg)
    try:
        params = load_checkpoint(cfg.checkpoint).params
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {cfg.checkpoint}: {exc}") from None
    except CheckpointError as exc:
        raise UsageError(f"checkpoint {cfg.checkpoint}: {exc}") from None
    try:
        composition = parse_composition(cfg.composition)
        params.element_rows(composition)
    except (ValueError, UnsupportedElementError) as exc:
        raise UsageError(str(exc)) from None
    grid = GenerationGrid(cfg.grid_extent, cfg.grid_steps)
    jobs = range(max(cfg.count, 0))

    def run(k):
        return _generate_one(params, composition, cfg.seed, k, cfg.t_gen, grid)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(k) for k in jobs]
    molecules = [m for m, _, _ in results]
    comments = [
        f"geomgen seed={cfg.seed} index={k} attempt={a} composition={cfg.composition}"
        for k, (_, _, a) in zip(jobs, results)
    ]
    Path(cfg.out).write_text(format_xyz(molecules, comments))
    if cfg.trace:
        with open(cfg.trace, "w") as fh:
            for k, (_, trace, _) in enumerate(results):
                for rec in trace:
                    fh.write(json.dumps({"molecule": k, **rec}, sort_keys=True) + "\n")
    print(f"wrote {len(molecules)} molecules to {cfg.out}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config, _overrides(args, ["seed", "threads"]))
    _echo(cfg)
    train_ref = _read(args.train_ref, "train file") if args.train_ref else []
    test_ref = _read(args.test_ref, "test file") if args.test_ref else []
    parts = []
    if args.generated:
        generated = _read(args.generated, "generated file")
        parts.append(analysis.format_statistics(analysis.match_statistics(generated, train_ref, test_ref)))
    if args.rmsd_pairs:
        a = _read(args.rmsd_pairs[0], "rmsd file")
        b = _read(args.rmsd_pairs[1], "rmsd file")
        if len(a) != len(b):
            raise UsageError(f"rmsd files hold {len(a)} and {len(b)} molecules")
        train_keys = analysis._reference_keys(train_ref)
        test_keys = analysis._reference_keys(test_ref)
        categories = [analysis.classify(m, train_keys, test_keys) for m in a]
        try:
            table = analysis.rmsd_table(list(zip(a, b)), categories, match=args.match)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        parts.append(analysis.format_rmsd_table(table))
    if not parts:
        raise UsageError("nothing to evaluate: pass --generated and/or --rmsd-pairs")
    report = "\n".join(parts)
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report)
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    return 0 if run_selftest(fast=args.fast) else 1


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate, "selftest": cmd_selftest}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
