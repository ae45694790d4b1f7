"""Command-line front end.

Verbs: ``train-denoiser``, ``train-classifiers``, ``generate``,
``evaluate``, ``ablate``, ``report``.  Exit codes: 0 on success, 1 for
configuration/usage problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .data import IdxFormatError
from .harness import (HarnessError, ensure_models, load_splits, make_noise_schedule,
                      model_path, rebuild_reports, run_experiment, train_one)
from .metrics import MetricError
from .models import (CLASSIFIER_VARIANTS, CheckpointError, DivergenceError,
                     denoiser_holdout_mse, evaluate_accuracy, load_model)


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are configuration errors (exit 1), not Python crashes."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="vcekit",
                     description="Classifier-guided diffusion counterfactuals "
                                 "on 16x16 grayscale datasets.")
    sub = parser.add_subparsers(dest="command", metavar="VERB")
    sub.required = True

    def add(name, help_text, *, subjects=False, minimal=False, reject=False, resume=False):
        sp = sub.add_parser(name, help=help_text, parents=[], add_help=True)
        sp.add_argument("--config", metavar="PATH", default=None,
                        help="experiment config file (INI sections; defaults when omitted)")
        sp.add_argument("--seed", metavar="N", type=int, default=None,
                        help="override the base seed")
        sp.add_argument("--out", metavar="DIR", default=None,
                        help="override the output directory")
        if subjects:
            sp.add_argument("--subjects", metavar="LIST", default=None,
                            help="comma-separated subject classifiers")
        if minimal:
            sp.add_argument("--minimal", action="store_true",
                            help="markdown tables keep only TA, OTA_committee, LPIPS, FID")
        if reject:
            sp.add_argument("--reject-invalid", action="store_true",
                            help="flag counterfactuals the subject still misclassifies")
        if resume:
            sp.add_argument("--resume", metavar="MANIFEST", default=None,
                            help="skip batches already recorded in this manifest")
        return sp

    add("train-denoiser", "train the diffusion denoiser and save its checkpoint")
    add("train-classifiers", "train every classifier variant and save checkpoints")
    add("generate", "generate counterfactual records (no metrics)",
        subjects=True, reject=True, resume=True)
    add("evaluate", "generate, score, and report the base setup",
        subjects=True, minimal=True, reject=True, resume=True)
    add("ablate", "run the guidance ablation grid and report deltas",
        subjects=True, minimal=True, reject=True, resume=True)
    add("report", "re-emit reports from an existing output directory", minimal=True)
    return parser


def _load(args) -> "ExperimentConfig":
    return load_config(args.config, seed=args.seed, out=args.out,
                       subjects=getattr(args, "subjects", None),
                       reject_invalid=getattr(args, "reject_invalid", False))


def _cmd_train_denoiser(args) -> int:
    cfg = _load(args)
    train, val = load_splits(cfg)
    path = train_one(cfg, "denoiser", train, log=print)
    mse = denoiser_holdout_mse(load_model(path), val, make_noise_schedule(cfg),
                               seed=cfg.dataset.seed)
    print(f"holdout eps-MSE {mse:.4f}")
    return 0


def _cmd_train_classifiers(args) -> int:
    cfg = _load(args)
    train, val = load_splits(cfg)
    for variant in CLASSIFIER_VARIANTS:
        path = train_one(cfg, variant, train, log=print)
        acc = evaluate_accuracy(load_model(path), val)
        print(f"  {variant}: val accuracy {acc:.3f}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _load(args)
    _results, manifest, _paths = run_experiment(cfg, generate_only=True,
                                                resume=args.resume, log=print)
    print(f"{len(manifest['completed'])} batches recorded under {cfg.harness.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load(args)
    _results, _manifest, paths = run_experiment(cfg, minimal=args.minimal,
                                                resume=args.resume, log=print)
    for p in paths:
        print(f"wrote {cfg.harness.out}/{p}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    _results, _manifest, paths = run_experiment(cfg, ablate=True, minimal=args.minimal,
                                                resume=args.resume, log=print)
    for p in paths:
        print(f"wrote {cfg.harness.out}/{p}")
    return 0


def _cmd_report(args) -> int:
    cfg = _load(args)
    paths = rebuild_reports(cfg.harness.out, minimal=args.minimal, log=print)
    for p in paths:
        print(f"wrote {cfg.harness.out}/{p}")
    return 0


_COMMANDS = {
    "train-denoiser": _cmd_train_denoiser,
    "train-classifiers": _cmd_train_classifiers,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (HarnessError, MetricError, CheckpointError, DivergenceError,
            IdxFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
