#!/usr/bin/env python3
"""Train the full model roster for a config and print a quality summary.

Unlike the CLI training verbs (which always retrain), this skips models
whose checkpoints already exist unless --force is given.
"""

import argparse
import sys
import time

from vcekit.config import load_config
from vcekit.harness import (ensure_models, load_splits, make_noise_schedule,
                            model_path, required_models, train_one)
from vcekit.models import denoiser_holdout_mse, evaluate_accuracy, noisy_accuracy


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default=None, help="override output directory")
    ap.add_argument("--force", action="store_true", help="retrain existing checkpoints")
    ap.add_argument("--noise-sigma", type=float, default=0.4,
                    help="perturbation scale for the noisy-accuracy column")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, out=args.out)
    t0 = time.time()
    train, val = load_splits(cfg)
    print(f"dataset: {train.n} train / {val.n} val images, "
          f"{train.n_classes} classes ({time.time() - t0:.1f}s)")

    if args.force:
        for name in required_models(cfg):
            train_one(cfg, name, train, log=print)
        models = ensure_models(cfg, train)
    else:
        models = ensure_models(cfg, train, log=print)

    sched = make_noise_schedule(cfg)
    print(f"\n{'model':14s} {'params':>9s} {'val acc':>8s} {'noisy acc':>10s}")
    for name in required_models(cfg):
        if name == "denoiser":
            continue
        m = models[name]
        acc = evaluate_accuracy(m, val)
        nacc = noisy_accuracy(m, val, args.noise_sigma, seed=3)
        print(f"{name:14s} {m.params.n_params:9d} {acc:8.4f} {nacc:10.4f}")
    den = models["denoiser"]
    mse = denoiser_holdout_mse(den, val, sched, seed=5)
    print(f"{'denoiser':14s} {den.params.n_params:9d}   holdout eps-MSE {mse:.4f}")
    print(f"\ncheckpoints under {model_path(cfg, 'denoiser').parent}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
