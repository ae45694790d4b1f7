#!/usr/bin/env python3
"""Run the guidance ablation grid and print the headline delta table.

Variants: base (cone + x0-prediction on, ideal pairs), no_cone, no_x0,
no_cone_no_x0, and the base flags on non-ideal pairs.  Reports land under
the config's output directory; interrupted runs resume with --resume.
"""

import argparse
import sys
import time
from pathlib import Path

from vcekit.config import load_config
from vcekit.harness import MINIMAL_METRICS, run_experiment


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--subjects", default=None)
    ap.add_argument("--resume", default=None, metavar="MANIFEST")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, seed=args.seed, out=args.out, subjects=args.subjects)
    resume = args.resume
    if resume is None:
        candidate = Path(cfg.harness.out) / "manifest.json"
        if candidate.exists():
            resume = candidate
            print(f"resuming from {candidate}")
    t0 = time.time()
    results, _manifest, paths = run_experiment(cfg, ablate=True, resume=resume, log=print)
    print(f"\ngrid finished in {time.time() - t0:.0f}s")

    for subject, per_variant in results.items():
        base = per_variant["base"]["aggregate"]
        print(f"\n{subject}: deltas vs base "
              f"(base TA {base['TA'][0]:.3f}, OTA {base['OTA_committee'][0]:.3f})")
        header = " ".join(f"{m:>14s}" for m in MINIMAL_METRICS)
        print(f"  {'variant':14s} {header}")
        for variant, entry in per_variant.items():
            if variant == "base":
                continue
            cells = " ".join(
                f"{entry['aggregate'][m][0] - base[m][0]:+14.4f}"
                for m in MINIMAL_METRICS)
            print(f"  {variant:14s} {cells}")
    print("\nartifacts:")
    for p in paths:
        print(f"  {cfg.harness.out}/{p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
