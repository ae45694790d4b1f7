#!/usr/bin/env python3
"""Draw unconditional samples from the trained denoiser into a PGM sheet.

Quick visual check that the diffusion model produces shape-like images
before any guidance is layered on top.
"""

import argparse
import sys
import time

import numpy as np

from vcekit.config import load_config
from vcekit.diffusion import sample_unconditional
from vcekit.harness import load_models, make_noise_schedule, to_uint8, write_pgm


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default="samples.pgm")
    ap.add_argument("--rows", type=int, default=6)
    ap.add_argument("--cols", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    models = load_models(cfg)
    sched = make_noise_schedule(cfg)
    n = args.rows * args.cols
    t0 = time.time()
    samples = sample_unconditional(models["denoiser"], sched, n, args.seed,
                                   resolution=cfg.dataset.resolution)
    print(f"{n} samples in {time.time() - t0:.1f}s")

    res = cfg.dataset.resolution
    sheet = np.full((args.rows * (res + 1) - 1, args.cols * (res + 1) - 1), 255,
                    dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, args.cols)
        sheet[r * (res + 1):r * (res + 1) + res,
              c * (res + 1):c * (res + 1) + res] = to_uint8(samples[i, 0])
    write_pgm(args.out, sheet)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
