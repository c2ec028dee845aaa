"""Scaled USPS -> MNIST run: source-only against the full method over two seeds.

Expects the idx files named in configs/digits_u2m.yaml (paths relative to the
working directory). USPS is commonly distributed as a .bz2/.h5 file; convert it
to idx first (images as uint8 side x side, labels as uint8).

    python scripts/run_u2m.py --seeds 0 1
"""

import argparse
import logging
import os
from pathlib import Path

import torch

from glyphda.config import load_config
from glyphda.experiments import mean_target, run_presets

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("-c", "--config", default=str(ROOT / "configs" / "digits_u2m.yaml"))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1])
    p.add_argument("--cache", default=os.environ.get("GLYPHDA_ACCEPTANCE_CACHE", str(ROOT / "runs" / "acceptance")))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.set)
    table = run_presets(cfg, ["source-only", "full"], args.seeds, args.cache)
    for preset, runs in table.items():
        print(f"{preset:12s} target {100 * mean_target(runs):.1f}  "
              f"({', '.join(f'{100 * r.target_accuracy:.1f}' for r in runs)})")
    print(f"margin {100 * (mean_target(table['full']) - mean_target(table['source-only'])):+.1f} points")


if __name__ == "__main__":
    main()
