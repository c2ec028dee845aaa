"""Desk-scale ablation on synthetic glyphs: every requested preset over several seeds.

Results land in the acceptance cache, so a later `pytest tests/test_acceptance.py`
reuses them instead of retraining.

    python scripts/run_desk_ablation.py --presets source-only model-E full --seeds 0 1 2
"""

import argparse
import logging
import os
from pathlib import Path

import torch

from glyphda.config import load_config
from glyphda.evaluation import format_mean_std
from glyphda.experiments import anchor_paths, ensure_perceptual_weights, run_presets

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("-c", "--config", default=str(ROOT / "configs" / "glyphs_desk.yaml"))
    p.add_argument("--presets", nargs="+", default=["source-only", "model-E", "full"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--cache", default=os.environ.get("GLYPHDA_ACCEPTANCE_CACHE", str(ROOT / "runs" / "acceptance")))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)
    cfg = anchor_paths(load_config(args.config, args.set), ROOT)
    ensure_perceptual_weights(cfg)

    def show(r):
        flag = " (cached)" if r.cached else ""
        print(f"{r.preset:12s} seed {r.seed}: source {100 * r.source_accuracy:5.1f}  target {100 * r.target_accuracy:5.1f}"
              f"  {r.seconds / 60:5.1f} min{flag}", flush=True)

    table = run_presets(cfg, args.presets, args.seeds, args.cache, on_result=show)
    print()
    for preset, runs in table.items():
        accs = [100 * r.target_accuracy for r in runs]
        mean = sum(accs) / len(accs)
        std = (sum((a - mean) ** 2 for a in accs) / len(accs)) ** 0.5
        print(f"{preset:12s} target {format_mean_std(mean, std)}")


if __name__ == "__main__":
    main()
