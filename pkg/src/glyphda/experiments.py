"""Multi-seed experiment runs with an on-disk result cache.

A finished run leaves ``result.json`` next to its artifacts. The run directory
name is derived from the config digest and a hash of the modules that affect
training, so editing a config or the training code starts fresh runs while
reruns of an unchanged setup reuse the stored result.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, apply_overrides, config_from_tree, to_dict

log = logging.getLogger(__name__)

# modules whose content changes training results
_TRAINING_MODULES = ("checkpoint.py", "config.py", "data.py", "evaluation.py", "latent.py", "losses.py",
                     "networks.py", "pretrain.py", "trainer.py")


def training_code_hash() -> str:
    h = hashlib.sha1()
    here = Path(__file__).parent
    for name in _TRAINING_MODULES:
        blob = (here / name).read_bytes()
        h.update(f"{name} blob {len(blob)}\0".encode() + blob)
    return h.hexdigest()


@dataclass(frozen=True)
class RunResult:
    preset: str
    seed: int
    source_accuracy: float
    target_accuracy: float
    iterations: int
    seconds: float
    run_dir: str
    cached: bool = False


def with_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    return config_from_tree(apply_overrides(to_dict(cfg), list(overrides)))


def run_key(cfg: ExperimentConfig) -> str:
    key = f"{cfg.digest()[:12]}-{training_code_hash()[:8]}"
    weights = cfg.model.perceptual_weights
    if weights and Path(weights).exists():
        key += "-" + hashlib.sha1(Path(weights).read_bytes()).hexdigest()[:6]
    return key


def anchor_paths(cfg: ExperimentConfig, base: str | os.PathLike) -> ExperimentConfig:
    """Resolve a relative perceptual-weights path against ``base``."""
    weights = cfg.model.perceptual_weights
    if weights is None or Path(weights).is_absolute():
        return cfg
    return with_overrides(cfg, [f"model.perceptual_weights={(Path(base) / weights).resolve()}"])


def ensure_perceptual_weights(cfg: ExperimentConfig, steps: int = 600, seed: int = 0) -> Optional[Path]:
    """Write the source-pretrained perceptual weights ``cfg`` names, unless present."""
    from .data import load_corpora
    from .pretrain import pretrain_perceptual, save_perceptual

    if cfg.model.perceptual_weights is None:
        return None
    path = Path(cfg.model.perceptual_weights)
    if not path.exists():
        log.info("pretraining perceptual extractor -> %s", path)
        vgg = pretrain_perceptual(load_corpora(cfg.data).source, cfg.model.num_classes, cfg.model.perceptual_width,
                                  steps, seed=seed)
        save_perceptual(vgg, path, {"width": cfg.model.perceptual_width, "steps": steps, "seed": seed})
    return path


def run_once(cfg: ExperimentConfig, preset: str, seed: int, cache_root: str | os.PathLike,
             grids: bool = False) -> RunResult:
    """Train ``cfg`` under ``preset`` and ``seed``; reuse a cached result when present.

    The reported accuracies come from the last iteration, never from a
    checkpoint picked by target accuracy.
    """
    from .trainer import fit

    cfg = with_overrides(cfg, [f"ablation.preset={preset}", f"seed={seed}"])
    run_dir = Path(cache_root) / f"{preset}-seed{seed}-{run_key(cfg)}"
    record = run_dir / "result.json"
    if record.exists():
        body = json.loads(record.read_text())
        return RunResult(**{**body, "cached": True})
    cfg = with_overrides(cfg, [f"output_dir={run_dir.resolve()}"])
    start = time.perf_counter()
    result = fit(cfg, grids=grids)
    out = RunResult(preset, seed, result.last_eval.get("source", float("nan")), result.last_eval["target"],
                    result.state.iteration, time.perf_counter() - start, str(run_dir))
    body = {k: v for k, v in out.__dict__.items() if k != "cached"}
    tmp = record.with_name(record.name + ".tmp")
    tmp.write_text(json.dumps(body, indent=2) + "\n")
    os.replace(tmp, record)
    log.info("%s seed %d: target %.4f in %.0fs", preset, seed, out.target_accuracy, out.seconds)
    return out


def run_presets(cfg: ExperimentConfig, presets: Sequence[str], seeds: Sequence[int], cache_root: str | os.PathLike,
                on_result=None) -> dict[str, list[RunResult]]:
    table: dict[str, list[RunResult]] = {}
    for preset in presets:
        for seed in seeds:
            r = run_once(cfg, preset, seed, cache_root)
            table.setdefault(preset, []).append(r)
            if on_result:
                on_result(r)
    return table


def mean_target(results: Sequence[RunResult]) -> float:
    return sum(r.target_accuracy for r in results) / len(results)


def cached_result(cfg: ExperimentConfig, preset: str, seed: int, cache_root: str | os.PathLike) -> Optional[RunResult]:
    cfg = with_overrides(cfg, [f"ablation.preset={preset}", f"seed={seed}"])
    record = Path(cache_root) / f"{preset}-seed{seed}-{run_key(cfg)}" / "result.json"
    return RunResult(**{**json.loads(record.read_text()), "cached": True}) if record.exists() else None
