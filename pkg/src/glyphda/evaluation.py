"""Accuracy measurement, multi-seed aggregation, feature export and image grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import write_container
from .data import Domain, LabeledSet, UnlabeledSet, iterate_batches, quantize

FEATURE_DUMP_VERSION = 1


@dataclass
class EvalResult:
    domain: Domain
    accuracy: float
    count: int
    per_class: np.ndarray  # nan where a class has no samples
    seed: Optional[int] = None


class _eval_mode:
    """Switch modules to eval mode, restoring their previous modes on exit."""

    def __init__(self, *modules):
        self.modules = modules

    def __enter__(self):
        self.modes = [m.training for m in self.modules]
        for m in self.modules:
            m.eval()

    def __exit__(self, *exc):
        for m, mode in zip(self.modules, self.modes):
            m.train(mode)


def _dtype(module: torch.nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def predict(encoder, classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax predictions; exact ties resolve to the lowest class index."""
    preds = []
    with _eval_mode(encoder, classifier), torch.no_grad():
        for x in iterate_batches(images, batch_size):
            logits = classifier(encoder(x.to(_dtype(encoder))).pooled).cpu().numpy()
            preds.append(np.argmax(logits, axis=1))  # first maximum wins
    return np.concatenate(preds)


def accuracy_from_predictions(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, np.ndarray]:
    correct = preds == labels
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        mask = labels == k
        if mask.any():
            per_class[k] = correct[mask].mean()
    return float(correct.mean()), per_class


def evaluate(encoder, classifier, data: LabeledSet, domain: Domain, seed: Optional[int] = None, batch_size: int = 256) -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    preds = predict(encoder, classifier, data.images, batch_size)
    acc, per_class = accuracy_from_predictions(preds, data.labels, classifier.out_features)
    return EvalResult(domain, acc, len(data), per_class, seed)


def aggregate_runs(results: Sequence[EvalResult]) -> tuple[float, float]:
    """Mean and population standard deviation of accuracy, in percent."""
    if len(results) < 2:
        raise ValueError("aggregation needs results from at least two runs")
    if len({r.domain for r in results}) != 1 or len({r.count for r in results}) != 1:
        raise ValueError("results must come from the same domain and dataset")
    acc = np.array([r.accuracy for r in results], dtype=np.float64) * 100.0
    return float(acc.mean()), float(acc.std(ddof=0))


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f}±{std:.1f}"


# --- feature export --------------------------------------------------------------


@dataclass
class FeatureDump:
    features: np.ndarray  # (n, c_g)
    labels: np.ndarray  # (n,), -1 where unknown
    domains: np.ndarray  # (n,), 0 source / 1 target
    version: int = FEATURE_DUMP_VERSION


def pooled_features(encoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with _eval_mode(encoder), torch.no_grad():
        for x in iterate_batches(images, batch_size):
            out.append(encoder(x.to(_dtype(encoder))).pooled.cpu().numpy())
    return np.concatenate(out).astype(np.float32)


def export_features(encoder, sets: Sequence[tuple[LabeledSet | UnlabeledSet, Domain]], path: str | Path,
                    quicklook: Optional[str | Path] = None) -> FeatureDump:
    feats, labels, domains = [], [], []
    for data, domain in sets:
        feats.append(pooled_features(encoder, data.images))
        lab = data.labels if isinstance(data, LabeledSet) else np.full(len(data), -1)
        labels.append(np.asarray(lab, dtype=np.int64))
        domains.append(np.full(len(data), 0 if domain is Domain.SOURCE else 1, dtype=np.int64))
    dump = FeatureDump(np.concatenate(feats), np.concatenate(labels), np.concatenate(domains))
    n, c = dump.features.shape
    write_container(path, {"kind": "feature-dump", "n": n, "c_g": c, "version": dump.version},
                    {"features": dump.features, "labels": dump.labels, "domains": dump.domains})
    if quicklook is not None:
        coords = pca_2d(dump.features)
        with open(quicklook, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pc1", "pc2", "label", "domain"])
            for (a, b), y, d in zip(coords, dump.labels, dump.domains):
                w.writerow([f"{a:.6g}", f"{b:.6g}", int(y), "source" if d == 0 else "target"])
    return dump


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Projection onto the first two principal components (signs fixed so each
    component's largest-magnitude loading is positive)."""
    x = features.astype(np.float64) - features.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    out = x @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


# --- image grids --------------------------------------------------------------------


def save_grid(columns: Sequence[torch.Tensor | np.ndarray], path: str | Path, pad: int = 2) -> np.ndarray:
    """One row per sample, one column per entry of ``columns`` (each (n, 3, h, w)
    in [-1, 1]). Returns the uint8 canvas that was written."""
    cols = [c.detach().cpu().numpy() if isinstance(c, torch.Tensor) else np.asarray(c) for c in columns]
    n, _, h, w = cols[0].shape
    if any(c.shape != cols[0].shape for c in cols):
        raise ValueError("grid columns must share a shape")
    canvas = np.full((n * (h + pad) + pad, len(cols) * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for j, col in enumerate(cols):
        q = quantize(col.transpose(0, 2, 3, 1))
        for i in range(n):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = q[i]
    Image.fromarray(canvas).save(path, optimize=False)
    return canvas
