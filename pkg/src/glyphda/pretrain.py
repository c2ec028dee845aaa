"""Fit a perceptual extractor on the labeled source corpus.

The perceptual losses expect a frozen feature stack whose deep taps encode
layout. Without ImageNet weights, a fixed-random stack does not: its deep
activations barely depend on glyph shape, so a generator trained against it
collapses to a constant texture. Training the same topology to classify the
labeled source images (a global-average-pooled relu5_1 head, discarded after
training) gives taps that do. No target-domain labels are used.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import write_container
from .data import LabeledSet, augment_batch, to_tensor
from .networks import PerceptualExtractor, build_perceptual_extractor

log = logging.getLogger(__name__)


def pretrain_perceptual(source: LabeledSet, num_classes: int, width: float = 1.0, steps: int = 600,
                        batch_size: int = 32, lr: float = 1e-3, seed: int = 0, crop_pad: int = 2) -> PerceptualExtractor:
    """Train the feature stack plus a linear head on ``source``; return the frozen stack."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    batch_size = min(batch_size, len(source))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        vgg = build_perceptual_extractor(width=width, seed=seed)
        for p in vgg.features.parameters():
            p.requires_grad_(True)
        width_out = [m for m in vgg.features if isinstance(m, torch.nn.Conv2d)][-1].out_channels
        head = torch.nn.Linear(width_out, num_classes)
    opt = torch.optim.Adam(list(vgg.features.parameters()) + list(head.parameters()), lr=lr)
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(source.labels.astype(np.int64))
    for step in range(steps):
        idx = rng.choice(len(source), batch_size, replace=False)
        x = to_tensor(augment_batch(source.images[idx], rng, crop_pad, False))
        logits = head(vgg(x, ["relu5_1"])["relu5_1"].mean(dim=(2, 3)))
        loss = F.cross_entropy(logits, labels[torch.from_numpy(idx)])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("perceptual pretraining step %d loss %.4f", step, loss.item())
    return vgg.freeze()


def save_perceptual(vgg: PerceptualExtractor, path: str | Path, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in vgg.state_dict().items() if k.startswith("features.")}
    write_container(path, {"kind": "perceptual-weights", **meta}, arrays)
    return path
