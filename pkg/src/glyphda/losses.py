"""Objectives: classification, feature- and image-level adversarial,
perceptual, reconstruction, and their weighted total.

Functions that take a network accept any callable with the same contract,
which keeps closed-form checks (e.g. a discriminator pinned at 0.5) simple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Optional

import torch
import torch.nn.functional as F

from .config import AblationFlags, LossWeights, PerceptualSpec

EPS = 1e-7

TERMS = ("cls_s", "cls_st", "advF_d", "advF_e", "advI_d", "advI_g", "per", "rec")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} = {value}")
        self.term = term


@dataclass
class LossReport:
    cls_s: float = 0.0
    cls_st: float = 0.0
    advF_d: float = 0.0  # discriminator objective (log-likelihood, <= 0)
    advF_e: float = 0.0
    advI_d: float = 0.0
    advI_g: float = 0.0
    per: float = 0.0
    rec: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    return F.cross_entropy(logits, labels)


def cls_source(classifier: Callable, encoder: Callable, x_s: torch.Tensor, y_s: Optional[torch.Tensor]) -> torch.Tensor:
    if y_s is None:
        raise ValueError("source classification needs labels")
    return cross_entropy(classifier(encoder(x_s).pooled), y_s)


def cls_transformed(classifier: Callable, encoder: Callable, generator: Callable, z_st: torch.Tensor, y_s: Optional[torch.Tensor]) -> torch.Tensor:
    """Transformed target-like images carry their source labels."""
    if y_s is None:
        raise ValueError("transformed-image classification needs the source labels")
    return cross_entropy(classifier(encoder(generator(z_st)).pooled), y_s)


def _probabilities(d: torch.Tensor) -> torch.Tensor:
    if torch.any((d < 0) | (d > 1)) or not torch.all(torch.isfinite(d)):
        raise ValueError("feature discriminator output outside (0, 1)")
    return d.clamp(EPS, 1 - EPS)


def advF_discriminator(feature_disc: Callable, f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """E[log D(f_t)] + E[log(1 - D(f_s))]; the discriminator maximizes it, so
    its update minimizes the negation. Value is <= 0."""
    p_s, p_t = _probabilities(feature_disc(f_s)), _probabilities(feature_disc(f_t))
    return torch.log(p_t).mean() + torch.log(1 - p_s).mean()


def advF_encoder(feature_disc: Callable, f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """Domain labels inverted: -(E[log D(f_s)] + E[log(1 - D(f_t))]), >= 0."""
    p_s, p_t = _probabilities(feature_disc(f_s)), _probabilities(feature_disc(f_t))
    return -(torch.log(p_s).mean() + torch.log(1 - p_t).mean())


def lsgan_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_scores - 1) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def lsgan_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((fake_scores - 1) ** 2).mean()


def advI_discriminator(image_disc: Callable, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return lsgan_discriminator(image_disc(real), image_disc(fake.detach()))


def advI_generator(image_disc: Callable, fake: torch.Tensor) -> torch.Tensor:
    return lsgan_generator(image_disc(fake))


def channel_mean(f: torch.Tensor) -> torch.Tensor:
    """(b, c, h, w) -> (b, c) mean over spatial positions."""
    return f.mean(dim=(2, 3))


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


TapMap = Mapping[str, torch.Tensor]


def perceptual_terms(spec: PerceptualSpec, phi_s: TapMap, phi_t: TapMap, phi_st: TapMap, phi_ts: TapMap
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """(structure term, texture term) from precomputed tap features."""
    structure = sum(
        w * (l1(phi_s[n], phi_st[n]) + l1(phi_t[n], phi_ts[n])) for n, w in spec.structure_taps
    )
    texture = sum(
        w * (l1(channel_mean(phi_t[n]), channel_mean(phi_st[n])) + l1(channel_mean(phi_s[n]), channel_mean(phi_ts[n])))
        for n, w in spec.texture_taps
    )
    return structure, texture


def reconstruction_term(spec: PerceptualSpec, phi_s: TapMap, phi_t: TapMap, phi_ss: TapMap, phi_tt: TapMap) -> torch.Tensor:
    return sum(w * (l1(phi_t[n], phi_tt[n]) + l1(phi_s[n], phi_ss[n])) for n, w in spec.reconstruction_taps)


def _taps(vgg: Callable, x: torch.Tensor, spec: PerceptualSpec) -> dict[str, torch.Tensor]:
    return vgg(x, spec.tap_names())


def perceptual_loss(vgg: Callable, spec: PerceptualSpec, x_s, x_t, x_st, x_ts) -> torch.Tensor:
    structure, texture = perceptual_terms(spec, _taps(vgg, x_s, spec), _taps(vgg, x_t, spec),
                                          _taps(vgg, x_st, spec), _taps(vgg, x_ts, spec))
    return structure + texture


def reconstruction_loss(vgg: Callable, spec: PerceptualSpec, x_s, x_t, x_ss, x_tt) -> torch.Tensor:
    return reconstruction_term(spec, _taps(vgg, x_s, spec), _taps(vgg, x_t, spec),
                               _taps(vgg, x_ss, spec), _taps(vgg, x_tt, spec))


def weighted_total(terms: Mapping[str, torch.Tensor | float], weights: LossWeights,
                   flags: AblationFlags = AblationFlags()):
    """cls_s + cls_st + a1*advF_e + a2*advI_g + a3*per + a4*rec over enabled terms.
    Works on tensors (differentiable) and on plain floats."""
    parts = [(1.0, "cls_s", True), (1.0, "cls_st", flags.use_cls_st),
             (weights.alpha1, "advF_e", flags.use_advF), (weights.alpha2, "advI_g", flags.use_advI),
             (weights.alpha3, "per", flags.use_per), (weights.alpha4, "rec", flags.use_rec)]
    total = 0.0
    for w, name, on in parts:
        if on and name in terms:
            total = total + w * terms[name]
    return total


def total_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights,
               flags: AblationFlags = AblationFlags()) -> LossReport:
    enabled = {"cls_s": True, "cls_st": flags.use_cls_st, "advF_d": flags.use_advF, "advF_e": flags.use_advF,
               "advI_d": flags.use_advI, "advI_g": flags.use_advI, "per": flags.use_per, "rec": flags.use_rec}
    values = {name: float(terms[name]) if enabled[name] and name in terms else 0.0 for name in TERMS}
    report = LossReport(**values, total=float(weighted_total(values, weights, flags)))
    for name, v in report.as_dict().items():
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return report
