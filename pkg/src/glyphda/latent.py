"""Encoding, latent assembly, texture swapping and decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .data import Domain, ImageBatch
from .networks import DOMAIN_DIM, TEXTURE_DIM, Networks, StructureCode


@dataclass
class LatentAssembly:
    structure: torch.Tensor  # (b, c_g, h', w')
    texture: torch.Tensor  # (b, 8)
    domain: Domain
    assembled: torch.Tensor  # (b, c_g + 10, h', w')


@dataclass
class QuadrupleOutputs:
    x_ss: torch.Tensor
    x_tt: torch.Tensor
    x_st: torch.Tensor  # source structure, target texture; labelled with y_s
    x_ts: torch.Tensor
    labels_st: Optional[torch.Tensor] = None


def encode(nets: Networks, x: ImageBatch) -> tuple[StructureCode, torch.Tensor]:
    if not isinstance(getattr(x, "domain", None), Domain):
        raise ValueError("batch carries no domain tag")
    texture_encoder = nets.texture_encoder_s if x.domain is Domain.SOURCE else nets.texture_encoder_t
    return nets.structure_encoder(x.pixels), texture_encoder(x.pixels)


def assemble(structure: torch.Tensor, texture: torch.Tensor, domain: Domain) -> LatentAssembly:
    """Broadcast the texture vector and one-hot domain code over every spatial
    position and concatenate them to the structure map along channels."""
    b, _, h, w = structure.shape
    if texture.shape[0] != b:
        raise ValueError(f"batch mismatch: structure {b}, texture {texture.shape[0]}")
    if texture.shape[1] != TEXTURE_DIM:
        raise ValueError(f"texture code must have {TEXTURE_DIM} entries")
    code = torch.tensor(domain.one_hot(), dtype=structure.dtype, device=structure.device)
    tex = texture.view(b, TEXTURE_DIM, 1, 1).expand(b, TEXTURE_DIM, h, w)
    dom = code.view(1, DOMAIN_DIM, 1, 1).expand(b, DOMAIN_DIM, h, w)
    return LatentAssembly(structure, texture, domain, torch.cat([structure, tex, dom], dim=1))


def split_assembled(assembled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Inverse of :func:`assemble`: (structure map, texture (b, 8), domain (b, 2))."""
    c = assembled.shape[1] - TEXTURE_DIM - DOMAIN_DIM
    structure = assembled[:, :c]
    texture = assembled[:, c:c + TEXTURE_DIM, 0, 0]
    domain = assembled[:, c + TEXTURE_DIM:, 0, 0]
    return structure, texture, domain


def transform_quadruple(nets: Networks, x_s: ImageBatch, x_t: ImageBatch,
                        codes: Optional[tuple] = None) -> QuadrupleOutputs:
    """Reconstruct both inputs and swap textures between the i-th source and
    i-th target sample. ``codes`` = (struct_s, tex_s, struct_t, tex_t) reuses
    precomputed encodings."""
    if len(x_s) != len(x_t):
        raise ValueError(f"batch mismatch: {len(x_s)} source vs {len(x_t)} target")
    if codes is None:
        g_s, n_s = encode(nets, x_s)
        g_t, n_t = encode(nets, x_t)
    else:
        g_s, n_s, g_t, n_t = codes
    z = torch.cat([
        assemble(g_s.spatial, n_s, Domain.SOURCE).assembled,
        assemble(g_t.spatial, n_t, Domain.TARGET).assembled,
        assemble(g_s.spatial, n_t, Domain.TARGET).assembled,
        assemble(g_t.spatial, n_s, Domain.SOURCE).assembled,
    ])
    # one generator call; every generator layer is per-sample
    x_ss, x_tt, x_st, x_ts = nets.generator(z).chunk(4)
    return QuadrupleOutputs(x_ss, x_tt, x_st, x_ts, labels_st=x_s.labels)
