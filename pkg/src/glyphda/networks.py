"""Every parametric function of the model plus the frozen perceptual extractor.

All tensors are NCHW. Builders are deterministic given an initialization seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import torch
import torch.nn as nn
import torchvision

from .config import ALL_TAPS, ExperimentConfig, ModelConfig

TEXTURE_DIM = 8
DOMAIN_DIM = 2


class WeightsMismatchError(ValueError):
    """A weights file does not match the network it is loaded into."""


@dataclass
class StructureCode:
    spatial: torch.Tensor  # (b, c_g, h', w'), input to the generator
    pooled: torch.Tensor  # (b, c_g), input to the classifier and feature discriminator


def dcgan_init(module: nn.Module, generator: torch.Generator) -> None:
    """Conv/deconv/linear weights ~ N(0, 0.02), biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def conv_bn_relu(cin: int, cout: int, k: int, s: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


# --- structure encoder ----------------------------------------------------------


class StructureEncoder(nn.Module):
    """Shared encoder: ``stem`` (also used by the texture encoders) then ``body``.

    ``dense`` is a position-wise projection applied before pooling, so the
    pooled vector is always the spatial mean of the spatial map.
    """

    def __init__(self, stem: nn.Module, body: nn.Module, stem_channels: int, width: int, dense: Optional[nn.Module] = None):
        super().__init__()
        self.stem = stem
        self.body = body
        self.dense = dense if dense is not None else nn.Identity()
        self.stem_channels = stem_channels
        self.width = width

    def forward(self, x: torch.Tensor) -> StructureCode:
        spatial = self.dense(self.body(self.stem(x)))
        return StructureCode(spatial, spatial.mean(dim=(2, 3)))


def small_conv_encoder(width: int = 512) -> StructureEncoder:
    """LeNet-style backbone for 32x32 inputs: two 5x5 conv blocks (32, 64) with
    stride-2 pooling, then a dense layer of ``width`` units per position."""
    stem = nn.Sequential(nn.Conv2d(3, 32, 5, 1, 2), nn.BatchNorm2d(32), nn.ReLU(inplace=True), nn.MaxPool2d(2))
    body = nn.Sequential(nn.Conv2d(32, 64, 5, 1, 2), nn.BatchNorm2d(64), nn.ReLU(inplace=True), nn.MaxPool2d(2))
    dense = nn.Sequential(nn.Conv2d(64, width, 1), nn.ReLU(inplace=True))
    return StructureEncoder(stem, body, 32, width, dense)


def residual18_encoder() -> StructureEncoder:
    net = torchvision.models.resnet18(weights=None)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu)
    body = nn.Sequential(net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4)
    return StructureEncoder(stem, body, 64, 512)


_RESNET_PREFIX = {"conv1.": "stem.0.", "bn1.": "stem.1.", "maxpool.": "body.0.", "layer1.": "body.1.",
                  "layer2.": "body.2.", "layer3.": "body.3.", "layer4.": "body.4."}


def _torchvision_resnet_keys(arrays: dict) -> dict:
    out = {}
    for k, v in arrays.items():
        if k.startswith("fc."):
            continue
        for old, new in _RESNET_PREFIX.items():
            if k.startswith(old):
                k = new + k[len(old):]
                break
        out[k] = v
    return out


def read_weight_arrays(path: str | Path) -> dict:
    """Named arrays from our own container or from a torch state dict file."""
    from .checkpoint import is_container, read_container

    path = Path(path)
    if is_container(path):
        _, arrays = read_container(path)
        return {k: torch.from_numpy(v) for k, v in arrays.items()}
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of pickle/zip errors
        raise WeightsMismatchError(f"{path}: malformed weights file ({e})") from None
    if isinstance(obj, dict) and "state_dict" in obj:
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise WeightsMismatchError(f"{path}: expected a mapping of named arrays")
    return obj


def load_named_arrays(module: nn.Module, arrays: dict, strict: bool = True) -> None:
    """Copy ``arrays`` into ``module``'s state, failing on the first name or shape mismatch."""
    state = module.state_dict()
    for name, ref in state.items():
        if name not in arrays:
            if strict:
                raise WeightsMismatchError(f"missing array {name!r}")
            continue
        got = arrays[name]
        if tuple(got.shape) != tuple(ref.shape):
            raise WeightsMismatchError(f"array {name!r}: expected shape {tuple(ref.shape)}, got {tuple(got.shape)}")
    extra = [k for k in arrays if k not in state]
    if extra and strict:
        raise WeightsMismatchError(f"unexpected array {extra[0]!r}")
    with torch.no_grad():
        for name, ref in state.items():
            if name in arrays:
                ref.copy_(torch.as_tensor(arrays[name], dtype=ref.dtype))


def build_structure_encoder(variant: str = "small-conv", weights: Optional[str | Path] = None, width: int = 512,
                            seed: int = 0) -> StructureEncoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if variant == "small-conv":
            enc = small_conv_encoder(width)
            dcgan_init(enc, torch.Generator().manual_seed(seed))
        elif variant == "residual-18":
            enc = residual18_encoder()  # keeps the torchvision initialization
        else:
            raise ValueError(f"unknown structure encoder variant {variant!r}")
    if weights is not None:
        arrays = read_weight_arrays(weights)
        if variant == "residual-18" and any(k.startswith("layer1.") for k in arrays):
            arrays = _torchvision_resnet_keys(arrays)
        load_named_arrays(enc, arrays)
    return enc


# --- texture encoder -------------------------------------------------------------


class TextureEncoder(nn.Module):
    """Private texture encoder. The first block is the structure encoder's stem,
    held by reference and not registered here, so its parameters stay owned by
    (and are optimized with) the structure encoder."""

    def __init__(self, shared_stem: nn.Module, stem_channels: int):
        super().__init__()
        self._shared = [shared_stem]
        self.blocks = nn.Sequential(
            conv_bn_relu(stem_channels, 64, 7, 2),
            conv_bn_relu(64, 128, 3, 2),
            conv_bn_relu(128, 256, 3, 2),
            conv_bn_relu(256, 256, 3, 2),
            conv_bn_relu(256, 256, 3, 2),
        )
        self.head = nn.Conv2d(256, TEXTURE_DIM, 1)

    @property
    def stem(self) -> nn.Module:
        return self._shared[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(x))
        return self.head(h.mean(dim=(2, 3), keepdim=True)).flatten(1)


def build_texture_encoder(structure_encoder: StructureEncoder, seed: int = 0) -> TextureEncoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = TextureEncoder(structure_encoder.stem, structure_encoder.stem_channels)
    dcgan_init(enc, torch.Generator().manual_seed(seed))
    return enc


# --- generator -------------------------------------------------------------------


class Generator(nn.Module):
    def __init__(self, in_channels: int, deconv: tuple[int, ...], conv: tuple[int, ...]):
        super().__init__()
        layers = []
        c = in_channels
        for d, k in zip(deconv, conv):
            layers += [
                nn.ConvTranspose2d(c, d, 4, 2, 1),
                nn.InstanceNorm2d(d),
                nn.ReLU(inplace=True),
                nn.Conv2d(d, k, 3, 1, 1),
                nn.GroupNorm(1, k),  # layer norm over (c, h, w)
                nn.ReLU(inplace=True),
            ]
            c = k
        self.stages = len(deconv)
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Conv2d(c, 3, 1), nn.Tanh())

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(z))


def generator_stages(image_side: int, latent_side: int, max_stages: int = 5) -> int:
    ratio = image_side / latent_side
    stages = int(round(math.log2(ratio))) if ratio >= 2 else 0
    if stages < 1 or latent_side * 2**stages != image_side or stages > max_stages:
        raise ValueError(
            f"latent side {latent_side} cannot reach image side {image_side} with up to {max_stages} doubling stages"
        )
    return stages


def build_generator(structure_width: int, image_side: int, latent_side: int,
                    deconv: tuple[int, ...] = (256, 128, 64, 32, 32),
                    conv: tuple[int, ...] = (128, 64, 32, 32, 32), seed: int = 0) -> Generator:
    """Five deconv groups at 224 px from a 7x7 code; smaller images use the first
    ``log2(image_side / latent_side)`` groups."""
    stages = generator_stages(image_side, latent_side, len(deconv))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        g = Generator(structure_width + TEXTURE_DIM + DOMAIN_DIM, deconv[:stages], conv[:stages])
    dcgan_init(g, torch.Generator().manual_seed(seed))
    return g


# --- discriminators and classifier ------------------------------------------------


def _conv_out(side: int, k: int, s: int, p: int) -> int:
    return (side + 2 * p - k) // s + 1


class ImageDiscriminator(nn.Module):
    """Four Conv-IN-LReLU blocks and a linear unit. Scores are raw (unsquashed)."""

    def __init__(self, image_side: int, width: int = 64):
        super().__init__()
        specs = [(width, 6, 2, 2), (width * 2, 4, 2, 1), (width * 4, 4, 2, 1), (width * 8, 4, 2, 1)]
        layers, c, side = [], 3, image_side
        for cout, k, s, p in specs:
            layers += [nn.Conv2d(c, cout, k, s, p), nn.InstanceNorm2d(cout), nn.LeakyReLU(0.2, inplace=True)]
            c, side = cout, _conv_out(side, k, s, p)
        if side < 1:
            raise ValueError(f"image side {image_side} too small for the image discriminator")
        self.features = nn.Sequential(*layers)
        self.score = nn.Linear(c * side * side, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.score(self.features(x).flatten(1))


def build_image_discriminator(image_side: int, width: int = 64, seed: int = 0) -> ImageDiscriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        d = ImageDiscriminator(image_side, width)
    dcgan_init(d, torch.Generator().manual_seed(seed))
    return d


def build_feature_discriminator(input_width: int, hidden: int = 1024, seed: int = 0) -> nn.Sequential:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        d = nn.Sequential(
            nn.Linear(input_width, hidden), nn.ReLU(inplace=True), nn.Dropout(0.5),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True), nn.Dropout(0.5),
            nn.Linear(hidden, 1), nn.Sigmoid(),
        )
    dcgan_init(d, torch.Generator().manual_seed(seed))
    return d


def build_classifier(input_width: int, num_classes: int, seed: int = 0) -> nn.Linear:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    c = nn.Linear(input_width, num_classes)
    dcgan_init(c, torch.Generator().manual_seed(seed))
    return c


# --- perceptual extractor ----------------------------------------------------------

# 16-layer VGG feature stack up to relu5_1: (name, out_channels) or "M" for pooling
_VGG_LAYERS = [
    ("1_1", 64), ("1_2", 64), "M",
    ("2_1", 128), ("2_2", 128), "M",
    ("3_1", 256), ("3_2", 256), ("3_3", 256), "M",
    ("4_1", 512), ("4_2", 512), ("4_3", 512), "M",
    ("5_1", 512),
]
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualExtractor(nn.Module):
    """Frozen VGG-16 feature stack exposing relu1_1 .. relu5_1.

    Layer indices match torchvision's ``vgg16().features`` so its state dict
    loads directly. Pooling uses ceil mode, which is identical at even sizes
    and keeps relu5_1 non-empty for tiny inputs.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        layers, taps, c = [], {}, 3
        for item in _VGG_LAYERS:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
                continue
            name, cout = item
            cout = max(1, int(round(cout * width)))
            layers += [nn.Conv2d(c, cout, 3, 1, 1), nn.ReLU(inplace=False)]
            taps[len(layers) - 1] = f"relu{name}"
            c = cout
        self.features = nn.Sequential(*layers)
        self._tap_at = {i: n for i, n in taps.items() if n in ALL_TAPS}
        self.tap_names = tuple(self._tap_at.values())
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def freeze(self) -> "PerceptualExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        return super().train(False)

    def forward(self, x: torch.Tensor, taps: Optional[Iterable[str]] = None) -> dict[str, torch.Tensor]:
        wanted = set(self.tap_names if taps is None else taps)
        missing = wanted - set(self.tap_names)
        if missing:
            raise KeyError(f"unknown perceptual taps {sorted(missing)}")
        h = ((x + 1.0) / 2.0 - self.mean) / self.std
        out = {}
        last = max(i for i, n in self._tap_at.items() if n in wanted)
        for i, layer in enumerate(self.features):
            h = layer(h)
            name = self._tap_at.get(i)
            if name in wanted:
                out[name] = h
            if i == last:
                break
        return {n: out[n] for n in self.tap_names if n in out}


def build_perceptual_extractor(weights: Optional[str | Path] = None, width: float = 1.0, seed: int = 0) -> PerceptualExtractor:
    """Pretrained weights when given; otherwise a fixed He-normal draw from ``seed``.

    ``width`` scales every layer's channel count; a weights file must match it.
    """
    vgg = PerceptualExtractor(width)
    if weights is not None:
        arrays = read_weight_arrays(weights)
        arrays = {k: v for k, v in arrays.items() if k.startswith("features.")}
        arrays = {k: v for k, v in arrays.items() if int(k.split(".")[1]) < len(vgg.features)}
        load_named_arrays(vgg, {**arrays, "mean": vgg.mean, "std": vgg.std})
    else:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in vgg.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                    m.bias.zero_()
    return vgg.freeze()


# --- the full set ----------------------------------------------------------------

NETWORK_NAMES = (
    "structure_encoder", "texture_encoder_s", "texture_encoder_t", "generator",
    "image_disc_s", "image_disc_t", "feature_disc", "classifier",
)


class Networks(nn.Module):
    """The eight trainable networks. The perceptual extractor is kept outside the
    module tree so it never appears in parameter stores or checkpoints."""

    def __init__(self, structure_encoder, texture_encoder_s, texture_encoder_t, generator,
                 image_disc_s, image_disc_t, feature_disc, classifier, perceptual):
        super().__init__()
        self.structure_encoder = structure_encoder
        self.texture_encoder_s = texture_encoder_s
        self.texture_encoder_t = texture_encoder_t
        self.generator = generator
        self.image_disc_s = image_disc_s
        self.image_disc_t = image_disc_t
        self.feature_disc = feature_disc
        self.classifier = classifier
        self._perceptual = [perceptual]

    @property
    def perceptual(self) -> PerceptualExtractor:
        return self._perceptual[0]

    def to(self, *args, **kwargs):
        super().to(*args, **kwargs)
        self._perceptual[0] = self.perceptual.to(*args, **kwargs)
        return self

    def double(self):
        return self.to(torch.float64)

    def network(self, name: str) -> nn.Module:
        return getattr(self, name)

    def parameters_of(self, name: str) -> list[nn.Parameter]:
        return list(self.network(name).parameters())

    def parameter_store(self) -> dict[str, torch.Tensor]:
        """Flat ``network/array`` -> tensor map of all trainable state (incl. buffers)."""
        store = {}
        for name in NETWORK_NAMES:
            for k, v in self.network(name).state_dict().items():
                store[f"{name}/{k}"] = v
        return store

    def load_parameter_store(self, store: dict) -> None:
        for name in NETWORK_NAMES:
            prefix = f"{name}/"
            load_named_arrays(self.network(name), {k[len(prefix):]: v for k, v in store.items() if k.startswith(prefix)})
        extra = [k for k in store if k.split("/", 1)[0] not in NETWORK_NAMES]
        if extra:
            raise WeightsMismatchError(f"unexpected array {extra[0]!r}")


def build_networks(cfg: ExperimentConfig, seed: Optional[int] = None) -> Networks:
    m = cfg.model
    side = cfg.data.side
    seed = m.init_seed if m.init_seed is not None else (cfg.seed if seed is None else seed)
    # distinct, fixed sub-seeds per network
    sub = {name: seed * 1000 + i for i, name in enumerate(NETWORK_NAMES)}
    eg = build_structure_encoder(m.backbone, m.backbone_weights, m.structure_width, sub["structure_encoder"])
    with torch.no_grad():
        lat = eg.eval()(torch.zeros(1, 3, side, side)).spatial.shape[-1]
    eg.train()
    return Networks(
        structure_encoder=eg,
        texture_encoder_s=build_texture_encoder(eg, sub["texture_encoder_s"]),
        texture_encoder_t=build_texture_encoder(eg, sub["texture_encoder_t"]),
        generator=build_generator(eg.width, side, lat, m.generator_deconv, m.generator_conv, sub["generator"]),
        image_disc_s=build_image_discriminator(side, m.disc_width, sub["image_disc_s"]),
        image_disc_t=build_image_discriminator(side, m.disc_width, sub["image_disc_t"]),
        feature_disc=build_feature_discriminator(eg.width, m.feature_disc_hidden, sub["feature_disc"]),
        classifier=build_classifier(eg.width, m.num_classes, sub["classifier"]),
        perceptual=build_perceptual_extractor(m.perceptual_weights, m.perceptual_width, seed=0),
    )
