"""Corpora, synthetic glyphs, degradations and the paired batch stream.

Image sets hold float32 arrays shaped (n, side, side, 3) with values in
[-1, 1]. Batches handed to networks are torch tensors in NCHW layout.
"""

from __future__ import annotations

import enum
import gzip
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

IMAGE_SUFFIXES = {".png", ".bmp", ".gif", ".tif", ".tiff", ".jpg", ".jpeg", ".webp"}


class CorpusError(ValueError):
    pass


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"

    def one_hot(self) -> tuple[float, float]:
        return (1.0, 0.0) if self is Domain.SOURCE else (0.0, 1.0)


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # (b, 3, h, w) in [-1, 1]
    domain: Domain
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"expected (b, 3, h, w) pixels, got {tuple(self.pixels.shape)}")
        if (self.labels is not None) != (self.domain is Domain.SOURCE):
            raise ValueError("labels must be present exactly for source batches")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class UnlabeledSet:
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CorpusError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    def unlabeled(self) -> UnlabeledSet:
        """Training-facing view of a target corpus: labels stay behind."""
        return UnlabeledSet(self.images)

    def head(self, n: Optional[int]) -> "LabeledSet":
        if n is None:
            return self
        return LabeledSet(self.images[:n], self.labels[:n])


def to_unit_range(gray: np.ndarray) -> np.ndarray:
    """uint8 grey (n, h, w) -> float32 (n, h, w, 3) in [-1, 1]."""
    x = gray.astype(np.float32) / 127.5 - 1.0
    return np.repeat(x[..., None], 3, axis=-1)


def resize_stack(gray: np.ndarray, side: int) -> np.ndarray:
    if gray.shape[1:] == (side, side):
        return gray
    return np.stack(
        [np.asarray(Image.fromarray(g).resize((side, side), Image.BILINEAR)) for g in gray]
    )


# --- IDX ----------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
               0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise CorpusError(f"{path}: bad magic number")
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorpusError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header < count * dtype.itemsize:
        raise CorpusError(f"{path}: truncated payload ({len(raw) - header} bytes for {dims})")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def load_idx_corpus(images_path: str | Path, labels_path: str | Path, side: Optional[int] = None) -> LabeledSet:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise CorpusError(f"{images_path}: expected a 3-axis image array, got {images.ndim} axes")
    if labels.ndim != 1:
        raise CorpusError(f"{labels_path}: expected a 1-axis label array")
    if len(images) != len(labels):
        raise CorpusError(f"image/label count mismatch: {len(images)} vs {len(labels)}")
    gray = images.astype(np.uint8)
    if side is not None:
        gray = resize_stack(gray, side)
    return LabeledSet(to_unit_range(gray), labels.astype(np.int64))


# --- class-per-directory trees -------------------------------------------------


def _read_gray(path: Path, side: Optional[int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise CorpusError(f"unreadable image {path}: {e}") from None


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder_corpus(root: str | Path, side: Optional[int] = None) -> LabeledSet | UnlabeledSet:
    """Class subdirectories give a labeled set (index = sorted name order); a flat
    directory of images gives an unlabeled set."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"{root}: not a directory")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if classes:
        gray, labels = [], []
        for k, d in enumerate(classes):
            for f in _image_files(d):
                gray.append(_read_gray(f, side))
                labels.append(k)
        if not gray:
            raise CorpusError(f"{root}: no images found")
        return LabeledSet(to_unit_range(np.stack(gray)), np.asarray(labels, dtype=np.int64))
    files = _image_files(root)
    if not files:
        raise CorpusError(f"{root}: empty corpus root")
    return UnlabeledSet(to_unit_range(np.stack([_read_gray(f, side) for f in files])))


def write_folder_corpus(root: str | Path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    """Write images in [-1, 1] as ``root/<class>/<index>.png`` (lossless, grey)."""
    root = Path(root)
    width = len(str(num_classes - 1))
    for k in range(num_classes):
        (root / f"{k:0{width}d}").mkdir(parents=True, exist_ok=True)
    for i, (img, y) in enumerate(zip(images, labels)):
        Image.fromarray(quantize(img)[..., 0]).save(root / f"{int(y):0{width}d}" / f"{i:06d}.png")


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# --- degradations --------------------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    occlusion_count: tuple[int, int] = (0, 0)
    occlusion_size: tuple[float, float] = (0.0, 0.0)  # fraction of the image side
    salt_pepper: float = 0.0
    morph_radius: tuple[int, int] = (0, 0)
    morph_prob: float = 0.0
    contrast: tuple[float, float] = (0.0, 0.0)  # fraction of contrast removed
    thickness_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_count", "occlusion_size", "morph_radius", "contrast"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name}: expected 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("salt_pepper", "morph_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if self.contrast[1] > 1 or self.occlusion_size[1] > 1:
            raise ValueError("contrast and occlusion_size are fractions in [0, 1]")

    @classmethod
    def from_config(cls, cfg, seed: int = 0) -> "DegradationSpec":
        return cls(
            occlusion_count=tuple(cfg.occlusion_count), occlusion_size=tuple(cfg.occlusion_size),
            salt_pepper=cfg.salt_pepper, morph_radius=tuple(cfg.morph_radius), morph_prob=cfg.morph_prob,
            contrast=tuple(cfg.contrast), thickness_jitter=cfg.thickness_jitter, seed=seed,
        )


BACKGROUND = -1.0


def _place_patches(rng: np.random.Generator, count: int, h: int, w: int, size: tuple[float, float]):
    boxes = []
    for _ in range(count):
        for _attempt in range(100):
            ph = max(1, int(round(rng.uniform(*size) * h)))
            pw = max(1, int(round(rng.uniform(*size) * w)))
            y = int(rng.integers(0, h - ph + 1))
            x = int(rng.integers(0, w - pw + 1))
            # keep a one-pixel gap so patches stay separate regions
            if all(y > by + bh or by > y + ph or x > bx + bw or bx > x + pw for by, bx, bh, bw in boxes):
                break
        boxes.append((y, x, ph, pw))
    return boxes


def apply_degradation(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Occlusion, salt-and-pepper, stroke erosion/dilation, then ink/contrast
    variation, in that order. Pure in (image, spec)."""
    rng = np.random.default_rng(spec.seed)
    out = np.array(image, dtype=np.float32, copy=True)
    h, w = out.shape[:2]

    n = int(rng.integers(spec.occlusion_count[0], spec.occlusion_count[1] + 1))
    if n and spec.occlusion_size[1] > 0:
        for y, x, ph, pw in _place_patches(rng, n, h, w, spec.occlusion_size):
            out[y:y + ph, x:x + pw] = BACKGROUND

    if spec.salt_pepper > 0:
        flip = rng.random((h, w)) < spec.salt_pepper
        value = np.where(rng.random((h, w)) < 0.5, -1.0, 1.0).astype(np.float32)
        out[flip] = value[flip][:, None]

    if spec.morph_prob > 0 and rng.random() < spec.morph_prob:
        r = int(rng.integers(spec.morph_radius[0], spec.morph_radius[1] + 1))
        if r > 0:
            op = ndimage.grey_dilation if rng.random() < 0.5 else ndimage.grey_erosion
            out = op(out, size=(2 * r + 1, 2 * r + 1, 1))

    if spec.thickness_jitter > 0:
        r = int(rng.integers(0, spec.thickness_jitter + 1))
        if r > 0:
            out = ndimage.grey_dilation(out, size=(2 * r + 1, 2 * r + 1, 1))

    if spec.contrast[1] > 0:
        scale = 1.0 - rng.uniform(*spec.contrast)
        # fade strokes toward the background level
        out = BACKGROUND + scale * (out - BACKGROUND)

    return np.clip(out, -1.0, 1.0).astype(np.float32)


# --- synthetic glyphs ----------------------------------------------------------


def _glyph_prototype(rng: np.random.Generator) -> list[np.ndarray]:
    """A few strokes (polylines) in the unit square."""
    strokes = []
    for _ in range(int(rng.integers(2, 5))):
        kind = rng.integers(0, 3)
        if kind == 0:  # straight stroke
            pts = rng.uniform(0.15, 0.85, size=(2, 2))
        elif kind == 1:  # bent stroke
            pts = rng.uniform(0.15, 0.85, size=(3, 2))
        else:  # arc
            c = rng.uniform(0.35, 0.65, size=2)
            r = rng.uniform(0.15, 0.3)
            a0 = rng.uniform(0, 2 * np.pi)
            t = a0 + np.linspace(0, rng.uniform(np.pi / 2, 1.6 * np.pi), 8)
            pts = c + r * np.stack([np.cos(t), np.sin(t)], axis=1)
        strokes.append(pts)
    return strokes


def render_glyph(strokes: list[np.ndarray], side: int, rng: np.random.Generator, scale: int = 4) -> np.ndarray:
    """Render one writing-style variant: affine warp, point jitter, stroke width."""
    angle = rng.uniform(-0.25, 0.25)
    zoom = rng.uniform(0.85, 1.1)
    shear = rng.uniform(-0.2, 0.2)
    shift = rng.uniform(-0.06, 0.06, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    affine = zoom * rot @ np.array([[1.0, shear], [0.0, 1.0]])
    big = side * scale
    width = max(1, int(round(rng.uniform(0.05, 0.1) * big)))
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    for pts in strokes:
        p = (pts - 0.5) @ affine.T + 0.5 + shift + rng.normal(0, 0.015, size=pts.shape)
        xy = [tuple(q) for q in (p * big)]
        draw.line(xy, fill=255, width=width, joint="curve")
        r = width / 2
        for x, y in (xy[0], xy[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=255)
    small = canvas.resize((side, side), Image.LANCZOS)
    return np.asarray(small, dtype=np.uint8)


@dataclass
class GlyphCorpus:
    clean: LabeledSet
    degraded: LabeledSet  # labels are for evaluation only


def synth_glyph_corpus(
    num_classes: int,
    per_class: int,
    seed: int,
    degradation: Optional[DegradationSpec] = None,
    side: int = 32,
    split: str = "train",
    paired: bool = False,
) -> GlyphCorpus:
    """Procedural stroke glyphs (clean) and degraded renderings of the same classes.

    Glyph prototypes depend only on ``seed``; writing-style draws depend on the
    split. Degraded images are drawn from a disjoint jitter stream unless
    ``paired`` is set, in which case they degrade the clean renderings one to one.
    """
    if num_classes < 2 or per_class < 2:
        raise CorpusError("need at least 2 classes and 2 images per class")
    degradation = degradation or DegradationSpec()
    proto_rng = np.random.default_rng([seed, 0])
    prototypes = [_glyph_prototype(proto_rng) for _ in range(num_classes)]
    split_id = {"train": 1, "test": 2}[split]
    clean_rng = np.random.default_rng([seed, split_id, 0])
    held_rng = np.random.default_rng([seed, split_id, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    clean = np.stack([render_glyph(prototypes[k], side, clean_rng) for k in labels])
    held = clean if paired else np.stack([render_glyph(prototypes[k], side, held_rng) for k in labels])
    held = to_unit_range(held)
    deg_seeds = np.random.default_rng([seed, split_id, 2]).integers(0, 2**31 - 1, size=len(labels))
    degraded = np.stack([
        apply_degradation(img, replace(degradation, seed=int(s))) for img, s in zip(held, deg_seeds)
    ])
    return GlyphCorpus(LabeledSet(to_unit_range(clean), labels), LabeledSet(degraded, labels.copy()))


def write_glyph_corpus(out: str | Path, corpus: GlyphCorpus, num_classes: int, manifest: dict) -> None:
    out = Path(out)
    write_folder_corpus(out / "clean", corpus.clean.images, corpus.clean.labels, num_classes)
    write_folder_corpus(out / "degraded", corpus.degraded.images, corpus.degraded.labels, num_classes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- batch stream --------------------------------------------------------------


class _EpochSampler:
    """Reshuffles each epoch and yields only full batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            raise CorpusError(f"batch size {batch_size} exceeds set size {n}")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(), "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = state["pos"]


def augment_batch(images: np.ndarray, rng: np.random.Generator, crop_pad: int, flip: bool) -> np.ndarray:
    """Random pad-then-crop and random horizontal flip, per image."""
    n, h, w, _ = images.shape
    out = images
    if crop_pad > 0:
        padded = np.pad(images, ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad), (0, 0)), mode="edge")
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        out = np.stack([padded[i, y:y + h, x:x + w] for i, (y, x) in enumerate(offs)])
    if flip:
        mask = rng.random(n) < 0.5
        out = np.where(mask[:, None, None, None], out[:, :, ::-1], out)
    return out


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


class BatchStream:
    """Endless paired (source, target) batches, deterministic given the seed."""

    def __init__(self, source: LabeledSet, target: LabeledSet | UnlabeledSet, batch_size: int, seed: int,
                 crop_pad: int = 0, flip: bool = False):
        if len(source) == 0 or len(target) == 0:
            raise CorpusError("source and target sets must be non-empty")
        self.source, self.target = source, target
        self.crop_pad, self.flip = crop_pad, flip
        ss = np.random.SeedSequence(seed)
        s_seed, t_seed, a_seed = ss.spawn(3)
        self._src = _EpochSampler(len(source), batch_size, np.random.default_rng(s_seed))
        self._tgt = _EpochSampler(len(target), batch_size, np.random.default_rng(t_seed))
        self._aug = np.random.default_rng(a_seed)

    def __iter__(self) -> Iterator[tuple[ImageBatch, ImageBatch]]:
        return self

    def next_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return self._src.next(), self._tgt.next()

    def __next__(self) -> tuple[ImageBatch, ImageBatch]:
        si, ti = self.next_indices()
        xs, xt = self.source.images[si], self.target.images[ti]
        if self.crop_pad or self.flip:
            xs = augment_batch(xs, self._aug, self.crop_pad, self.flip)
            xt = augment_batch(xt, self._aug, self.crop_pad, self.flip)
        src = ImageBatch(to_tensor(xs), Domain.SOURCE, torch.from_numpy(self.source.labels[si]))
        tgt = ImageBatch(to_tensor(xt), Domain.TARGET)
        return src, tgt

    def state(self) -> dict:
        return {"source": self._src.state(), "target": self._tgt.state(), "augment": self._aug.bit_generator.state}

    def restore(self, state: dict) -> None:
        self._src.restore(state["source"])
        self._tgt.restore(state["target"])
        self._aug.bit_generator.state = state["augment"]


def batch_stream(source: LabeledSet, target: LabeledSet | UnlabeledSet, batch_size: int, seed: int,
                 crop_pad: int = 0, flip: bool = False) -> BatchStream:
    if isinstance(target, LabeledSet):
        target = target.unlabeled()
    return BatchStream(source, target, batch_size, seed, crop_pad, flip)


def iterate_batches(images: np.ndarray, batch_size: int) -> Iterator[torch.Tensor]:
    for i in range(0, len(images), batch_size):
        yield to_tensor(images[i:i + batch_size])


def subset(s: LabeledSet, indices: Sequence[int]) -> LabeledSet:
    idx = np.asarray(indices)
    return LabeledSet(s.images[idx], s.labels[idx])


# --- config-driven corpora -------------------------------------------------------


@dataclass
class Corpora:
    source: LabeledSet
    target: UnlabeledSet  # training view; target labels never reach the trainer
    source_eval: Optional[LabeledSet] = None
    target_eval: Optional[LabeledSet] = None


_SYNTH_CACHE: dict = {}


def _synth(dcfg, split: str) -> GlyphCorpus:
    s = dcfg.synth
    key = (s, dcfg.side, split)
    if key not in _SYNTH_CACHE:
        per_class = s.per_class if split == "train" else s.test_per_class
        _SYNTH_CACHE[key] = synth_glyph_corpus(
            s.classes, per_class, s.seed, DegradationSpec.from_config(s.degradation), dcfg.side, split
        )
    return _SYNTH_CACHE[key]


def load_corpus(spec, dcfg) -> LabeledSet | UnlabeledSet:
    if spec.kind == "synth":
        corpus = _synth(dcfg, spec.split)
        out = corpus.clean if spec.role == "clean" else corpus.degraded
    elif spec.kind == "idx":
        out = load_idx_corpus(spec.images, spec.labels, dcfg.side)
    else:
        out = load_folder_corpus(spec.root, dcfg.side)
    if spec.limit is not None:
        out = out.head(spec.limit) if isinstance(out, LabeledSet) else UnlabeledSet(out.images[:spec.limit])
    return out


def load_corpora(dcfg) -> Corpora:
    source = load_corpus(dcfg.source, dcfg)
    if not isinstance(source, LabeledSet):
        raise CorpusError("the source corpus must be labeled")
    target = load_corpus(dcfg.target, dcfg)
    if isinstance(target, LabeledSet):
        target = target.unlabeled()
    evals = []
    for spec in (dcfg.source_eval, dcfg.target_eval):
        s = load_corpus(spec, dcfg) if spec is not None else None
        if s is not None and not isinstance(s, LabeledSet):
            raise CorpusError("evaluation corpora must be labeled")
        evals.append(s)
    return Corpora(source, target, *evals)
