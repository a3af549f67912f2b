"""Procedural multi-style corpus with exact cross-style correspondence.

Every (class_id, instance_id) pair yields one natural image, one token
caption, and one styled variant per image style. Classes differ by shape,
fill pattern and palette; instances differ by position and size, so the
correct retrieval target is always unique.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
SAMPLE_MAGIC = b"USYN0001"
MAX_TEXT_LEN = 20
DEFAULT_VOCAB_SIZE = 64

# token layout of the caption vocabulary; 0 is the pad id
_SHAPE_BASE = 1  # 4 shapes
_PATTERN_BASE = 5  # 4 fill patterns
_HUE_BASE = 9  # 4 hue groups
_X_BASE = 13  # 5 column positions
_Y_BASE = 18  # 5 row positions
_SIZE_BASE = 23  # 3 sizes
_FILLER_BASE = 26  # filler words up to vocab end
MAX_CLASSES = 64

_GRID = (8.0, 16.0, 24.0)
_RADII = (4.5, 7.0)
_BACKGROUND = np.array([0.92, 0.86, 0.74])
_ART_PERMUTATION = (2, 0, 1)
_ART_AMPLITUDE = 0.08


class DataError(ValueError):
    """Invalid dataset configuration, sample, or file."""


class StyleTag(str, enum.Enum):
    NATURAL = "natural"
    SKETCH = "sketch"
    ART = "art"
    LOWRES = "lowres"
    TEXT = "text"

    @classmethod
    def parse(cls, value: "str | StyleTag") -> "StyleTag":
        if isinstance(value, StyleTag):
            return value
        try:
            return cls(value)
        except ValueError:
            raise DataError(f"unknown style tag {value!r}") from None

    @property
    def code(self) -> int:
        return _STYLE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "StyleTag":
        for tag, c in _STYLE_CODES.items():
            if c == code:
                return tag
        raise DataError(f"unknown style code {code}")

    @property
    def modality(self) -> str:
        return "text" if self is StyleTag.TEXT else "image"


_STYLE_CODES = {
    StyleTag.NATURAL: 0,
    StyleTag.SKETCH: 1,
    StyleTag.ART: 2,
    StyleTag.LOWRES: 3,
    StyleTag.TEXT: 4,
}
IMAGE_STYLES = (StyleTag.NATURAL, StyleTag.SKETCH, StyleTag.ART, StyleTag.LOWRES)
STYLED = (StyleTag.SKETCH, StyleTag.ART, StyleTag.LOWRES)
ALL_STYLES = IMAGE_STYLES + (StyleTag.TEXT,)


@dataclass(frozen=True, eq=False)
class SynthImage:
    pixels: np.ndarray  # (H, W, C) float
    class_id: int
    instance_id: int
    style: StyleTag = StyleTag.NATURAL

    modality = "image"

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DataError(f"image payload must be HxWxC, got shape {self.pixels.shape}")


@dataclass(frozen=True, eq=False)
class SynthText:
    tokens: np.ndarray  # (MAX_TEXT_LEN,) int, zero padded
    length: int
    class_id: int
    instance_id: int

    modality = "text"
    style = StyleTag.TEXT


# a query or target is either payload kind; both expose .modality and .style
QuerySample = SynthImage | SynthText


@dataclass
class DataConfig:
    num_classes: int = 16
    instances_per_class: int = 8
    seed: int = 42
    split_fraction: float = 0.75
    image_size: int = 32
    channels: int = 3
    vocab_size: int = DEFAULT_VOCAB_SIZE
    # attribute combinations start here; lets a warmup corpus use disjoint classes
    class_offset: int = 0
    # random background/lightness per image (used for warmup corpora)
    jitter: bool = False
    styles: list[str] = field(default_factory=lambda: [s.value for s in ALL_STYLES])

    def validate(self) -> None:
        for name in self.styles:
            StyleTag.parse(name)
        if StyleTag.NATURAL.value not in self.styles:
            raise DataError("the natural style is always generated")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.class_offset < 0 or self.class_offset + self.num_classes > MAX_CLASSES:
            raise DataError(f"class_offset + num_classes must be <= {MAX_CLASSES}")
        if self.instances_per_class < 2:
            raise DataError("instances_per_class must be >= 2")
        if self.instances_per_class > len(_GRID) ** 2 * len(_RADII):
            raise DataError("instances_per_class exceeds the number of distinct placements")
        if not 0.0 < self.split_fraction < 1.0:
            raise DataError("split_fraction must lie in (0, 1)")
        if self.channels != 3:
            raise DataError("only 3-channel images are generated")
        if self.image_size < 32:
            raise DataError("image_size must be >= 32")
        if self.vocab_size < _FILLER_BASE + 4:
            raise DataError(f"vocab_size must be >= {_FILLER_BASE + 4}")


@dataclass
class DatasetManifest:
    num_classes: int
    instances_per_class: int
    styles_present: list[str]
    seed: int
    split_fraction: float
    train_instances: list[int]
    test_instances: list[int]
    image_size: int = 32
    channels: int = 3
    vocab_size: int = DEFAULT_VOCAB_SIZE
    class_offset: int = 0
    jitter: bool = False
    format_version: int = FORMAT_VERSION
    sample_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        if raw.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported manifest version {raw.get('format_version')}")
        for s in raw["styles_present"]:
            StyleTag.parse(s)
        return cls(**raw)

    def content_hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()

    def split_of(self, instance_id: int) -> str:
        return "train" if instance_id in self.train_instances else "test"


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


_HUES = np.array([
    [0.85, 0.20, 0.15],
    [0.20, 0.62, 0.25],
    [0.20, 0.35, 0.85],
    [0.72, 0.18, 0.70],
])


def class_attributes(class_id: int) -> tuple[int, int, int]:
    """(shape, pattern, hue) codes; the 64 class ids enumerate all combinations."""
    shape, pattern, block = class_id % 4, (class_id // 4) % 4, class_id // 16
    return shape, pattern, (shape + pattern + block) % 4


def class_palette(class_id: int) -> np.ndarray:
    return _HUES[class_attributes(class_id)[2]]


def instance_attributes(class_id: int, instance_id: int, seed: int) -> tuple[int, int, int]:
    """(column, row, size) codes; distinct across the instances of one class."""
    combos = len(_GRID) * len(_GRID) * len(_RADII)
    if instance_id >= combos:
        raise DataError(f"instance_id {instance_id} exceeds {combos} placements")
    order = _rng(seed, 1, class_id).permutation(combos)
    code = int(order[instance_id])
    return code % len(_GRID), (code // len(_GRID)) % len(_GRID), code // (len(_GRID) ** 2)


def _shape_mask(shape: int, pattern: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == 0:
        outer = dx**2 + dy**2 <= r**2
        inner = dx**2 + dy**2 <= (0.5 * r) ** 2
    elif shape == 1:
        outer = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        inner = (np.abs(dx) <= 0.5 * r) & (np.abs(dy) <= 0.5 * r)
    elif shape == 2:
        t = (dy + r) / (2 * r)
        outer = (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)
        inner = (dy >= 0) & (dy <= 0.6 * r) & (np.abs(dx) <= 0.35 * r)
    else:
        w = r / 3
        outer = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
        inner = (np.abs(dx) <= w / 2) & (np.abs(dy) <= w / 2)

    if pattern == 1:
        return outer & ~inner
    if pattern == 2:
        return outer & ((yy.astype(int) // 2) % 2 == 0)
    if pattern == 3:
        return outer & (np.abs(dy) > 0.25 * r)
    return outer


def render_image(class_id: int, instance_id: int, config: DataConfig) -> SynthImage:
    if not 0 <= class_id < config.num_classes:
        raise DataError(f"class_id {class_id} out of range [0, {config.num_classes})")
    size = config.image_size
    attr = config.class_offset + class_id
    shape, pattern, _ = class_attributes(attr)
    col, row, rad = instance_attributes(attr, instance_id, config.seed)
    scale = size / 32.0
    cx, cy, r = _GRID[col] * scale, _GRID[row] * scale, _RADII[rad] * scale

    background, color = _BACKGROUND, class_palette(attr)
    if config.jitter:
        rng = _rng(config.seed, 5, attr, instance_id)
        color = np.clip(color * rng.uniform(0.6, 1.25), 0.0, 1.0)
        background = rng.uniform(0.0, 1.0, 3)
        gap = _luminance(background) - _luminance(color)
        if abs(gap) < 0.25:
            background = np.clip(background + np.sign(gap or 1.0) * (0.25 - abs(gap)) * 2, 0.0, 1.0)
    ramp = np.linspace(-0.04, 0.04, size)[:, None, None]
    pixels = np.broadcast_to(background + ramp, (size, size, 3)).copy()
    mask = _shape_mask(shape, pattern, cx, cy, r, size)
    pixels[mask] = color
    return SynthImage(np.clip(pixels, 0.0, 1.0), class_id, instance_id, StyleTag.NATURAL)


def _luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels @ np.array([0.299, 0.587, 0.114])


def _bilinear_resize(img: np.ndarray, out: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an (H, W, C) array."""
    h = img.shape[0]
    coords = (np.arange(out) + 0.5) * (h / out) - 0.5
    coords = np.clip(coords, 0, h - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, h - 1)
    w = coords - lo
    rows = img[lo] * (1 - w)[:, None, None] + img[hi] * w[:, None, None]
    return rows[:, lo] * (1 - w)[None, :, None] + rows[:, hi] * w[None, :, None]


def apply_style(image: SynthImage, style: "StyleTag | str", seed: int, blur: int = 4) -> SynthImage:
    """Deterministic style transform of a natural image."""
    style = StyleTag.parse(style)
    if style in (StyleTag.NATURAL, StyleTag.TEXT):
        raise DataError(f"apply_style cannot produce style {style.value!r}")
    px = np.asarray(image.pixels, dtype=float)

    if style is StyleTag.SKETCH:
        lum = _luminance(px)
        gy, gx = np.gradient(lum)
        edges = (np.hypot(gx, gy) > 0.05).astype(float)
        out = np.repeat(edges[:, :, None], px.shape[2], axis=2)
    elif style is StyleTag.LOWRES:
        size = px.shape[0]
        blurred = ndimage.uniform_filter(px, size=(blur, blur, 1), mode="nearest")
        small = _bilinear_resize(blurred, max(1, size // blur))
        out = _bilinear_resize(small, size)
    else:
        rng = _rng(seed, 2, image.class_id, image.instance_id)
        freq = rng.uniform(1.0, 3.0, size=(3, 2))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        size = px.shape[0]
        yy, xx = np.mgrid[0:size, 0:size] / size
        shift = np.stack(
            [np.sin(2 * np.pi * (freq[c, 0] * xx + freq[c, 1] * yy) + phase[c]) for c in range(3)],
            axis=-1,
        )
        out = px[:, :, list(_ART_PERMUTATION)] + _ART_AMPLITUDE * shift
    return SynthImage(np.clip(out, 0.0, 1.0), image.class_id, image.instance_id, style)


def render_text(class_id: int, instance_id: int, vocab: int = DEFAULT_VOCAB_SIZE,
                num_classes: int = MAX_CLASSES, seed: int = 0, class_offset: int = 0) -> SynthText:
    """Caption tokens built from the class and instance attribute codes."""
    if not 0 <= class_id < num_classes or class_offset + class_id >= MAX_CLASSES:
        raise DataError(f"class_id {class_id} out of range")
    if vocab < _FILLER_BASE + 4:
        raise DataError(f"vocabulary of size {vocab} is too small")
    attr = class_offset + class_id
    shape, pattern, hue = class_attributes(attr)
    col, row, rad = instance_attributes(attr, instance_id, seed)
    n_filler = vocab - _FILLER_BASE
    rng = _rng(seed, 3, attr, instance_id)
    fill = _FILLER_BASE + rng.integers(0, n_filler, size=3)

    words = [fill[0], _SHAPE_BASE + shape, _PATTERN_BASE + pattern, _HUE_BASE + hue,
             fill[1], _X_BASE + col, _Y_BASE + row]
    if rng.random() < 0.5:
        words.append(fill[2])
    words.append(_SIZE_BASE + rad)

    tokens = np.zeros(MAX_TEXT_LEN, dtype=np.int64)
    tokens[: len(words)] = words
    return SynthText(tokens, len(words), class_id, instance_id)


def split_instances(instances: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    n_train = min(max(1, round(instances * fraction)), instances - 1)
    order = _rng(seed, 4).permutation(instances)
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


class SynthDataset:
    """In-memory view of a generated corpus: pixels[style] is (C, I, H, W, 3)."""

    def __init__(self, manifest: DatasetManifest, images: dict[StyleTag, np.ndarray],
                 texts: np.ndarray, lengths: np.ndarray):
        self.manifest = manifest
        self.images = images
        self.texts = texts
        self.lengths = lengths

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def instances(self) -> int:
        return self.manifest.instances_per_class

    @property
    def styles(self) -> list[StyleTag]:
        return [StyleTag(s) for s in self.manifest.styles_present]

    def sample(self, class_id: int, instance_id: int, style: "StyleTag | str") -> QuerySample:
        style = StyleTag.parse(style)
        if style is StyleTag.TEXT:
            return SynthText(self.texts[class_id, instance_id], int(self.lengths[class_id, instance_id]),
                             class_id, instance_id)
        if style not in self.images:
            raise DataError(f"style {style.value!r} not present in dataset")
        return SynthImage(self.images[style][class_id, instance_id], class_id, instance_id, style)

    def keys(self, split: str | None = None) -> list[tuple[int, int]]:
        if split is None:
            inst = range(self.instances)
        else:
            inst = self.manifest.train_instances if split == "train" else self.manifest.test_instances
        return [(c, i) for c in range(self.num_classes) for i in inst]

    def samples(self, style: "StyleTag | str", split: str | None = None) -> list[QuerySample]:
        return [self.sample(c, i, style) for c, i in self.keys(split)]


def build_dataset(config: DataConfig) -> SynthDataset:
    config.validate()
    C, I, S = config.num_classes, config.instances_per_class, config.image_size
    present = [s for s in ALL_STYLES if s.value in config.styles or s in (StyleTag.NATURAL, StyleTag.TEXT)]
    styled = [s for s in STYLED if s in present]
    images = {s: np.zeros((C, I, S, S, 3), dtype=np.float32) for s in present if s is not StyleTag.TEXT}
    texts = np.zeros((C, I, MAX_TEXT_LEN), dtype=np.int64)
    lengths = np.zeros((C, I), dtype=np.int64)
    for c in range(C):
        for i in range(I):
            nat = render_image(c, i, config)
            images[StyleTag.NATURAL][c, i] = nat.pixels
            for style in styled:
                images[style][c, i] = apply_style(nat, style, config.seed).pixels
            txt = render_text(c, i, config.vocab_size, C, config.seed, config.class_offset)
            texts[c, i], lengths[c, i] = txt.tokens, txt.length

    train, test = split_instances(I, config.split_fraction, config.seed)
    manifest = DatasetManifest(
        num_classes=C, instances_per_class=I, styles_present=[s.value for s in present],
        seed=config.seed, split_fraction=config.split_fraction,
        train_instances=train, test_instances=test, image_size=S, channels=3,
        vocab_size=config.vocab_size, class_offset=config.class_offset, jitter=config.jitter,
        sample_counts={s.value: C * I for s in present},
    )
    return SynthDataset(manifest, images, texts, lengths)


# -- on-disk tensors -------------------------------------------------------

def write_tensor(path: Path, array: np.ndarray) -> None:
    dtype = "<u4" if np.issubdtype(array.dtype, np.integer) else "<f4"
    header = SAMPLE_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    path.write_bytes(header + np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor(path: Path, integer: bool = False) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != SAMPLE_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:8]!r}")
    (rank,) = struct.unpack_from("<I", raw, 8)
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise DataError(f"{path}: expected {4 * count} payload bytes, found {len(raw) - offset}")
    arr = np.frombuffer(raw, dtype="<u4" if integer else "<f4", offset=offset).reshape(dims)
    return arr.astype(np.int64) if integer else arr.astype(np.float32)


def _sample_name(class_id: int, instance_id: int) -> str:
    return f"c{class_id:03d}_i{instance_id:03d}.usyn"


def save_dataset(dataset: SynthDataset, out: "str | Path") -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for style in dataset.styles:
            (out / style.value).mkdir(exist_ok=True)
            for c, i in dataset.keys():
                target = out / style.value / _sample_name(c, i)
                if style is StyleTag.TEXT:
                    write_tensor(target, dataset.texts[c, i])
                else:
                    write_tensor(target, dataset.images[style][c, i])
        (out / "manifest.json").write_text(dataset.manifest.to_json(), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def load_dataset(path: "str | Path") -> SynthDataset:
    path = Path(path)
    manifest = DatasetManifest.from_json((path / "manifest.json").read_text(encoding="utf-8"))
    C, I, S = manifest.num_classes, manifest.instances_per_class, manifest.image_size
    images = {}
    texts = np.zeros((C, I, MAX_TEXT_LEN), dtype=np.int64)
    lengths = np.zeros((C, I), dtype=np.int64)
    for name in manifest.styles_present:
        style = StyleTag.parse(name)
        if style is not StyleTag.TEXT:
            images[style] = np.zeros((C, I, S, S, manifest.channels), dtype=np.float32)
        for c in range(C):
            for i in range(I):
                f = path / style.value / _sample_name(c, i)
                if style is StyleTag.TEXT:
                    texts[c, i] = read_tensor(f, integer=True)
                    lengths[c, i] = int(np.count_nonzero(texts[c, i]))
                else:
                    images[style][c, i] = read_tensor(f)
    return SynthDataset(manifest, images, texts, lengths)


def generate_dataset(config: DataConfig, out: "str | Path") -> DatasetManifest:
    dataset = build_dataset(config)
    save_dataset(dataset, out)
    return dataset.manifest
