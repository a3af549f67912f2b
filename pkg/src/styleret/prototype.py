"""Frozen style feature map and prototype averaging.

A prototype is the normalized mean of per-sample style features; it is the
query used to look up entries in the prompt bank.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .synthdata import StyleTag, SynthImage, SynthText

DEGENERATE_NORM = 1e-9


class PrototypeError(ValueError):
    pass


@dataclass(frozen=True)
class StylePrototype:
    style: StyleTag | None
    vector: np.ndarray
    m: int


class PrototypeEncoder:
    """Seeded shallow feature map shared by image and text inputs.

    Images: linear features of non-overlapping patches, summarised by their
    per-feature mean and standard deviation, then projected to ``d``.
    Text: mean embedding of the non-pad tokens, projected to ``d``.
    """

    def __init__(self, d: int = 32, image_size: int = 32, channels: int = 3,
                 vocab_size: int = 64, patch_size: int = 4, hidden: int = 16, seed: int = 0):
        if image_size % patch_size:
            raise PrototypeError("image_size must be divisible by patch_size")
        self.d = d
        self.image_size = image_size
        self.channels = channels
        self.vocab_size = vocab_size
        self.patch_size = patch_size
        self.hidden = hidden
        self.seed = seed

        rng = np.random.default_rng([seed, 0x5EED])
        patch_dim = patch_size * patch_size * channels
        params = {
            "patch_w": rng.normal(0, 1 / np.sqrt(patch_dim), (patch_dim, hidden)),
            "img_w": rng.normal(0, 1 / np.sqrt(2 * hidden), (2 * hidden, d)),
            "img_b": rng.normal(0, 0.1, d),
            "tok_emb": rng.normal(0, 1, (vocab_size, hidden)),
            "txt_w": rng.normal(0, 1 / np.sqrt(hidden), (hidden, d)),
            "txt_b": rng.normal(0, 0.1, d),
        }
        for arr in params.values():
            arr.setflags(write=False)
        self._params = params

    def __getattr__(self, name):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        raise AttributeError(name)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].astype("<f8").tobytes())
        return h.hexdigest()

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64)
        if px.shape != (self.image_size, self.image_size, self.channels):
            raise PrototypeError(
                f"image shape {px.shape} does not match encoder "
                f"({self.image_size}, {self.image_size}, {self.channels})")
        p, g = self.patch_size, self.image_size // self.patch_size
        patches = px.reshape(g, p, g, p, self.channels).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        feats = patches @ self.patch_w
        stats = np.concatenate([feats.mean(axis=0), feats.std(axis=0)])
        return stats @ self.img_w + self.img_b

    def embed_text(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise PrototypeError("token id outside encoder vocabulary")
        ids = tokens[tokens != 0]
        if ids.size == 0:
            raise PrototypeError("empty text payload")
        return self.tok_emb[ids].mean(axis=0) @ self.txt_w + self.txt_b


def embed_style_sample(sample: SynthImage | SynthText, enc: PrototypeEncoder) -> np.ndarray:
    if sample.modality == "text":
        return enc.embed_text(sample.tokens)
    if sample.pixels.size == 0:
        raise PrototypeError("empty image payload")
    return enc.embed_image(sample.pixels)


def compute_prototype(features: Sequence[np.ndarray] | np.ndarray,
                      style: StyleTag | None = None) -> StylePrototype:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise PrototypeError("need a non-empty list of equal-length feature vectors")
    mean = feats.mean(axis=0)
    norm = np.linalg.norm(mean)
    if not norm >= DEGENERATE_NORM:
        raise PrototypeError(f"degenerate prototype: mean feature norm {norm:.3g}")
    return StylePrototype(style, mean / norm, feats.shape[0])


def query_prototype(query: SynthImage | SynthText, enc: PrototypeEncoder) -> np.ndarray:
    return compute_prototype([embed_style_sample(query, enc)], query.style).vector


def batch_prototypes(samples: Iterable[SynthImage | SynthText], enc: PrototypeEncoder) -> np.ndarray:
    """Row-stacked query prototypes for many samples."""
    return np.stack([query_prototype(s, enc) for s in samples])


def style_prototypes(samples_by_style: dict[StyleTag, Sequence[SynthImage | SynthText]],
                     enc: PrototypeEncoder, per_style: int = 1) -> list[StylePrototype]:
    """Prototypes for each style; ``per_style`` > 1 splits a style's samples
    into that many interleaved groups and averages each group separately."""
    out = []
    for style, samples in samples_by_style.items():
        feats = np.stack([embed_style_sample(s, enc) for s in samples])
        for g in range(per_style):
            out.append(compute_prototype(feats[g::per_style], style))
    return out
