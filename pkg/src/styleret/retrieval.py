"""Shared exhaustive similarity index over precomputed embeddings."""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .encoder import Backbone, embed_batch
from .promptbank import PromptBank
from .prototype import PrototypeEncoder, batch_prototypes
from .synthdata import StyleTag, SynthDataset, SynthImage, SynthText

INDEX_MAGIC = b"URIX"
INDEX_VERSION = 1
_HEAD = struct.Struct("<4sIII32s32s32s")
_REC = struct.Struct("<QIIBB")
NO_HASH = bytes(32)
MODALITIES = ("image", "text")


class RetrievalError(ValueError):
    pass


def record_id(style: StyleTag, class_id: int, instance_id: int) -> int:
    """Stable id, identical across every index that holds the sample."""
    return (style.code << 40) | (class_id << 20) | instance_id


def _hash_bytes(h: str | bytes | None) -> bytes:
    if h is None:
        return NO_HASH
    return bytes.fromhex(h) if isinstance(h, str) else h


@dataclass(frozen=True)
class RetrievalIndex:
    ids: np.ndarray  # (M,) uint64
    embeddings: np.ndarray  # (M, d) float32, unit rows
    class_ids: np.ndarray
    instance_ids: np.ndarray
    styles: np.ndarray  # style codes
    modalities: np.ndarray  # 0 image, 1 text
    bank_hash: bytes = NO_HASH
    backbone_hash: bytes = NO_HASH
    manifest_hash: bytes = NO_HASH

    def __post_init__(self):
        for arr in (self.ids, self.embeddings, self.class_ids, self.instance_ids,
                    self.styles, self.modalities):
            arr.setflags(write=False)
        if len(np.unique(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate record ids")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def restrict(self, styles: Iterable[StyleTag]) -> "RetrievalIndex":
        codes = [StyleTag.parse(s).code for s in styles]
        keep = np.isin(self.styles, codes)
        return RetrievalIndex(self.ids[keep], self.embeddings[keep], self.class_ids[keep],
                              self.instance_ids[keep], self.styles[keep], self.modalities[keep],
                              self.bank_hash, self.backbone_hash, self.manifest_hash)

    def check_provenance(self, backbone: Backbone, bank: PromptBank | None) -> None:
        if bytes.fromhex(backbone.content_hash()) != self.backbone_hash:
            raise RetrievalError("backbone does not match the index provenance hash")
        bank_hash = NO_HASH if bank is None else bytes.fromhex(bank.content_hash())
        if bank_hash != self.bank_hash:
            raise RetrievalError("prompt bank does not match the index provenance hash")

    def to_bytes(self) -> bytes:
        out = [_HEAD.pack(INDEX_MAGIC, INDEX_VERSION, len(self), self.d,
                          self.bank_hash, self.backbone_hash, self.manifest_hash)]
        emb = self.embeddings.astype("<f4")
        for r in range(len(self)):
            out.append(_REC.pack(int(self.ids[r]), int(self.class_ids[r]), int(self.instance_ids[r]),
                                 int(self.styles[r]), int(self.modalities[r])))
            out.append(emb[r].tobytes())
        return b"".join(out)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_index(index: RetrievalIndex, path: "str | Path") -> None:
    Path(path).write_bytes(index.to_bytes())


def load_index(path: "str | Path") -> RetrievalIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise RetrievalError(f"truncated index header: missing {_HEAD.size - len(raw)} bytes")
    magic, version, count, d, bank_h, bb_h, man_h = _HEAD.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise RetrievalError(f"bad index magic {magic!r}")
    if version != INDEX_VERSION:
        raise RetrievalError(f"unsupported index version {version}")
    rec = _REC.size + 4 * d
    expected = _HEAD.size + count * rec
    if len(raw) != expected:
        raise RetrievalError(f"index payload size mismatch: expected {expected} bytes, got {len(raw)}")
    ids = np.zeros(count, np.uint64)
    meta = np.zeros((count, 4), np.int64)
    emb = np.zeros((count, d), np.float32)
    off = _HEAD.size
    for r in range(count):
        rid, c, i, s, m = _REC.unpack_from(raw, off)
        ids[r] = rid
        meta[r] = (c, i, s, m)
        emb[r] = np.frombuffer(raw, "<f4", d, off + _REC.size)
        off += rec
    return RetrievalIndex(ids, emb, meta[:, 0], meta[:, 1], meta[:, 2], meta[:, 3], bank_h, bb_h, man_h)


# -- embedding -------------------------------------------------------------

def embed_samples(samples: Sequence[SynthImage | SynthText], backbone: Backbone,
                  bank: PromptBank | None = None, prototype_encoder: PrototypeEncoder | None = None,
                  batch_size: int = 256) -> np.ndarray:
    """(B, d) unit embeddings via prototype -> lookup -> expand -> forward.

    With ``bank=None`` the sequences carry no prompt slots.
    """
    samples = list(samples)
    if not samples:
        return np.zeros((0, backbone.config.d), np.float32)
    if bank is not None and prototype_encoder is None:
        raise RetrievalError("a prototype encoder is required to query the bank")
    out = np.zeros((len(samples), backbone.config.d), np.float32)
    for modality in MODALITIES:
        rows = [r for r, s in enumerate(samples) if s.modality == modality]
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            group = [samples[r] for r in chunk]
            payload = np.stack([s.pixels if modality == "image" else s.tokens for s in group])
            ids = None
            if bank is not None:
                ids, _ = bank.select(batch_prototypes(group, prototype_encoder))
            with torch.no_grad():
                emb = embed_batch(backbone, modality, payload, bank, ids)
            out[chunk] = emb.float().numpy()
    return out


def build_index(dataset: SynthDataset, backbone: Backbone, bank: PromptBank | None = None,
                prototype_encoder: PrototypeEncoder | None = None,
                styles: Iterable[StyleTag | str] = (StyleTag.NATURAL,)) -> RetrievalIndex:
    samples = []
    for style in styles:
        style = StyleTag.parse(style)
        if style not in dataset.styles:
            continue
        samples.extend(dataset.samples(style))
    if not samples:
        raise RetrievalError("empty target set")
    emb = embed_samples(samples, backbone, bank, prototype_encoder)
    return RetrievalIndex(
        ids=np.array([record_id(s.style, s.class_id, s.instance_id) for s in samples], np.uint64),
        embeddings=emb,
        class_ids=np.array([s.class_id for s in samples]),
        instance_ids=np.array([s.instance_id for s in samples]),
        styles=np.array([s.style.code for s in samples]),
        modalities=np.array([MODALITIES.index(s.modality) for s in samples]),
        bank_hash=NO_HASH if bank is None else bytes.fromhex(bank.content_hash()),
        backbone_hash=bytes.fromhex(backbone.content_hash()),
        manifest_hash=dataset.manifest.content_hash(),
    )


# -- ranking ---------------------------------------------------------------

@dataclass
class RankedResult:
    ids: list[int]
    scores: list[float]
    query: dict = field(default_factory=dict)


def rank(index: RetrievalIndex, query_embedding: np.ndarray, k: int) -> RankedResult:
    """Top-k by inner product; equal scores go to the smaller id."""
    if len(index) == 0:
        raise RetrievalError("empty index")
    if not 1 <= k <= len(index):
        raise RetrievalError(f"k={k} must lie in [1, {len(index)}]")
    q = np.asarray(query_embedding, dtype=np.float32)
    if q.shape != (index.d,):
        raise RetrievalError(f"query dimension {q.shape} does not match index d={index.d}")
    # float32 products are exact in float64, and the row-wise reduction is the
    # same for every row, so duplicate records score bit-identically (a BLAS
    # matmul does not guarantee that and breaks the tie rule)
    sims = (index.embeddings.astype(np.float64) * q.astype(np.float64)).sum(axis=1)
    order = np.lexsort((index.ids, -sims))[:k]
    return RankedResult([int(i) for i in index.ids[order]], [float(s) for s in sims[order]])


def rank_many(index: RetrievalIndex, queries: np.ndarray, k: int) -> list[RankedResult]:
    return [rank(index, q, k) for q in np.atleast_2d(queries)]


def query(index: RetrievalIndex, sample: SynthImage | SynthText, backbone: Backbone,
          bank: PromptBank | None, prototype_encoder: PrototypeEncoder | None, k: int) -> RankedResult:
    index.check_provenance(backbone, bank)
    emb = embed_samples([sample], backbone, bank, prototype_encoder)[0]
    result = rank(index, emb, k)
    result.query = {"class_id": sample.class_id, "instance_id": sample.instance_id,
                    "style": sample.style.value}
    return result


def fuse_queries(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Normalized mean of unit query embeddings."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise RetrievalError("need a non-empty list of equal-length embeddings")
    if np.all(E == E[0]):
        # exact idempotence; (v + v + v) / 3 can be off by an ulp
        return E[0].copy()
    mean = E.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        raise RetrievalError("degenerate fusion: embeddings cancel out")
    return mean / norm


def recall_at_k(results: Sequence[RankedResult], ground_truth: Sequence[int] | dict, k: int) -> float:
    """Fraction of queries whose single correct id is in the top k.

    ``ground_truth`` is either aligned with ``results`` or a dict keyed by
    result position.
    """
    if not results:
        return 0.0
    hits = 0
    for q, res in enumerate(results):
        try:
            target = ground_truth[q]
        except (KeyError, IndexError):
            raise RetrievalError(f"query {q} has no ground truth") from None
        hits += int(target) in res.ids[:k]
    return hits / len(results)


# -- latency ---------------------------------------------------------------

def _stats(samples: list[float]) -> dict:
    arr = np.asarray(samples) * 1e3
    return {"mean_ms": float(arr.mean()), "p50_ms": float(np.percentile(arr, 50)),
            "p95_ms": float(np.percentile(arr, 95)), "samples_ms": arr.tolist()}


def measure_latency(index: RetrievalIndex, queries: Sequence[SynthImage | SynthText],
                    backbone: Backbone, bank: PromptBank | None,
                    prototype_encoder: PrototypeEncoder | None, repetitions: int = 5,
                    warmup: int = 1, k: int = 5,
                    clock: Callable[[], float] = time.perf_counter) -> dict:
    """Per-repetition wall clock for the embed and rank stages over the query set."""
    if repetitions < 3:
        raise RetrievalError("repetitions must be >= 3")
    queries = list(queries)
    if not queries:
        raise RetrievalError("empty query set")
    k = min(k, len(index))
    embed_t, rank_t = [], []
    for rep in range(warmup + repetitions):
        t0 = clock()
        emb = embed_samples(queries, backbone, bank, prototype_encoder)
        t1 = clock()
        for q in emb:
            rank(index, q, k)
        t2 = clock()
        if rep >= warmup:
            embed_t.append((t1 - t0) / len(queries))
            rank_t.append((t2 - t1) / len(queries))
    return {"embed": _stats(embed_t), "rank": _stats(rank_t), "repetitions": repetitions,
            "num_queries": len(queries), "index_size": len(index)}
