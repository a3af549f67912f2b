"""Prompt tuning of bank keys and values against a frozen backbone.

The objective per triplet is the cosine-distance hinge loss plus ``lam``
times the summed cosine distance between the anchor prototype and the bank
keys it selected. Selection itself carries no gradient.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import Backbone, BackboneConfig, embed_batch
from .promptbank import PromptBank, score_torch
from .prototype import PrototypeEncoder, batch_prototypes
from .synthdata import StyleTag, SynthDataset

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    margin: float = 0.2
    lam: float = 0.5
    lr: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    # probability that a negative is another instance of the anchor's class
    same_class_negatives: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.same_class_negatives <= 1.0:
            raise TrainingError("same_class_negatives must lie in [0, 1]")
        if self.margin <= 0:
            raise TrainingError("margin must be > 0")
        if self.lam < 0:
            raise TrainingError("lam must be >= 0")
        if self.lr <= 0:
            raise TrainingError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class WarmupConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    margin: float = 0.5
    seed: int = 0
    # items per class in a batch, so that same-class instances act as negatives
    group_size: int = 4


@dataclass
class TrainReport:
    joint: list[float] = field(default_factory=list)
    triplet: list[float] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""

    @property
    def backbone_unchanged(self) -> bool:
        return self.backbone_hash_before == self.backbone_hash_after


Task = tuple[StyleTag, StyleTag]


def parse_task(spec: "str | Sequence") -> Task:
    """'sketch->natural' or ('sketch', 'natural')."""
    if isinstance(spec, str):
        parts = spec.replace("2", "->").split("->") if "->" not in spec else spec.split("->")
        spec = [p.strip() for p in parts]
    q, t = spec
    q = "natural" if q == "image" else q
    t = "natural" if t == "image" else t
    return StyleTag.parse(q), StyleTag.parse(t)


# -- scalar losses ---------------------------------------------------------

def distance(a, b) -> float:
    """1 - <a, b> for unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise TrainingError(f"distance expects unit vectors, got norm {np.linalg.norm(v):.6g}")
    return float(1.0 - a @ b)


def triplet_loss(xf, xr, xh, margin: float = 0.2) -> float:
    return max(0.0, margin + distance(xf, xr) - distance(xf, xh))


# -- triplets --------------------------------------------------------------

@dataclass
class TripletBatch:
    """Parallel arrays describing B triplets; entries are (class, instance)."""

    query_styles: list[StyleTag]
    target_styles: list[StyleTag]
    anchor: np.ndarray  # (B, 2)
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def check(self) -> None:
        if not np.all(self.anchor == self.positive):
            raise TrainingError("positive must be the anchor's own item")
        if np.any(np.all(self.anchor == self.negative, axis=1)):
            raise TrainingError("negative must differ from the anchor's item")


def sample_triplet(dataset: SynthDataset, task: Task, rng: np.random.Generator,
                   split: str | None = "train", same_class: float = 0.0,
                   ) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """(anchor, positive, negative) as (class, instance) pairs.

    The negative is a target-style item of a different class, except that
    with probability ``same_class`` it is another instance of the same class.
    """
    if dataset.num_classes < 2:
        raise TrainingError("need at least two classes to draw a negative")
    keys = dataset.keys(split)
    c, i = keys[rng.integers(len(keys))]
    if same_class > 0 and rng.random() < same_class:
        negatives = [k for k in keys if k[0] == c and k[1] != i]
    else:
        negatives = [k for k in keys if k[0] != c]
    neg = negatives[rng.integers(len(negatives))]
    return (c, i), (c, i), neg


def sample_batch(dataset: SynthDataset, tasks: Sequence[Task], size: int,
                 rng: np.random.Generator, split: str | None = "train",
                 same_class: float = 0.0) -> TripletBatch:
    qs, ts, a, p, n = [], [], [], [], []
    for _ in range(size):
        task = tasks[rng.integers(len(tasks))]
        anc, pos, neg = sample_triplet(dataset, task, rng, split, same_class)
        qs.append(task[0])
        ts.append(task[1])
        a.append(anc)
        p.append(pos)
        n.append(neg)
    return TripletBatch(qs, ts, np.array(a), np.array(p), np.array(n))


class SampleTable:
    """Tensor payloads and cached prototypes for every sample of a dataset."""

    def __init__(self, dataset: SynthDataset, prototype_encoder: PrototypeEncoder | None,
                 dtype=torch.float32):
        self.dataset = dataset
        self.encoder = prototype_encoder
        self.dtype = dtype
        self._images = {s: torch.as_tensor(a, dtype=dtype) for s, a in dataset.images.items()}
        self._texts = torch.as_tensor(dataset.texts, dtype=torch.long)
        self._protos: dict[StyleTag, np.ndarray] = {}

    def payload(self, style: StyleTag, keys: np.ndarray) -> torch.Tensor:
        keys = np.asarray(keys).reshape(-1, 2)
        c, i = torch.as_tensor(keys[:, 0]), torch.as_tensor(keys[:, 1])
        if style is StyleTag.TEXT:
            return self._texts[c, i]
        return self._images[style][c, i]

    def prototypes(self, style: StyleTag, keys: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            raise TrainingError("no prototype encoder attached")
        if style not in self._protos:
            ds = self.dataset
            grid = batch_prototypes(ds.samples(style), self.encoder)
            self._protos[style] = grid.reshape(ds.num_classes, ds.instances, -1)
        keys = np.asarray(keys).reshape(-1, 2)
        return self._protos[style][keys[:, 0], keys[:, 1]]

    def embed(self, backbone: Backbone, bank: PromptBank | None, styles: Sequence[StyleTag],
              keys: np.ndarray) -> tuple[torch.Tensor, np.ndarray | None]:
        """Embeddings (B, d) for a mixed-style list, plus selected bank ids (B, n)."""
        styles = list(styles)
        keys = np.asarray(keys).reshape(-1, 2)
        out = [None] * len(styles)
        ids_out = np.zeros((len(styles), bank.n), dtype=np.int64) if bank is not None else None
        for style in dict.fromkeys(styles):
            rows = [r for r, s in enumerate(styles) if s is style]
            ids = None
            if bank is not None:
                ids, _ = bank.select(self.prototypes(style, keys[rows]))
                ids_out[rows] = ids
            emb = embed_batch(backbone, style.modality, self.payload(style, keys[rows]), bank, ids)
            for j, r in enumerate(rows):
                out[r] = emb[j]
        return torch.stack(out), ids_out


# -- joint objective -------------------------------------------------------

def batch_losses(batch: TripletBatch, bank: PromptBank | None, backbone: Backbone,
                 table: SampleTable, margin: float, lam: float):
    """Per-triplet (hinge, alignment) tensors for a batch."""
    ea, ida = table.embed(backbone, bank, batch.query_styles, batch.anchor)
    ep, _ = table.embed(backbone, bank, batch.target_styles, batch.positive)
    en, _ = table.embed(backbone, bank, batch.target_styles, batch.negative)
    d_pos = 1.0 - (ea * ep).sum(-1)
    d_neg = 1.0 - (ea * en).sum(-1)
    hinge = torch.clamp(margin + d_pos - d_neg, min=0.0)
    if bank is None or lam == 0:
        align = torch.zeros_like(hinge)
    else:
        q = torch.stack([torch.as_tensor(table.prototypes(s, k[None]), dtype=bank.keys.dtype)[0]
                         for s, k in zip(batch.query_styles, batch.anchor)])
        keys = bank.keys[torch.as_tensor(ida)]  # (B, n, d)
        align = score_torch(q.unsqueeze(1).expand_as(keys), keys).sum(-1)
    return hinge, align


def joint_loss(batch: TripletBatch, bank: PromptBank, backbone: Backbone, table: SampleTable,
               lam: float = 0.5, margin: float = 0.2) -> torch.Tensor:
    hinge, align = batch_losses(batch, bank, backbone, table, margin, lam)
    return (hinge + lam * align).mean()


def compute_gradients(batch: TripletBatch, bank: PromptBank, backbone: Backbone,
                      config: TrainConfig, table: SampleTable) -> dict[str, torch.Tensor]:
    """Exact gradients of the joint loss w.r.t. bank keys and values."""
    if not backbone.frozen:
        raise TrainingError("backbone must be frozen before prompt tuning")
    loss = joint_loss(batch, bank, backbone, table, config.lam, config.margin)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    gk, gv = torch.autograd.grad(loss, [bank.keys, bank.values], allow_unused=True)
    return {
        "loss": loss.detach(),
        "keys": torch.zeros_like(bank.keys) if gk is None else gk,
        "values": torch.zeros_like(bank.values) if gv is None else gv,
    }


def steps_per_epoch(dataset: SynthDataset, tasks: Sequence[Task], batch_size: int) -> int:
    return max(1, math.ceil(len(dataset.keys("train")) * len(tasks) / batch_size))


def fit(dataset: SynthDataset, bank: PromptBank, backbone: Backbone, config: TrainConfig,
        prototype_encoder: PrototypeEncoder, tasks: Sequence[Task],
        log_path: "str | Path | None" = None, table: SampleTable | None = None) -> TrainReport:
    """Fixed-step gradient descent on the bank; the backbone is never touched."""
    config.validate()
    if not backbone.frozen:
        raise TrainingError("backbone must be frozen before prompt tuning")
    tasks = [parse_task(t) for t in tasks]
    table = table or SampleTable(dataset, prototype_encoder, backbone.dtype)
    rng = np.random.default_rng([config.seed, 0x7A11])
    report = TrainReport(backbone_hash_before=backbone.content_hash())
    steps = steps_per_epoch(dataset, tasks, config.batch_size)
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            sums = np.zeros(3)
            for _ in range(steps):
                batch = sample_batch(dataset, tasks, config.batch_size, rng,
                                     same_class=config.same_class_negatives)
                hinge, align = batch_losses(batch, bank, backbone, table, config.margin, config.lam)
                loss = (hinge + config.lam * align).mean()
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at step {step}")
                gk, gv = torch.autograd.grad(loss, [bank.keys, bank.values], allow_unused=True)
                with torch.no_grad():
                    if gk is not None:
                        bank.keys -= config.lr * gk
                    if gv is not None:
                        bank.values -= config.lr * gv
                parts = (hinge.mean().item(), align.mean().item(), loss.item())
                sums += parts
                if sink:
                    sink.write(json.dumps({"epoch": epoch, "step": step, "triplet": parts[0],
                                           "alignment": parts[1], "joint": parts[2],
                                           "backbone_hash": report.backbone_hash_before}) + "\n")
                step += 1
            trip, align_m, joint = sums / steps
            report.triplet.append(trip)
            report.alignment.append(align_m)
            report.joint.append(joint)
            report.seconds.append(time.perf_counter() - t0)
            log.info("epoch %d joint %.4f triplet %.4f align %.4f", epoch, joint, trip, align_m)
    finally:
        if sink:
            sink.close()
    report.backbone_hash_after = backbone.content_hash()
    if not report.backbone_unchanged:
        raise TrainingError("backbone parameters changed during prompt tuning")
    return report


def in_batch_triplet_loss(anchors: torch.Tensor, targets: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean hinge over all triplets (a_i, t_i, t_j), j != i, in both directions.

    Rows must describe distinct items, so every off-diagonal target is a
    valid negative.
    """
    B = anchors.shape[0]
    if B < 2:
        raise TrainingError("in-batch triplets need at least two items")
    sims = anchors @ targets.T
    pos = sims.diagonal()
    off = ~torch.eye(B, dtype=torch.bool)
    # d(a,t) = 1 - <a,t>, so margin + d_pos - d_neg = margin - pos + neg
    rows = torch.clamp(margin - pos[:, None] + sims, min=0.0)[off]
    cols = torch.clamp(margin - pos[None, :] + sims, min=0.0)[off]
    return (rows.mean() + cols.mean()) / 2


def _grouped_batch(pool: np.ndarray, size: int, group: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct (class, instance) rows: ``size // group`` classes, ``group`` instances each."""
    classes = np.unique(pool[:, 0])
    picked = rng.choice(classes, min(len(classes), max(1, size // group)), replace=False)
    rows = []
    for c in picked:
        members = pool[pool[:, 0] == c]
        rows.append(members[rng.choice(len(members), min(group, len(members)), replace=False)])
    return np.concatenate(rows)


def warmup_backbone(dataset: "SynthDataset | Sequence[SynthDataset]", config: BackboneConfig,
                    warmup: WarmupConfig | None = None) -> tuple[Backbone, list[float]]:
    """Train a fresh backbone on natural image/caption pairs, then freeze it.

    Each step draws groups of same-class training items from one corpus
    (chosen in proportion to its size) and applies the triplet hinge over
    every in-batch negative. Returns the frozen backbone and the per-epoch mean loss.
    """
    warmup = warmup or WarmupConfig()
    corpora = [dataset] if isinstance(dataset, SynthDataset) else list(dataset)
    keys = [np.array(ds.keys("train")).reshape(-1, 2) for ds in corpora]
    sizes = np.array([len(k) for k in keys], dtype=np.float64)
    if sizes.sum() == 0:
        raise TrainingError("empty dataset")
    backbone = Backbone(config)
    losses: list[float] = []
    if warmup.epochs > 0:
        torch.manual_seed(warmup.seed)
        tables = [SampleTable(ds, None, backbone.dtype) for ds in corpora]
        rng = np.random.default_rng([warmup.seed, 0x3A3])
        opt = torch.optim.Adam(backbone.parameters(), lr=warmup.lr)
        steps = max(1, int(sizes.sum() // warmup.batch_size))
        backbone.train()
        for epoch in range(warmup.epochs):
            total = 0.0
            for _ in range(steps):
                which = int(rng.choice(len(corpora), p=sizes / sizes.sum()))
                pool = keys[which]
                batch = _grouped_batch(pool, warmup.batch_size, warmup.group_size, rng)
                if len(batch) < 2:
                    continue
                texts = embed_batch(backbone, "text", tables[which].payload(StyleTag.TEXT, batch))
                images = embed_batch(backbone, "image", tables[which].payload(StyleTag.NATURAL, batch))
                loss = in_batch_triplet_loss(texts, images, warmup.margin)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
            losses.append(total / steps)
            log.info("warmup epoch %d triplet %.4f", epoch, losses[-1])
    return backbone.freeze(), losses


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_gradients(batch: TripletBatch, bank: PromptBank, backbone: Backbone,
                                config: TrainConfig, table: SampleTable,
                                h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the joint loss over every key and value scalar.

    Each evaluation re-runs the full lookup, so selection is re-derived at
    the perturbed point rather than reused.
    """
    out = {}
    with torch.no_grad():
        for name in ("keys", "values"):
            param = getattr(bank, name)
            flat = param.view(-1)
            grad = np.zeros(flat.numel())
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = joint_loss(batch, bank, backbone, table, config.lam, config.margin).item()
                flat[j] = orig - h
                down = joint_loss(batch, bank, backbone, table, config.lam, config.margin).item()
                flat[j] = orig
                grad[j] = (up - down) / (2 * h)
            out[name] = grad.reshape(tuple(param.shape))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_scalars: int
    seconds: float
    per_tensor: dict[str, float]


def gradient_check(seed: int = 0, layers: int = 2, d: int = 8, heads: int = 2, N: int = 6,
                   n: int = 2, batch_size: int = 6, h: float = 1e-5, lam: float = 0.5,
                   margin: float = 1.0) -> GradCheckReport:
    """Autograd vs central differences on a small 64-bit model.

    A wide margin keeps every hinge active so the loss is smooth at the
    evaluation point.
    """
    from .prototype import style_prototypes
    from .promptbank import new_bank
    from .synthdata import DataConfig, build_dataset

    t0 = time.perf_counter()
    dataset = build_dataset(DataConfig(num_classes=4, instances_per_class=4, seed=seed))
    backbone = Backbone(BackboneConfig(layers=layers, d=d, heads=heads, seed=seed)).double().freeze()
    enc = PrototypeEncoder(d=d, seed=seed + 1)
    protos = style_prototypes({s: dataset.samples(s, "train") for s in dataset.styles}, enc)
    bank = new_bank(N, n, layers, d, "deep", seed=seed, init_prototypes=protos[:N // 2],
                    dtype=torch.float64)
    table = SampleTable(dataset, enc, torch.float64)
    config = TrainConfig(margin=margin, lam=lam)
    tasks = [parse_task(t) for t in ("sketch->natural", "art->natural", "text->natural")]
    batch = sample_batch(dataset, tasks, batch_size, np.random.default_rng(seed))
    analytic = compute_gradients(batch, bank, backbone, config, table)
    numeric = finite_difference_gradients(batch, bank, backbone, config, table, h)
    per = {name: float(relative_error(analytic[name].numpy(), numeric[name]).max())
           for name in ("keys", "values")}
    return GradCheckReport(max(per.values()), bank.num_trainable(),
                           time.perf_counter() - t0, per)
