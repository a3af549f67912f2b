"""Small vision/text transformer towers with prompt-slot injection.

Both towers have hidden width ``d`` so one set of bank prompt tokens feeds
either of them. The embedding of a sequence is the final-layer CLS state,
layer-normed and L2-normalized.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .promptbank import LookupResult, PromptBank, expand_tokens
from .synthdata import MAX_TEXT_LEN

BACKBONE_MAGIC = b"UBKB"
BACKBONE_VERSION = 1
_CONFIG = struct.Struct("<IIIIIIIIIq")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class EncoderError(ValueError):
    pass


@dataclass
class BackboneConfig:
    layers: int = 4
    d: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    patch_size: int = 8
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 64
    max_text_len: int = MAX_TEXT_LEN
    seed: int = 0

    def validate(self) -> None:
        if self.d % self.heads:
            raise EncoderError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise EncoderError("image_size must be divisible by patch_size")
        if self.max_text_len != MAX_TEXT_LEN:
            raise EncoderError(f"max_text_len is fixed at {MAX_TEXT_LEN}")
        if self.layers < 1:
            raise EncoderError("need at least one layer")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class Block(nn.Module):
    """Pre-norm self-attention + GELU MLP."""

    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def attention(self, x, pad_mask=None):
        B, S, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, S, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if pad_mask is not None:
            logits = logits.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        return weights, (weights @ v).transpose(1, 2).reshape(B, S, d)

    def forward(self, x, pad_mask=None):
        _, attended = self.attention(self.ln1(x), pad_mask)
        x = x + self.proj(attended)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class Tower(nn.Module):
    def __init__(self, cfg: BackboneConfig, seq_len: int):
        super().__init__()
        self.cls = nn.Parameter(torch.randn(cfg.d) * 0.02)
        self.pos = nn.Parameter(torch.randn(seq_len + 1, cfg.d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.ln = nn.LayerNorm(cfg.d)

    def forward(self, x_e: torch.Tensor, prompts: torch.Tensor | None = None,
                pad_mask: torch.Tensor | None = None, deep: bool = True) -> torch.Tensor:
        """x_e: (B, L, d) positioned tokens; prompts: (B, layers_stored, P, d)."""
        B = x_e.shape[0]
        cls = (self.cls + self.pos[0]).expand(B, -1)
        n_prompt = 0
        if prompts is None:
            seq = torch.cat([cls.unsqueeze(1), x_e], dim=1)
        else:
            n_prompt = prompts.shape[2]
            seq = expand_tokens(cls, prompts[:, 0], x_e)
        if pad_mask is not None:
            keep = torch.zeros(B, 1 + n_prompt, dtype=torch.bool, device=pad_mask.device)
            pad_mask = torch.cat([keep, pad_mask], dim=1)

        for layer, block in enumerate(self.blocks):
            if layer > 0 and prompts is not None and deep:
                if prompts.shape[1] <= layer:
                    raise EncoderError(f"no prompt values for layer {layer}")
                seq = torch.cat([seq[:, :1], prompts[:, layer], seq[:, 1 + n_prompt:]], dim=1)
            seq = block(seq, pad_mask)
        return F.normalize(self.ln(seq[:, 0]), dim=-1)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        cfg = config or BackboneConfig()
        cfg.validate()
        self.config = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            p = cfg.patch_size
            self.patch_proj = nn.Linear(p * p * cfg.channels, cfg.d)
            with torch.no_grad():
                # start as a projection of standardized pixels: W (x - mean) / std
                self.patch_proj.weight /= PIXEL_STD
                self.patch_proj.bias -= PIXEL_MEAN * self.patch_proj.weight.sum(dim=1)
            self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d)
            self.vision = Tower(cfg, cfg.num_patches)
            self.text = Tower(cfg, cfg.max_text_len)
        finally:
            torch.random.set_rng_state(gen_state)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_proj.weight.dtype

    def freeze(self) -> "Backbone":
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for _, tensor in self.state_dict().items():
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- tokenization ------------------------------------------------------

    def patch_embed(self, images) -> torch.Tensor:
        """(B, H, W, C) or (H, W, C) pixels -> (B, num_patches, d)."""
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images,
                            dtype=self.dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        cfg = self.config
        if tuple(x.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise EncoderError(f"image shape {tuple(x.shape[1:])} does not match backbone config")
        B, p, g = x.shape[0], cfg.patch_size, cfg.image_size // cfg.patch_size
        patches = x.reshape(B, g, p, g, p, cfg.channels).permute(0, 1, 3, 2, 4, 5).reshape(B, g * g, -1)
        return self.patch_proj(patches) + self.vision.pos[1:]

    def tokenize_text(self, tokens) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 20) ids -> ((B, 20, d) embedded tokens, (B, 20) pad mask)."""
        ids = torch.as_tensor(np.asarray(tokens) if not torch.is_tensor(tokens) else tokens,
                              dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] != self.config.max_text_len:
            raise EncoderError(f"text must be padded to length {self.config.max_text_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise EncoderError("token id out of vocabulary")
        return self.tok_emb(ids) + self.text.pos[1:], ids == 0

    # -- encoding ----------------------------------------------------------

    def encode_images(self, images, prompts=None, deep: bool = True) -> torch.Tensor:
        return self.vision(self.patch_embed(images), prompts, None, deep)

    def encode_texts(self, tokens, prompts=None, deep: bool = True) -> torch.Tensor:
        x_e, mask = self.tokenize_text(tokens)
        return self.text(x_e, prompts, mask, deep)


def forward(tokens: torch.Tensor, backbone: Backbone, bank: PromptBank | None = None,
            lookup: LookupResult | None = None, modality: str = "image",
            pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Embed one already-tokenized sequence (L, d); no lookup means no prompt slots."""
    tower = backbone.vision if modality == "image" else backbone.text
    x_e = tokens.unsqueeze(0) if tokens.dim() == 2 else tokens
    if x_e.shape[-1] != backbone.config.d:
        raise EncoderError("token width does not match backbone")
    mask = None if pad_mask is None else pad_mask.reshape(1, -1)
    if lookup is None:
        return tower(x_e, None, mask)[0]
    if bank is None or bank.d != backbone.config.d or bank.layers != backbone.config.layers:
        raise EncoderError("bank does not match backbone layers/width")
    prompts = lookup.prompts if lookup.prompts is not None else bank.prompt_tokens(lookup.selected_ids)
    return tower(x_e, prompts.unsqueeze(0).to(x_e.dtype), mask, bank.insertion_mode == "deep")[0]


def embed_batch(backbone: Backbone, modality: str, payload, bank: PromptBank | None = None,
                ids=None) -> torch.Tensor:
    """Embed a homogeneous batch; ``ids`` (B, n) selects bank prompts per row."""
    prompts = None
    deep = True
    if bank is not None:
        if bank.d != backbone.config.d or bank.layers != backbone.config.layers:
            raise EncoderError("bank does not match backbone layers/width")
        prompts = bank.prompt_tokens(ids).to(backbone.dtype)
        deep = bank.insertion_mode == "deep"
    if modality == "image":
        return backbone.encode_images(payload, prompts, deep)
    return backbone.encode_texts(payload, prompts, deep)


# -- persistence -----------------------------------------------------------

def backbone_bytes(backbone: Backbone) -> bytes:
    c = backbone.config
    out = [BACKBONE_MAGIC, struct.pack("<I", BACKBONE_VERSION),
           _CONFIG.pack(c.layers, c.d, c.heads, c.mlp_ratio, c.patch_size, c.image_size,
                        c.channels, c.vocab_size, c.max_text_len, c.seed)]
    for _, tensor in backbone.state_dict().items():
        out.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(out)


def save_backbone(backbone: Backbone, path: "str | Path") -> None:
    Path(path).write_bytes(backbone_bytes(backbone))


def load_backbone(path: "str | Path") -> Backbone:
    raw = Path(path).read_bytes()
    if raw[:4] != BACKBONE_MAGIC:
        raise EncoderError(f"bad backbone magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != BACKBONE_VERSION:
        raise EncoderError(f"unsupported backbone version {version}")
    fields = _CONFIG.unpack_from(raw, 8)
    names = [n for n in asdict(BackboneConfig()) if n != "seed"] + ["seed"]
    backbone = Backbone(BackboneConfig(**dict(zip(names, fields))))
    offset = 8 + _CONFIG.size
    state = backbone.state_dict()
    expected = offset + 4 * sum(t.numel() for t in state.values())
    if len(raw) != expected:
        raise EncoderError(f"backbone payload size mismatch: expected {expected} bytes, got {len(raw)}")
    for name, tensor in state.items():
        count = tensor.numel()
        arr = np.frombuffer(raw, "<f4", count, offset).reshape(tuple(tensor.shape))
        state[name] = torch.from_numpy(arr.copy())
        offset += 4 * count
    backbone.load_state_dict(state)
    return backbone.freeze()
