"""Learnable key -> prompt-token store.

Keys are matched against a query prototype with cosine distance; the ``n``
closest entries contribute their per-layer prompt tokens, which are placed
right after the CLS token of the encoder input.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

BANK_MAGIC = b"UPBK"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIB")
_SEED = struct.Struct("<q")
MODES = ("deep", "shallow")


class BankError(ValueError):
    pass


def score(prototype, key) -> float:
    """Cosine distance 1 - cos(p, k), in [0, 2]."""
    p = np.asarray(prototype, dtype=np.float64)
    k = np.asarray(key, dtype=np.float64)
    if p.shape != k.shape:
        raise BankError(f"dimension mismatch {p.shape} vs {k.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(k))):
        raise BankError("non-finite input to score")
    pn, kn = np.linalg.norm(p), np.linalg.norm(k)
    if pn == 0 or kn == 0:
        raise BankError("zero-norm vector has no direction")
    return float(1.0 - (p @ k) / (pn * kn))


def score_torch(prototypes: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Differentiable elementwise gamma for matching (..., d) rows."""
    return 1.0 - (prototypes * keys).sum(-1) / (prototypes.norm(dim=-1) * keys.norm(dim=-1))


@dataclass
class LookupResult:
    selected_ids: list[int]
    scores: list[float]
    prompts: torch.Tensor | None = None  # (layers_stored, n * tokens_per_entry, d)

    @property
    def n(self) -> int:
        return len(self.selected_ids)


class PromptBank(nn.Module):
    def __init__(self, N: int, n: int, layers: int, d: int, insertion_mode: str = "deep",
                 tokens_per_entry: int = 1, seed: int = 0,
                 init_prototypes: Sequence | None = None, dtype=torch.float32):
        super().__init__()
        if not 1 <= n <= N:
            raise BankError(f"selection count n={n} must satisfy 1 <= n <= N={N}")
        if layers < 1 or d < 1 or tokens_per_entry < 1:
            raise BankError("layers, d and tokens_per_entry must be >= 1")
        if insertion_mode not in MODES:
            raise BankError(f"insertion_mode must be one of {MODES}")
        self.N, self.n, self.layers, self.d = N, n, layers, d
        self.tokens_per_entry = tokens_per_entry
        self.insertion_mode = insertion_mode
        self.seed = seed

        rng = np.random.default_rng([seed, 0xBA4C])
        keys = rng.uniform(-0.1, 0.1, (N, d))
        values = rng.uniform(-0.02, 0.02, (N, self.layers_stored, tokens_per_entry, d))
        for i, proto in enumerate(list(init_prototypes or [])[:N]):
            vec = np.asarray(getattr(proto, "vector", proto), dtype=np.float64)
            if vec.shape != (d,):
                raise BankError(f"prototype {i} has shape {vec.shape}, expected ({d},)")
            keys[i] = vec
        self.keys = nn.Parameter(torch.as_tensor(keys, dtype=dtype))
        self.values = nn.Parameter(torch.as_tensor(values, dtype=dtype))

    @property
    def layers_stored(self) -> int:
        return self.layers if self.insertion_mode == "deep" else 1

    @property
    def prompt_len(self) -> int:
        return self.n * self.tokens_per_entry

    def num_trainable(self) -> int:
        return self.keys.numel() + self.values.numel()

    # -- selection ---------------------------------------------------------

    def gammas(self, prototypes: np.ndarray) -> np.ndarray:
        """(B, N) cosine distances of each prototype row to every key."""
        P = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
        if P.shape[-1] != self.d:
            raise BankError(f"prototype dimension {P.shape[-1]} != bank dimension {self.d}")
        K = self.keys.detach().cpu().numpy().astype(np.float64)
        kn = np.linalg.norm(K, axis=1)
        pn = np.linalg.norm(P, axis=1)
        if np.any(kn == 0) or np.any(pn == 0):
            raise BankError("zero-norm key or prototype")
        return 1.0 - (P @ K.T) / (pn[:, None] * kn[None, :])

    def select(self, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Top-n ids per row (ascending gamma, ties to the lower id) and their gammas."""
        if self.N == 0:
            raise BankError("empty bank")
        g = self.gammas(prototypes)
        order = np.argsort(g, axis=1, kind="stable")[:, : self.n]
        return order, np.take_along_axis(g, order, axis=1)

    def prompt_tokens(self, ids) -> torch.Tensor:
        """Gathered prompt values for (..., n) ids -> (..., layers_stored, n*t, d).

        The result stays attached to ``self.values`` so gradients reach the bank.
        """
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
        v = self.values[ids]  # (..., n, Ls, t, d)
        v = v.movedim(-3, -4)  # (..., Ls, n, t, d)
        return v.reshape(*v.shape[:-3], self.n * self.tokens_per_entry, self.d)

    def content_hash(self) -> str:
        return hashlib.sha256(bank_bytes(self)).hexdigest()


def new_bank(N: int, n: int, layers: int, d: int, insertion_mode: str = "deep", seed: int = 0,
             init_prototypes: Sequence | None = None, tokens_per_entry: int = 1,
             dtype=torch.float32) -> PromptBank:
    return PromptBank(N, n, layers, d, insertion_mode, tokens_per_entry, seed, init_prototypes, dtype)


def lookup(bank: PromptBank, prototype) -> LookupResult:
    ids, gam = bank.select(np.asarray(prototype)[None, :])
    return LookupResult([int(i) for i in ids[0]], [float(s) for s in gam[0]],
                        bank.prompt_tokens(ids[0]))


def key_alignment_loss(prototype, lookup_result: LookupResult, bank: PromptBank) -> torch.Tensor:
    """Sum of gamma between the prototype and each selected key (differentiable in the keys)."""
    keys = bank.keys[torch.as_tensor(lookup_result.selected_ids, dtype=torch.long)]
    p = torch.as_tensor(np.asarray(prototype), dtype=keys.dtype).expand_as(keys)
    return score_torch(p, keys).sum()


def expand_tokens(cls_token: torch.Tensor, prompts: torch.Tensor, embedded: torch.Tensor) -> torch.Tensor:
    """[CLS; prompts; tokens] along the sequence axis; leading dims broadcast as a batch."""
    return torch.cat([cls_token.unsqueeze(-2), prompts, embedded], dim=-2)


def expand_sequence(cls_token: torch.Tensor, lookup_result: LookupResult, layer: int,
                    embedded_input: torch.Tensor, bank: PromptBank) -> torch.Tensor:
    """Expanded sequence for one encoder layer.

    At layer 0 this is the initial expansion; in deep mode at layer > 0 the
    caller passes the carried-forward CLS and token states and the prompt
    slots are filled with that layer's values.
    """
    if not 0 <= layer < bank.layers:
        raise BankError(f"layer {layer} out of range [0, {bank.layers})")
    if bank.insertion_mode == "shallow" and layer > 0:
        raise BankError("shallow bank only provides prompts for layer 0")
    if cls_token.shape[-1] != bank.d or embedded_input.shape[-1] != bank.d:
        raise BankError("token dimension does not match the bank")
    prompts = lookup_result.prompts
    if prompts is None:
        prompts = bank.prompt_tokens(lookup_result.selected_ids)
    return expand_tokens(cls_token, prompts[layer].to(embedded_input.dtype), embedded_input)


# -- persistence -----------------------------------------------------------

def bank_bytes(bank: PromptBank) -> bytes:
    mode = MODES.index(bank.insertion_mode)
    header = _HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.N, bank.n, bank.layers, bank.d,
                          bank.tokens_per_entry, mode)
    keys = bank.keys.detach().cpu().numpy().astype("<f4").tobytes()
    values = bank.values.detach().cpu().numpy().astype("<f4").tobytes()
    return header + keys + values + _SEED.pack(bank.seed)


def save_bank(bank: PromptBank, path: "str | Path") -> None:
    Path(path).write_bytes(bank_bytes(bank))


def bank_from_bytes(raw: bytes) -> PromptBank:
    if len(raw) < _HEADER.size:
        raise BankError(f"truncated bank header: missing {_HEADER.size - len(raw)} bytes")
    magic, version, N, n, layers, d, t, mode = _HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise BankError(f"bad bank magic {magic!r}")
    if version != BANK_VERSION:
        raise BankError(f"unsupported bank version {version}")
    if mode >= len(MODES):
        raise BankError(f"unknown insertion mode code {mode}")
    bank = PromptBank(N, n, layers, d, MODES[mode], t, seed=0)
    nk = N * d
    nv = N * bank.layers_stored * t * d
    expected = _HEADER.size + 4 * (nk + nv) + _SEED.size
    if len(raw) < expected:
        raise BankError(f"truncated bank payload: missing {expected - len(raw)} bytes")
    if len(raw) > expected:
        raise BankError(f"bank payload has {len(raw) - expected} unexpected trailing bytes")
    off = _HEADER.size
    keys = np.frombuffer(raw, "<f4", nk, off).reshape(N, d)
    values = np.frombuffer(raw, "<f4", nv, off + 4 * nk).reshape(N, bank.layers_stored, t, d)
    (bank.seed,) = _SEED.unpack_from(raw, off + 4 * (nk + nv))
    with torch.no_grad():
        bank.keys.copy_(torch.from_numpy(keys.astype(np.float32)))
        bank.values.copy_(torch.from_numpy(values.astype(np.float32)))
    return bank


def load_bank(path: "str | Path") -> PromptBank:
    return bank_from_bytes(Path(path).read_bytes())
