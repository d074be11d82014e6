"""Trainable visual extractor and the frozen semantic side."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import DTYPE, content_hash, normal, rng

PAD_ID = 0
N_TOKENS = 16
VOCAB_SIZE = 1024


@dataclass(frozen=True)
class VisualExtractorConfig:
    input_hw: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (16, 32, 64)
    grid: int = 4
    model_dim: int = 64

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


PAPER_EXTRACTOR = VisualExtractorConfig(input_hw=(224, 224), channels=(64, 128, 256), grid=7, model_dim=4096)


class VisualExtractor(nn.Module):
    """Strided conv stages (GroupNorm + GELU between) -> grid pooling -> token projection ``V @ W_p``."""

    def __init__(self, config: VisualExtractorConfig = VisualExtractorConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        gen = rng(seed, 101)
        convs = []
        c_in = 3
        for c_out in config.channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, dtype=DTYPE)
            with torch.no_grad():
                conv.weight.copy_(normal(gen, conv.weight.shape, (2.0 / (9 * c_in)) ** 0.5))
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(nn.GroupNorm(1, c, dtype=DTYPE) for c in config.channels[:-1])
        self.proj = nn.Parameter(normal(gen, (config.feature_dim, config.model_dim), config.feature_dim**-0.5))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, H, W, 3]`` (or ``[H, W, 3]``) in [0, 1] -> ``[B, N_v, D]``."""
        single = images.dim() == 3
        if single:
            images = images[None]
        if tuple(images.shape[1:]) != (*self.config.input_hw, 3):
            raise ValueError(f"expected images of shape [*, {self.config.input_hw}, 3], got {tuple(images.shape)}")
        x = images.to(DTYPE).permute(0, 3, 1, 2) - 0.5
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(self.norms[i](x))
        x = F.adaptive_avg_pool2d(x, self.config.grid)
        tokens = F.layer_norm(x.flatten(2).transpose(1, 2), (self.config.feature_dim,))  # [B, g*g, D_cnn]
        out = tokens @ self.proj
        return out[0] if single else out


def visual_extract(images, extractor: VisualExtractor) -> torch.Tensor:
    if not isinstance(images, torch.Tensor):
        images = torch.from_numpy(np.asarray(images, dtype=np.float64))
    return extractor(images)


_TOKEN_RE = re.compile(r"[a-z0-9]+(?:\.[0-9]+)?")


def tokenize(text: str, n_tokens: int = N_TOKENS, vocab_size: int = VOCAB_SIZE) -> list[int]:
    """Lowercased word/number tokens hashed into ids ``1..vocab_size-1``; 0 pads."""
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    words = _TOKEN_RE.findall(text.lower())
    if not words:
        raise ValueError(f"no tokens in {text!r}")
    ids = [1 + int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(), "little") % (vocab_size - 1)
           for w in words[:n_tokens]]
    return ids + [PAD_ID] * (n_tokens - len(ids))


class EmbeddingTable:
    """Frozen, seeded table with unit-norm rows; stands in for an LLM word-embedding layer."""

    def __init__(self, vocab_size: int = VOCAB_SIZE, dim: int = 64, seed: int = 0):
        w = normal(rng(seed, 202), (vocab_size, dim))
        self.weight = (w / w.norm(dim=1, keepdim=True)).requires_grad_(False)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def hash(self) -> str:
        return content_hash({"embedding": self.weight})


def embed(ids, table: EmbeddingTable) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return table.weight[ids]


@dataclass
class PromptBank:
    """Per-class texts, token ids, frozen embeddings and pooled global features.

    Pooling runs over content tokens only (``mask``); padding rows stay in
    ``embeddings`` so every class sequence has ``N_t`` rows.
    """

    names: list[str]
    texts: list[str]
    token_ids: torch.Tensor  # [C, N_t]
    embeddings: torch.Tensor  # [C, N_t, D]
    mask: torch.Tensor  # [C, N_t] 1 for content tokens
    global_features: torch.Tensor  # [C, D], unit norm

    @property
    def n_classes(self) -> int:
        return len(self.texts)

    def pooled(self) -> torch.Tensor:
        """Unnormalised masked mean of each class sequence, ``[C, D]``."""
        m = self.mask[..., None]
        return (self.embeddings * m).sum(1) / m.sum(1)

    def hash(self) -> str:
        return content_hash({"embeddings": self.embeddings, "global": self.global_features})


def build_prompt_bank(texts: dict[str, str] | list[str], table: EmbeddingTable, n_tokens: int = N_TOKENS) -> PromptBank:
    if isinstance(texts, dict):
        names, descs = list(texts), list(texts.values())
    else:
        descs = list(texts)
        names = [f"class_{i}" for i in range(len(descs))]
    if len(descs) < 2:
        raise ValueError("a prompt bank needs at least two classes")
    if len({d.strip().lower() for d in descs}) != len(descs):
        raise ValueError("duplicate class descriptions")
    ids = torch.tensor([tokenize(d, n_tokens, table.vocab_size) for d in descs], dtype=torch.long)
    emb = embed(ids, table)
    mask = (ids != PAD_ID).to(DTYPE)
    pooled = (emb * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
    glob = pooled / pooled.norm(dim=1, keepdim=True)
    return PromptBank(names, descs, ids, emb, mask, glob)


def load_prompt_texts(path: Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValueError("prompt file must map class name -> description text")
    return data


# --------------------------------------------------------------------------
# presets

def cwru_prompts() -> dict[str, str]:
    texts = {"normal": "normal operation"}
    for end, end_txt in (("DE", "motor end"), ("FE", "fan end")):
        for kind, kind_txt in (("IR", "inner race"), ("B", "ball"), ("OR", "outer race")):
            for size in ("0.007", "0.014", "0.021"):
                texts[f"{end}_{kind}_{size}"] = f"{kind_txt} fault at {end_txt} with diameter {size} inches"
    return texts


def seu_prompts() -> dict[str, str]:
    return {
        "chipped": "Chipped tooth fault",
        "health": "Healthy working state",
        "miss": "Missing tooth fault",
        "root": "Root fault",
        "surface": "Surface fault",
    }


def toy_prompts() -> dict[str, str]:
    """SEU descriptions with the healthy state first, matching synthetic label 0."""
    seu = seu_prompts()
    return {"health": seu.pop("health"), **seu}
