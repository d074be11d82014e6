"""Prompt-tuned, LoRA-adapted transformer backbone and the full diagnosis model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import global_feature
from .autodiff import DTYPE, AdamW, OptimizerConfig, backward, content_hash, normal, rng
from .encoders import PromptBank, VisualExtractor, VisualExtractorConfig
from .fusion import GatedFusion, mixed_text_feature, synergy_weights

PARTITIONS = ("extractor", "fusion", "frozen_base", "prompts", "lora", "head")


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 8
    model_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    prompt_len_in: int = 4
    prompt_len_deep: int = 4
    injection_layers: tuple[int, ...] | None = None  # None: (0, depth // 2)
    lora_rank: int = 16
    lora_alpha: float = 32.0

    def __post_init__(self):
        if self.injection_layers is None:
            object.__setattr__(self, "injection_layers", tuple(sorted({0, self.depth // 2})))
        object.__setattr__(self, "injection_layers", tuple(sorted(self.injection_layers)))
        if any(not 0 <= l < self.depth for l in self.injection_layers):
            raise ValueError("injection layers must lie in [0, depth)")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 1 <= self.lora_rank < self.model_dim:
            raise ValueError("lora_rank must satisfy 1 <= r < model_dim")


TEACHER = BackboneConfig()
STUDENT = BackboneConfig(depth=4, model_dim=32, lora_rank=4, lora_alpha=8.0)


def lora_linear(x: torch.Tensor, W0: torch.Tensor, A: torch.Tensor, B: torch.Tensor, r: int, alpha: float):
    """``W0 x + (alpha / r) B A x`` for row-vector inputs ``x[..., k]``; ``W0`` is ``[d, k]``."""
    d, k = W0.shape
    if r >= min(d, k):
        raise ValueError(f"rank {r} is not below min(d, k) = {min(d, k)}")
    if A.shape != (r, k) or B.shape != (d, r):
        raise ValueError(f"A must be [{r}, {k}] and B [{d}, {r}]")
    return x @ W0.T + (alpha / r) * ((x @ A.T) @ B.T)


class LoRALinear(nn.Module):
    def __init__(self, d_out: int, d_in: int, rank: int, alpha: float, gen: np.random.Generator, std: float):
        super().__init__()
        self.weight = nn.Parameter(normal(gen, (d_out, d_in), std))
        self.lora_A = nn.Parameter(normal(gen, (rank, d_in), d_in**-0.5))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))
        self.rank, self.alpha = rank, alpha

    def forward(self, x, adapters: bool = True):
        if not adapters:
            return x @ self.weight.T
        return lora_linear(x, self.weight, self.lora_A, self.lora_B, self.rank, self.alpha)


class Block(nn.Module):
    """Pre-norm bidirectional attention + GELU MLP; LoRA on q, k, v, o."""

    def __init__(self, cfg: BackboneConfig, gen: np.random.Generator):
        super().__init__()
        D, r, a = cfg.model_dim, cfg.lora_rank, cfg.lora_alpha
        std, out_std = 0.02, 0.02 / (2 * cfg.depth) ** 0.5
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(D, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(D, dtype=DTYPE)
        self.q = LoRALinear(D, D, r, a, gen, std)
        self.k = LoRALinear(D, D, r, a, gen, std)
        self.v = LoRALinear(D, D, r, a, gen, std)
        self.o = LoRALinear(D, D, r, a, gen, out_std)
        self.fc1 = nn.Parameter(normal(gen, (cfg.mlp_ratio * D, D), std))
        self.fc2 = nn.Parameter(normal(gen, (D, cfg.mlp_ratio * D), out_std))

    def forward(self, x: torch.Tensor, adapters: bool = True) -> torch.Tensor:
        B, N, D = x.shape
        h = self.ln1(x)
        split = lambda t: t.view(B, N, self.heads, D // self.heads).transpose(1, 2)  # noqa: E731
        q, k, v = (split(m(h, adapters)) for m in (self.q, self.k, self.v))
        att = F.scaled_dot_product_attention(q, k, v)
        x = x + self.o(att.transpose(1, 2).reshape(B, N, D), adapters)
        return x + F.gelu(self.ln2(x) @ self.fc1.T) @ self.fc2.T


def assemble_input(P_in: torch.Tensor, h_fused: torch.Tensor, V_proj: torch.Tensor) -> tuple[torch.Tensor, int]:
    """``[P_in; h_fused; V_proj]`` along the token axis; returns the sequence and the fusion index.

    Accepts unbatched (``[L, D]``, ``[D]``, ``[N_v, D]``) or batched inputs;
    ``P_in`` is shared across the batch.
    """
    D = V_proj.shape[-1]
    if P_in.shape[-1] != D or h_fused.shape[-1] != D:
        raise ValueError("prompt, fused and visual dimensions differ")
    if V_proj.dim() == 3:
        P = P_in.expand(V_proj.shape[0], *P_in.shape)
        return torch.cat([P, h_fused[:, None, :], V_proj], dim=1), P_in.shape[0]
    return torch.cat([P_in, h_fused[None], V_proj], dim=0), P_in.shape[0]


def inject_prompts(hidden: torch.Tensor, n_prompt: int, prompts: torch.Tensor | None) -> tuple[torch.Tensor, int]:
    """Drop the current ``n_prompt`` leading prompt tokens and prepend ``prompts``.

    ``prompts=None`` (a non-injection layer) leaves the sequence unchanged.
    Returns the new sequence and the new prompt count (= fusion index).
    """
    if prompts is None:
        return hidden, n_prompt
    rest = hidden[..., n_prompt:, :]
    if hidden.dim() == 3:
        prompts = prompts.expand(hidden.shape[0], *prompts.shape)
    return torch.cat([prompts, rest], dim=-2), prompts.shape[-2]


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = rng(seed, 505, cfg.depth, cfg.model_dim)
        self.blocks = nn.ModuleList(Block(cfg, gen) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.model_dim, dtype=DTYPE)
        pgen = rng(seed, 506, cfg.depth, cfg.model_dim)
        self.prompt_in = nn.Parameter(normal(pgen, (cfg.prompt_len_in, cfg.model_dim), 0.02))
        self.prompts = nn.ParameterDict(
            {str(l): nn.Parameter(normal(pgen, (cfg.prompt_len_deep, cfg.model_dim), 0.02)) for l in cfg.injection_layers}
        )

    def forward(self, h_fused: torch.Tensor, V_proj: torch.Tensor, adapters: bool = True) -> torch.Tensor:
        """Fusion-token output ``h_fusion_out`` for batched ``[B, D]`` / ``[B, N_v, D]`` inputs.

        ``adapters=False`` runs the bare base model: no prompts at any layer and no LoRA.
        """
        P_in = self.prompt_in if adapters else self.prompt_in[:0]
        x, idx = assemble_input(P_in, h_fused, V_proj)
        for l, block in enumerate(self.blocks):
            if adapters:
                x, idx = inject_prompts(x, idx, self.prompts[str(l)] if str(l) in self.prompts else None)
            x = block(x, adapters)
        return self.ln_f(x[:, idx])


class DiagnosisModel(nn.Module):
    """Extractor -> synergy fusion -> prompted backbone -> linear head on the fusion token."""

    def __init__(self, n_classes: int, backbone: BackboneConfig = TEACHER,
                 extractor: VisualExtractorConfig | None = None, seed: int = 0):
        super().__init__()
        extractor = extractor or VisualExtractorConfig(model_dim=backbone.model_dim)
        if extractor.model_dim != backbone.model_dim:
            raise ValueError("extractor output must match the backbone width")
        self.extractor = VisualExtractor(extractor, seed)
        self.fusion = GatedFusion(backbone.model_dim, seed)
        self.backbone = Backbone(backbone, seed)
        self.head = nn.Linear(backbone.model_dim, n_classes, dtype=DTYPE)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def fused(self, V_proj: torch.Tensor, bank: PromptBank) -> torch.Tensor:
        v_g = global_feature(V_proj)
        w = synergy_weights(v_g, bank.global_features)
        return self.fusion(v_g, mixed_text_feature(w, bank.pooled()))

    def features(self, images, bank: PromptBank, adapters: bool = True) -> torch.Tensor:
        """``h_fusion_out`` for a batch of images, ``[B, D]``."""
        V = self.extractor(_as_images(images))
        return self.backbone(self.fused(V, bank), V, adapters)

    def forward(self, images, bank: PromptBank, adapters: bool = True) -> torch.Tensor:
        if bank.n_classes != self.n_classes:
            raise ValueError(f"bank has {bank.n_classes} classes, head has {self.n_classes}")
        return self.head(self.features(images, bank, adapters))


def _as_images(images) -> torch.Tensor:
    t = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images, dtype=np.float64))
    return t.to(DTYPE)


def forward_classify(images, bank: PromptBank, model: DiagnosisModel) -> torch.Tensor:
    single = np.ndim(images) == 3
    logits = model(_as_images(images)[None] if single else images, bank)
    return logits[0] if single else logits


# --------------------------------------------------------------------------
# parameter partitions


def partition_of(name: str) -> str:
    if name.startswith("extractor."):
        return "extractor"
    if name.startswith("fusion."):
        return "fusion"
    if name.startswith("head."):
        return "head"
    if name.startswith("backbone."):
        if ".lora_" in name:
            return "lora"
        if name.startswith(("backbone.prompt_in", "backbone.prompts.")):
            return "prompts"
        return "frozen_base"
    raise KeyError(name)


def partitions(model: nn.Module, classify=partition_of) -> dict[str, dict[str, torch.Tensor]]:
    out: dict[str, dict[str, torch.Tensor]] = {}
    for name, p in model.named_parameters():
        out.setdefault(classify(name), {})[name] = p
    return out


def partition_hashes(model: nn.Module, classify=partition_of) -> dict[str, str]:
    return {k: content_hash(v) for k, v in sorted(partitions(model, classify).items())}


def set_trainable(model: nn.Module, trainable: set[str] | tuple[str, ...], classify=partition_of):
    for name, p in model.named_parameters():
        p.requires_grad_(classify(name) in trainable)


def parameter_counts(model: nn.Module, classify=partition_of) -> dict[str, int]:
    return {k: sum(p.numel() for p in v.values()) for k, v in sorted(partitions(model, classify).items())}


# --------------------------------------------------------------------------
# few-shot fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int = 20
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    seed: int = 0
    trainable: tuple[str, ...] = ("extractor", "fusion", "prompts", "lora", "head")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)  # per step
    epoch_losses: list[float] = field(default_factory=list)  # full-set loss after each epoch (index 0: before)


def finetune_fewshot(images, labels, model: DiagnosisModel, bank: PromptBank, config: FinetuneConfig) -> TrainLog:
    """Cross-entropy fine-tuning of the adapter partitions on an N-way K-shot support set."""
    images = _as_images(images)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) == 0:
        raise ValueError("empty episode")
    set_trainable(model, config.trainable)
    opt = AdamW(model.parameters(), OptimizerConfig(config.learning_rate, config.weight_decay))
    gen = rng(config.seed, 606)
    log = TrainLog()

    def full_loss():
        with torch.no_grad():
            return F.cross_entropy(model(images, bank), labels).item()

    log.epoch_losses.append(full_loss())
    for _ in range(config.epochs):
        order = gen.permutation(len(labels))
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i : i + config.batch_size])
            loss = F.cross_entropy(model(images[idx], bank), labels[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            log.losses.append(loss.item())
        log.epoch_losses.append(full_loss())
    set_trainable(model, ())
    return log


@torch.no_grad()
def predict(model, bank: PromptBank, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([model(_as_images(images[i : i + batch]), bank).argmax(-1).numpy()
                           for i in range(0, len(images), batch)])


# --------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + one .npz blob per partition


def save_checkpoint(model: nn.Module, path: Path, config: dict, classify=partition_of, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    parts = partitions(model, classify)
    for part, tensors in parts.items():
        np.savez(path / f"{part}.npz", **{n: t.detach().numpy() for n, t in tensors.items()})
    manifest = {"config": config, "partitions": {k: content_hash(v) for k, v in sorted(parts.items())}}
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(model: nn.Module, path: Path, classify=partition_of) -> dict:
    """Fill ``model`` from a checkpoint directory and verify every partition hash."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    state = {}
    for part in manifest["partitions"]:
        with np.load(path / f"{part}.npz") as blob:
            state.update({k: torch.from_numpy(blob[k]) for k in blob.files})
    model.load_state_dict(state, strict=True)
    got = partition_hashes(model, classify)
    if got != manifest["partitions"]:
        raise ValueError(f"checkpoint {path} failed partition hash verification")
    return manifest


def config_dict(cfg) -> dict:
    return asdict(cfg)
