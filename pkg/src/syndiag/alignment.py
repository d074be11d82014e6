"""Cross-modal alignment pretraining of the visual extractor."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import DTYPE, AdamW, OptimizerConfig, backward, rng
from .encoders import PromptBank, VisualExtractor

TAU_MIN, TAU_MAX = 1e-3, 10.0
_UNIT_TOL = 1e-6


@dataclass
class AlignConfig:
    temperature: float = 0.07
    alpha: float = 0.5
    margin_start: float = 0.1
    margin_end: float = 0.7
    epochs: int = 600
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int | None = None  # None: one sample of every class per batch
    seed: int = 0


def global_feature(seq: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average-pool ``[..., N, D]`` over tokens (optionally masked) and L2-normalise."""
    if seq.shape[-2] == 0:
        raise ValueError("empty feature sequence")
    if mask is None:
        mean = seq.mean(-2)
    else:
        m = mask[..., None].to(seq.dtype)
        mean = (seq * m).sum(-2) / m.sum(-2)
    norm = mean.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("mean feature is zero; direction undefined")
    return mean / norm


def margin_schedule(step: int, total_steps: int, start: float = 0.1, end: float = 0.7) -> float:
    """Cosine ramp from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if step < 0:
        raise ValueError("step must be nonnegative")
    t = min(step, total_steps) / total_steps
    return start + 0.5 * (end - start) * (1 - math.cos(math.pi * t))


def hard_negative_logits(sim: torch.Tensor, margin: float) -> torch.Tensor:
    """Subtract ``margin`` from negatives lying more than ``margin`` below the row's hardest negative."""
    B = sim.shape[0]
    if B < 2:
        return sim
    eye = torch.eye(B, dtype=torch.bool)
    with torch.no_grad():
        hardest = sim.masked_fill(eye, -math.inf).max(dim=1, keepdim=True).values
        easy = (sim < hardest - margin) & ~eye
    return sim - margin * easy.to(sim.dtype)


def _check_unit_rows(x: torch.Tensor, name: str):
    if bool(((x.norm(dim=-1) - 1).abs() > _UNIT_TOL).any()):
        raise ValueError(f"{name} rows must be unit-norm")


def info_nce_hard_negative(v_g: torch.Tensor, t_g: torch.Tensor, tau, margin: float) -> torch.Tensor:
    """Symmetric InfoNCE over ``[B, D]`` unit rows with the easy-negative penalty."""
    if v_g.dim() != 2 or v_g.shape[0] == 0:
        raise ValueError("need a nonempty [B, D] batch")
    if v_g.shape != t_g.shape:
        raise ValueError("visual and text batches differ in shape")
    _check_unit_rows(v_g, "visual")
    _check_unit_rows(t_g, "text")
    sim = v_g @ t_g.T
    target = torch.arange(sim.shape[0])
    i2t = F.cross_entropy(hard_negative_logits(sim, margin) / tau, target)
    t2i = F.cross_entropy(hard_negative_logits(sim.T, margin) / tau, target)
    return (i2t + t2i) / 2


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).transpose(-1, -2)


def local_max_similarity(V: torch.Tensor, T: torch.Tensor, t_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Negative mean of bidirectional best-match cosine similarities.

    Works on a single pair (``[N_v, D]``, ``[N_t, D]``) or a batch, in which
    case the per-pair losses are averaged. ``t_mask`` drops padding tokens.
    """
    if V.shape[-2] == 0 or T.shape[-2] == 0:
        raise ValueError("empty token sequence")
    S = cosine_matrix(V, T)
    if t_mask is None:
        row = S.max(-1).values.mean(-1)
        col = S.max(-2).values.mean(-1)
    else:
        m = t_mask.to(torch.bool)
        row = S.masked_fill(~m[..., None, :], -math.inf).max(-1).values.mean(-1)
        col_max = S.max(-2).values
        col = (col_max * m).sum(-1) / m.sum(-1)
    return (-(row + col) / 2).mean()


def align_loss(V_proj: torch.Tensor, labels, bank: PromptBank, tau, margin: float, alpha: float):
    """``L_global + alpha * L_local`` for a batch pairing each image with its class prompt."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    v_g = global_feature(V_proj)
    t_g = bank.global_features[labels]
    loss = info_nce_hard_negative(v_g, t_g, tau, margin)
    if alpha:
        loss = loss + alpha * local_max_similarity(V_proj, bank.embeddings[labels], bank.mask[labels])
    return loss


class Temperature(torch.nn.Module):
    def __init__(self, value: float = 0.07):
        super().__init__()
        self.log_tau = torch.nn.Parameter(torch.tensor(math.log(value), dtype=DTYPE))

    def forward(self) -> torch.Tensor:
        return self.log_tau.exp()

    @torch.no_grad()
    def clamp_(self):
        self.log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))


@dataclass
class PretrainResult:
    history: list[dict] = field(default_factory=list)
    temperature: float = 0.07
    probe_before: float = float("nan")
    probe_after: float = float("nan")

    def write_csv(self, path: Path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "margin", "temperature"])
            w.writeheader()
            for row in self.history:
                w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in w.fieldnames})


def _class_batches(labels: np.ndarray, batch_size: int | None, gen: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches whose members all carry distinct labels."""
    classes = np.unique(labels)
    per_class = {c: gen.permutation(np.flatnonzero(labels == c)).tolist() for c in classes}
    size = len(classes) if batch_size is None else max(2, min(batch_size, len(classes)))
    batches = []
    while True:
        avail = [c for c in classes if per_class[c]]
        if len(avail) < 2:
            break
        avail = gen.permutation(avail)
        for i in range(0, len(avail), size):
            group = avail[i : i + size]
            if len(group) < 2:
                continue
            batches.append(np.array([per_class[c].pop() for c in group]))
    return batches


def pretrain(images, labels, extractor: VisualExtractor, bank: PromptBank, config: AlignConfig,
             probe: tuple | None = None) -> PretrainResult:
    """Train only the extractor (and temperature) against the frozen prompt bank.

    ``probe`` is an optional ``(images, labels)`` batch whose loss is recorded
    before and after training at the final margin.
    """
    images = torch.as_tensor(np.asarray(images), dtype=DTYPE)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty pretraining set")
    if len(np.unique(labels)) < 2:
        raise ValueError("pretraining needs at least two classes")
    gen = rng(config.seed, 303)
    temp = Temperature(config.temperature)
    opt = AdamW(list(extractor.parameters()) + list(temp.parameters()),
                OptimizerConfig(config.learning_rate, config.weight_decay))
    epoch_batches = [_class_batches(labels, config.batch_size, gen) for _ in range(config.epochs)]
    total = max(1, sum(len(b) for b in epoch_batches))
    result = PretrainResult()

    def probe_loss():
        with torch.no_grad():
            p_img = torch.as_tensor(np.asarray(probe[0]), dtype=DTYPE)
            return float(align_loss(extractor(p_img), probe[1], bank, temp(), config.margin_end, config.alpha))

    if probe is not None:
        result.probe_before = probe_loss()
    step = 0
    for batches in epoch_batches:
        for idx in batches:
            margin = margin_schedule(step, total, config.margin_start, config.margin_end)
            loss = align_loss(extractor(images[idx]), labels[idx], bank, temp(), margin, config.alpha)
            opt.zero_grad()
            backward(loss)
            opt.step()
            temp.clamp_()
            step += 1
            result.history.append({"step": step, "loss": loss.item(), "margin": margin, "temperature": temp().item()})
    result.temperature = temp().item()
    if probe is not None:
        result.probe_after = probe_loss()
    return result


def silhouette(features, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    if (counts < 2).any():
        raise ValueError("every class needs at least two points")
    sq = (X**2).sum(1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
    np.fill_diagonal(D, 0.0)
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    sums = D @ onehot  # [N, C] total distance to each class
    own = onehot.astype(bool)
    a = sums[own] / (counts[np.searchsorted(classes, y)] - 1)
    mean_other = np.where(own, np.inf, sums / counts[None, :])
    b = mean_other.min(1)
    s = (b - a) / np.maximum(a, b)
    return float(np.nan_to_num(s).mean())


def cluster_quality(features, labels) -> float:
    return silhouette(features, labels)


@torch.no_grad()
def global_visual_features(extractor: VisualExtractor, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images)
    out = [global_feature(extractor(torch.as_tensor(images[i : i + batch], dtype=DTYPE))).numpy()
           for i in range(0, len(images), batch)]
    return np.concatenate(out)
