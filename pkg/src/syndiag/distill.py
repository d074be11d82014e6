"""Reverse-adapter feature distillation from a frozen teacher into a narrow student."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import global_feature
from .autodiff import DTYPE, AdamW, OptimizerConfig, backward, normal, rng
from .backbone import (
    STUDENT,
    Backbone,
    BackboneConfig,
    DiagnosisModel,
    _as_images,
    partition_hashes,
    partition_of,
    set_trainable,
)
from .encoders import PromptBank
from .fusion import mixed_text_feature, synergy_weights

log = logging.getLogger(__name__)


class Affine(nn.Module):
    """``x @ W + b`` with ``W`` stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, std: float, gen: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(normal(gen, (d_in, d_out), std))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x):
        return x @ self.weight + self.bias

    @classmethod
    def identity(cls, d_in: int, d_out: int) -> Affine:
        a = cls(d_in, d_out, 0.0, rng(0))
        with torch.no_grad():
            a.weight.copy_(torch.eye(d_in, d_out, dtype=DTYPE))
        return a


class AdapterSet(nn.Module):
    def __init__(self, d_teacher: int, d_student: int, seed: int = 0):
        super().__init__()
        gen = rng(seed, 707)
        T, S = d_teacher, d_student
        self.post_visual = Affine(T, S, T**-0.5, gen)
        # student text features: down-projection of the frozen teacher-width prompt bank
        self.post_text = Affine(T, S, T**-0.5, gen)
        self.sandwich_in_v = Affine(S, T, 0.02, gen)
        self.sandwich_in_t = Affine(S, T, 0.02, gen)
        self.sandwich_out = Affine(T, S, T**-0.5, gen)
        self.main = Affine(S, T, 0.02, gen)


def student_partition(name: str) -> str:
    if name.startswith("adapters."):
        return "adapters"
    return partition_of(name)


class StudentModel(nn.Module):
    """Narrow backbone plus reverse adapters; borrows extractor, gate and head from a teacher."""

    def __init__(self, teacher: DiagnosisModel, config: BackboneConfig = STUDENT, seed: int = 0):
        super().__init__()
        d_t = teacher.backbone.cfg.model_dim
        self.backbone = Backbone(config, seed + 1)
        self.adapters = AdapterSet(d_t, config.model_dim, seed)


@dataclass
class DistillPair:
    teacher: DiagnosisModel
    student: StudentModel
    head: nn.Linear  # the classification head the student feeds; the teacher's own until deployment

    @classmethod
    def build(cls, teacher: DiagnosisModel, config: BackboneConfig = STUDENT, seed: int = 0) -> DistillPair:
        set_trainable(teacher, ())
        return cls(teacher, StudentModel(teacher, config, seed), teacher.head)

    def deploy_head(self) -> nn.Linear:
        """Give the edge its own copy of the shared head (bytes identical at hand-off)."""
        head = nn.Linear(self.head.in_features, self.head.out_features, dtype=DTYPE)
        with torch.no_grad():
            head.weight.copy_(self.head.weight)
            head.bias.copy_(self.head.bias)
        head.requires_grad_(False)
        self.head = head
        return head

    def student_hashes(self) -> dict[str, str]:
        return partition_hashes(self.student, student_partition)


def student_visual(images, pair: DistillPair) -> torch.Tensor:
    """``V_S = f_{v,T}(I) W_Av + b_Av``."""
    return pair.student.adapters.post_visual(pair.teacher.extractor(_as_images(images)))


def student_text(bank: PromptBank, pair: DistillPair) -> torch.Tensor:
    """Pooled class text features in student width, ``[C, D_S]`` (unnormalised)."""
    return pair.student.adapters.post_text(bank.pooled())


def student_fuse(v_gS: torch.Tensor, t_gS_mix: torch.Tensor, pair: DistillPair) -> torch.Tensor:
    """Sandwich: up-project both inputs, run the frozen teacher gate, down-project."""
    a = pair.student.adapters
    d_s = pair.student.backbone.cfg.model_dim
    if v_gS.shape[-1] != d_s or t_gS_mix.shape[-1] != d_s:
        raise ValueError(f"student fusion inputs must have dimension {d_s}")
    return a.sandwich_out(pair.teacher.fusion(a.sandwich_in_v(v_gS), a.sandwich_in_t(t_gS_mix)))


def student_features(images, bank: PromptBank, pair: DistillPair) -> torch.Tensor:
    """``h'_S = main(h_S)`` in teacher width, ``[B, D_T]``."""
    V_S = student_visual(images, pair)
    v_g = global_feature(V_S)
    t_c = student_text(bank, pair)
    w = synergy_weights(v_g, F.normalize(t_c, dim=-1))
    h_fused = student_fuse(v_g, mixed_text_feature(w, t_c), pair)
    h_S = pair.student.backbone(h_fused, V_S)
    return pair.student.adapters.main(h_S)


def student_classify(images, bank: PromptBank, pair: DistillPair) -> torch.Tensor:
    return pair.head(student_features(images, bank, pair))


def distill_loss(images, bank: PromptBank, pair: DistillPair) -> torch.Tensor:
    with torch.no_grad():
        h_T = pair.teacher.features(images, bank)
    return F.mse_loss(student_features(images, bank, pair), h_T)


@dataclass
class DistillConfig:
    epochs: int = 40
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 4
    seed: int = 0
    trainable: tuple[str, ...] = ("adapters", "prompts", "lora")


@dataclass
class DistillLog:
    losses: list[float] = field(default_factory=list)
    probe: list[float] = field(default_factory=list)  # probe loss before training and after each epoch
    warnings: list[str] = field(default_factory=list)


def distill_train(pair: DistillPair, images, bank: PromptBank, config: DistillConfig, probe=None,
                  teacher_finetuned: bool = True) -> DistillLog:
    """Pure feature-MSE distillation; no labels are accepted."""
    out = DistillLog()
    if not teacher_finetuned:
        msg = "distilling from a teacher that has not been fine-tuned"
        log.warning(msg)
        out.warnings.append(msg)
    images = _as_images(images)
    if len(images) == 0:
        raise ValueError("empty distillation set")
    set_trainable(pair.teacher, ())
    set_trainable(pair.student, config.trainable, student_partition)
    opt = AdamW(pair.student.parameters(), OptimizerConfig(config.learning_rate, config.weight_decay))
    gen = rng(config.seed, 808)
    with torch.no_grad():
        targets = torch.cat([pair.teacher.features(images[i : i + 256], bank) for i in range(0, len(images), 256)])
    probe = None if probe is None else _as_images(probe)

    def probe_loss():
        with torch.no_grad():
            return distill_loss(probe, bank, pair).item()

    if probe is not None:
        out.probe.append(probe_loss())
    for _ in range(config.epochs):
        order = gen.permutation(len(images))
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i : i + config.batch_size])
            loss = F.mse_loss(student_features(images[idx], bank, pair), targets[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            out.losses.append(loss.item())
        if probe is not None:
            out.probe.append(probe_loss())
    set_trainable(pair.student, (), student_partition)
    return out


@torch.no_grad()
def student_predict(pair: DistillPair, bank: PromptBank, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([student_classify(images[i : i + batch], bank, pair).argmax(-1).numpy()
                           for i in range(0, len(images), batch)])
