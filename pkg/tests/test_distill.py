import inspect

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from syndiag.autodiff import backward, rng, tensor
from syndiag.backbone import STUDENT, TEACHER, BackboneConfig, DiagnosisModel, parameter_counts, partition_hashes
from syndiag.distill import (
    Affine,
    DistillConfig,
    DistillPair,
    distill_loss,
    distill_train,
    student_classify,
    student_features,
    student_fuse,
    student_partition,
    student_predict,
    student_visual,
)
from syndiag.encoders import EmbeddingTable, build_prompt_bank, toy_prompts

SMALL_T = BackboneConfig(depth=2, model_dim=64, lora_rank=4)
SMALL_S = BackboneConfig(depth=2, model_dim=32, lora_rank=4, lora_alpha=8.0)


@pytest.fixture(scope="module")
def bank():
    return build_prompt_bank(toy_prompts(), EmbeddingTable())


def _teacher(seed=0, cfg=SMALL_T):
    model = DiagnosisModel(5, cfg, seed=seed)
    with torch.no_grad():
        model.head.weight.copy_(tensor(rng(seed, 1).normal(0, 1, size=model.head.weight.shape)))
    return model


def _images(n, seed=60):
    return rng(seed).random((n, 64, 64, 3))


def test_post_visual_identity_slice():
    pair = DistillPair.build(_teacher(), SMALL_S)
    pair.student.adapters.post_visual = Affine.identity(64, 32)
    img = _images(2)
    V_S = student_visual(img, pair)
    with torch.no_grad():
        V_T = pair.teacher.extractor(tensor(img))
    assert V_S.shape == (2, 16, 32)
    assert torch.equal(V_S, V_T[..., :32])


def test_identity_sandwich_reproduces_teacher_gate():
    cfg = BackboneConfig(depth=2, model_dim=32, lora_rank=4)
    pair = DistillPair.build(_teacher(cfg=cfg), cfg)
    a = pair.student.adapters
    a.sandwich_in_v, a.sandwich_in_t, a.sandwich_out = (Affine.identity(32, 32) for _ in range(3))
    gen = rng(61)
    v, t = tensor(gen.normal(size=(3, 32))), tensor(gen.normal(size=(3, 32)))
    with torch.no_grad():
        assert torch.equal(student_fuse(v, t, pair), pair.teacher.fusion(v, t))


def test_fuse_shape_and_gradient_presence():
    pair = DistillPair.build(_teacher(), SMALL_S)
    gen = rng(62)
    v, t = tensor(gen.normal(size=(2, 32))), tensor(gen.normal(size=(2, 32)))
    a = pair.student.adapters
    for m in (a.sandwich_in_v, a.sandwich_in_t, a.sandwich_out):
        m.requires_grad_(True)
    h = student_fuse(v, t, pair)
    assert h.shape == (2, 32)
    backward((h**2).sum())
    for m in (a.sandwich_in_v, a.sandwich_in_t, a.sandwich_out):
        assert m.weight.grad is not None and m.weight.grad.abs().sum() > 0
    assert all(p.grad is None for p in pair.teacher.fusion.parameters())
    with pytest.raises(ValueError):
        student_fuse(tensor(np.zeros((1, 64))), t[:1], pair)


def test_mse_example():
    assert F.mse_loss(tensor([1.0, 2.0]), tensor([1.0, 0.0])).item() == 2.0


def test_rigged_main_adapter_gives_zero_loss_and_identical_logits(bank):
    pair = DistillPair.build(_teacher(), SMALL_S)
    img = _images(1)
    with torch.no_grad():
        h_T = pair.teacher.features(img, bank)[0]
        pair.student.adapters.main.weight.zero_()
        pair.student.adapters.main.bias.copy_(h_T)
        assert distill_loss(img, bank, pair).item() == 0.0
        assert torch.equal(student_classify(img, bank, pair), pair.teacher(img, bank))


def test_shared_head_bound(bank):
    pair = DistillPair.build(_teacher(), SMALL_S)
    img = _images(3)
    with torch.no_grad():
        h_T = pair.teacher.features(img, bank)
        h_S = student_features(img, bank, pair)
        eps = (h_S - h_T).abs().max().item()
        gap = (student_classify(img, bank, pair) - pair.teacher(img, bank)).abs().max().item()
    assert gap <= pair.head.weight.abs().max().item() * 64 * eps + 1e-12


def test_logit_shift_keeps_argmax(bank):
    pair = DistillPair.build(_teacher(), SMALL_S)
    img = _images(4)
    with torch.no_grad():
        logits = student_classify(img, bank, pair)
    assert logits.shape == (4, 5)
    assert torch.equal((logits + 3.7).argmax(-1), logits.argmax(-1))


def test_loss_is_nonnegative(bank):
    for seed in range(3):
        pair = DistillPair.build(_teacher(seed), SMALL_S, seed=seed)
        with torch.no_grad():
            assert distill_loss(_images(2, seed), bank, pair).item() >= 0


def test_training_freezes_teacher_and_reduces_probe_loss(bank):
    pair = DistillPair.build(_teacher(), SMALL_S)
    before_t = partition_hashes(pair.teacher)
    before_s = pair.student_hashes()
    imgs = _images(12)
    log = distill_train(pair, imgs, bank, DistillConfig(epochs=4, learning_rate=3e-3), probe=imgs[:6])
    assert partition_hashes(pair.teacher) == before_t
    after_s = pair.student_hashes()
    assert after_s["frozen_base"] == before_s["frozen_base"]
    for part in ("adapters", "prompts", "lora"):
        assert after_s[part] != before_s[part]
    assert len(log.probe) == 5 and log.probe[-1] < log.probe[0]
    assert len(log.losses) == 4 * 3
    assert not log.warnings
    assert not any(p.requires_grad for p in pair.student.parameters())


def test_training_interface_takes_no_labels():
    assert "labels" not in inspect.signature(distill_train).parameters


def test_unfinetuned_teacher_warns(bank, caplog):
    pair = DistillPair.build(_teacher(), SMALL_S)
    log = distill_train(pair, _images(2), bank, DistillConfig(epochs=1), teacher_finetuned=False)
    assert log.warnings and "fine-tuned" in log.warnings[0]
    assert "fine-tuned" in caplog.text
    with pytest.raises(ValueError):
        distill_train(pair, np.zeros((0, 64, 64, 3)), bank, DistillConfig(epochs=1))


def test_student_has_no_private_head():
    pair = DistillPair.build(_teacher(), SMALL_S)
    assert pair.head is pair.teacher.head
    assert not any("head" in n for n, _ in pair.student.named_parameters())
    deployed = pair.deploy_head()
    assert deployed is not pair.teacher.head
    assert torch.equal(deployed.weight, pair.teacher.head.weight)


def test_student_partitions_and_predict(bank):
    pair = DistillPair.build(_teacher(), SMALL_S)
    assert student_partition("adapters.main.weight") == "adapters"
    assert student_partition("backbone.prompt_in") == "prompts"
    preds = student_predict(pair, bank, _images(5), batch=2)
    assert preds.shape == (5,) and set(preds) <= set(range(5))


def test_default_preset_compression():
    teacher = DiagnosisModel(5, TEACHER)
    pair = DistillPair.build(teacher, STUDENT)
    t_total = sum(parameter_counts(teacher).values())
    s_counts = parameter_counts(pair.student, student_partition)
    s_total = sum(s_counts.values()) + teacher.head.weight.numel() + teacher.head.bias.numel()
    assert t_total / s_total >= 4
