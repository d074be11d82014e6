import itertools
import json

import numpy as np
import pytest
import torch

from syndiag.encoders import (
    PAD_ID,
    PAPER_EXTRACTOR,
    EmbeddingTable,
    VisualExtractor,
    VisualExtractorConfig,
    build_prompt_bank,
    cwru_prompts,
    embed,
    load_prompt_texts,
    seu_prompts,
    tokenize,
    toy_prompts,
    visual_extract,
)


def test_toy_extractor_shape_and_determinism():
    ext = VisualExtractor(VisualExtractorConfig(), seed=0)
    img = np.random.default_rng(0).random((64, 64, 3))
    out = visual_extract(img, ext)
    assert out.shape == (16, 64)
    assert torch.equal(out, visual_extract(img.copy(), ext))
    batch = visual_extract(np.stack([img, img]), ext)
    assert batch.shape == (2, 16, 64)
    torch.testing.assert_close(batch[0], out, rtol=0, atol=1e-12)


def test_full_scale_extractor_shape():
    cfg = PAPER_EXTRACTOR
    assert (cfg.n_tokens, cfg.feature_dim) == (49, 256)
    ext = VisualExtractor(cfg)
    assert visual_extract(np.zeros((224, 224, 3)), ext).shape == (49, 4096)


def test_extractor_rejects_wrong_shape():
    ext = VisualExtractor()
    with pytest.raises(ValueError):
        visual_extract(np.zeros((32, 32, 3)), ext)
    with pytest.raises(ValueError):
        visual_extract(np.zeros((64, 64, 1)), ext)


def test_tokenize_normal_operation():
    ids = tokenize("normal operation")
    assert len(ids) == 16
    assert sum(i != PAD_ID for i in ids) == 2
    assert ids[2:] == [PAD_ID] * 14
    assert ids == tokenize("Normal  operation.")


def test_tokenize_rejects_empty():
    for text in ("", "   "):
        with pytest.raises(ValueError):
            tokenize(text)


def test_tokenize_keeps_decimal_numbers_and_truncates():
    ids = tokenize("fault diameter 0.007 inches")
    assert sum(i != PAD_ID for i in ids) == 4
    assert tokenize("x " * 40) == [tokenize("x")[0]] * 16


def test_embedding_rows_unit_norm_and_oov():
    table = EmbeddingTable()
    np.testing.assert_allclose(table.weight.norm(dim=1).numpy(), 1.0, atol=1e-9)
    assert not table.weight.requires_grad
    with pytest.raises(ValueError):
        embed([0, table.vocab_size], table)
    with pytest.raises(ValueError):
        embed([-1], table)


def test_distinct_preset_tokens_are_dissimilar():
    table = EmbeddingTable(dim=64)
    words = {w for texts in (cwru_prompts(), seu_prompts()) for t in texts.values() for w in t.lower().split()}
    ids = sorted({tokenize(w)[0] for w in words})
    emb = embed(ids, table)
    sims = emb @ emb.T
    off = sims[~torch.eye(len(ids), dtype=torch.bool)]
    assert off.max().item() < 0.9


def test_preset_banks():
    table = EmbeddingTable()
    cwru = build_prompt_bank(cwru_prompts(), table)
    assert cwru.n_classes == 19
    assert "inner race fault at motor end with diameter 0.007 inches" in cwru.texts
    seu = build_prompt_bank(seu_prompts(), table)
    assert seu.n_classes == 5 and "Chipped tooth fault" in seu.texts
    assert list(toy_prompts())[0] == "health"
    for bank in (cwru, seu):
        np.testing.assert_allclose(bank.global_features.norm(dim=1).numpy(), 1.0, atol=1e-12)
        assert bank.embeddings.shape == (bank.n_classes, 16, 64)


def test_bank_rejects_duplicates_and_single_class():
    table = EmbeddingTable()
    with pytest.raises(ValueError, match="duplicate"):
        build_prompt_bank(["Root fault", "root fault"], table)
    with pytest.raises(ValueError):
        build_prompt_bank(["Root fault"], table)


def test_pooling_ignores_padding():
    table = EmbeddingTable()
    bank = build_prompt_bank(["normal operation", "ball fault"], table)
    ids = tokenize("normal operation")[:2]
    mean = table.weight[ids].mean(0)
    torch.testing.assert_close(bank.global_features[0], mean / mean.norm(), rtol=0, atol=1e-12)
    torch.testing.assert_close(bank.pooled()[0], mean, rtol=0, atol=1e-12)


def test_bank_permutation_equivariance():
    table = EmbeddingTable()
    texts = list(seu_prompts().values())
    bank = build_prompt_bank(texts, table)
    for perm in itertools.islice(itertools.permutations(range(5)), 0, 120, 17):
        permuted = build_prompt_bank([texts[i] for i in perm], table)
        assert torch.equal(permuted.global_features, bank.global_features[list(perm)])


def test_prompt_json(tmp_path):
    p = tmp_path / "prompts.json"
    p.write_text(json.dumps(seu_prompts()))
    assert load_prompt_texts(p) == seu_prompts()
    p.write_text(json.dumps(["a", "b"]))
    with pytest.raises(ValueError):
        load_prompt_texts(p)


def test_table_hash_is_content_based():
    a, b = EmbeddingTable(seed=0), EmbeddingTable(seed=0)
    assert a.hash() == b.hash() != EmbeddingTable(seed=1).hash()
