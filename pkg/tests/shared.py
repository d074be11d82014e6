"""Session-wide caches of the expensive toy-preset artifacts; callers get deep copies."""

from __future__ import annotations

import copy
from functools import lru_cache

import numpy as np

from syndiag import harness
from syndiag.autodiff import rng
from syndiag.distill import DistillConfig, distill_train


# reduced overrides for pipeline plumbing tests; seconds instead of minutes
MINI = {
    "data": {"n_classes": 5, "n_conditions": 2, "n_windows": 40, "image_size": 32, "n_scales": 32},
    "model": {"extractor": {"channels": [4, 8], "grid": 2},
              "teacher": {"depth": 2, "model_dim": 16, "heads": 2, "lora_rank": 2, "lora_alpha": 4.0},
              "student": {"depth": 1, "model_dim": 8, "heads": 2, "lora_rank": 2, "lora_alpha": 4.0}},
    "pretrain": {"per_class": 3, "epochs": 2},
    "finetune": {"k_shot": 3, "epochs": 2},
    "distill": {"n_samples": 10, "probe": 4, "epochs": 2},
    "online": {"cycles": 2, "probe": 4},
    "eval": {"shots": [1, 3], "conditions": [0], "seeds": [0]},
    "cross": {"k_shot": 3},
}


def config(seed: int = 0) -> dict:
    return harness.load_config(seed=seed)


@lru_cache(maxsize=None)
def dataset(seed: int = 0):
    return harness.load_dataset(config(seed))


@lru_cache(maxsize=None)
def masks(seed: int = 0):
    return harness.split_masks(dataset(seed), config(seed)["data"]["splits"])


@lru_cache(maxsize=None)
def _pretrained(seed: int):
    return harness.pretrained_state(config(seed), dataset(seed), seed, masks=masks(seed))


def pretrained(seed: int = 0):
    state, info = _pretrained(seed)
    return copy.deepcopy(state), info


@lru_cache(maxsize=None)
def _teacher(seed: int, k_shot: int):
    cfg = config(seed)
    state, _ = _pretrained(seed)
    m, model, ep, bank = harness.fewshot_trial(cfg, dataset(seed), state, 0, k_shot, seed, masks(seed))
    return m, model, ep, bank


def teacher(seed: int = 0, k_shot: int = 5):
    """Fine-tuned teacher for condition 0: (metrics, model, episode, bank)."""
    m, model, ep, bank = _teacher(seed, k_shot)
    return m, copy.deepcopy(model), ep, bank


def task_indices(seed: int, split: str, exclude=()):
    ds, mk = dataset(seed), masks(seed)
    _, _, ep, _ = _teacher(seed, 5)
    idx = np.flatnonzero(mk[split] & (ds.conditions == 0) & np.isin(ds.labels, ep.classes))
    return np.setdiff1d(idx, np.asarray(exclude, dtype=int))


@lru_cache(maxsize=None)
def _distilled(seed: int):
    cfg = config(seed)
    ds = dataset(seed)
    _, model, ep, bank = _teacher(seed, 5)
    model = copy.deepcopy(model)
    gen = rng(seed, 77)
    unlabeled = np.sort(gen.choice(task_indices(seed, "train", ep.support), cfg["distill"]["n_samples"], replace=False))
    probe = np.sort(gen.choice(task_indices(seed, "val"), 32, replace=False))
    pair = harness.build_pair(cfg, model, seed)
    log = distill_train(pair, ds.images[unlabeled], bank, DistillConfig(seed=seed), probe=ds.images[probe])
    return pair, log, bank, ep


def distilled(seed: int = 0):
    """(pair, distill log, bank, episode); the pair owns its own teacher copy."""
    pair, log, bank, ep = _distilled(seed)
    return copy.deepcopy(pair), log, bank, ep
