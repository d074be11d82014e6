"""Experiment orchestration: configs, episodes, evaluation, resource accounting and staged runs."""

from __future__ import annotations

import copy
import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import plotting
from .alignment import AlignConfig, global_visual_features, pretrain, silhouette
from .autodiff import AdamW, OptimizerConfig, backward, content_hash, rng
from .backbone import (
    BackboneConfig,
    DiagnosisModel,
    FinetuneConfig,
    finetune_fewshot,
    load_checkpoint,
    parameter_counts,
    partition_hashes,
    predict,
    save_checkpoint,
    set_trainable,
)
from .distill import (
    DistillConfig,
    DistillPair,
    distill_train,
    student_classify,
    student_features,
    student_partition,
    student_predict,
)
from .edge import (
    CloudClient,
    CloudEndpoint,
    CloudServer,
    EdgeConfig,
    EdgeNode,
    HeadWeights,
    quantize_head_,
    run_update_cycles,
    serialize_head,
)
from .encoders import (
    EmbeddingTable,
    PromptBank,
    VisualExtractorConfig,
    build_prompt_bank,
    cwru_prompts,
    load_prompt_texts,
    seu_prompts,
    toy_prompts,
)
from .metrics import Metrics, compute_metrics, evaluate
from .signals import WindowSet, load_dataset_dir, synthetic_dataset

log = logging.getLogger(__name__)

STAGES = ("gen-data", "pretrain", "finetune", "distill", "online-update", "eval", "cross-eval", "resources", "report")


class StageDependencyError(RuntimeError):
    """A stage was asked to run before the artifacts it consumes exist."""


# --------------------------------------------------------------------------
# configuration


def _toy() -> dict:
    return {
        "preset": "toy",
        "seed": 0,
        "stages": list(STAGES),
        "data": {"source": "synthetic", "path": None, "n_classes": 5, "n_conditions": 4, "n_windows": 200,
                 "image_size": 64, "noise_sigma": 0.6, "n_scales": 128,
                 "splits": {"pretrain": 0.2, "train": 0.3, "val": 0.3, "test": 0.2}},
        "prompts": "toy",
        "model": {
            "extractor": {"channels": [16, 32, 64], "grid": 4},
            # injection layers left null so they follow any depth override
            "teacher": {**asdict(BackboneConfig()), "injection_layers": None},
            "student": {**asdict(BackboneConfig(depth=4, model_dim=32, lora_rank=4, lora_alpha=8.0)),
                        "injection_layers": None},
        },
        "pretrain": {"per_class": 7, "epochs": 60, "learning_rate": 3e-3, "weight_decay": 0.0, "temperature": 0.07,
                     "alpha": 0.5, "margin_start": 0.1, "margin_end": 0.7, "batch_size": None},
        "finetune": {"n_way": 5, "k_shot": 5, "condition": 0, "epochs": 20, "learning_rate": 3e-4,
                     "weight_decay": 0.01, "batch_size": 4},
        "distill": {"n_samples": 100, "probe": 32, "epochs": 40, "learning_rate": 3e-4, "batch_size": 4},
        "online": {"cycles": 10, "per_class": 3, "epochs": 10, "learning_rate": 1e-4, "batch_size": 16,
                   "probe": 32, "transport": "inproc"},
        "eval": {"shots": [1, 3, 5, 7], "conditions": [0, 1, 2, 3], "seeds": [0]},
        "cross": {"k_shot": 5},
        "resources": {"runs": 30},
    }


def _full_scale(name: str, n_classes: int, pretrain_epochs: int, n_way: int) -> dict:
    cfg = _toy()
    cfg["preset"] = name
    cfg["prompts"] = name
    cfg["data"]["n_classes"] = n_classes
    cfg["pretrain"].update(epochs=pretrain_epochs, learning_rate=1e-2)
    cfg["finetune"]["n_way"] = n_way
    cfg["online"]["cycles"] = 30
    return cfg


PRESETS = {
    "toy": _toy,
    "cwru": lambda: _full_scale("cwru", 19, 600, 19),
    "seu": lambda: _full_scale("seu", 5, 1000, 5),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def default_config(preset: str = "toy") -> dict:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset]()


def load_config(path: Path | None = None, preset: str | None = None, seed: int | None = None) -> dict:
    """Preset defaults overlaid with a JSON document; ``seed`` overrides both."""
    over = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(over, dict):
        raise ValueError("config must be a JSON object")
    cfg = _merge(default_config(preset or over.get("preset", "toy")), over)
    unknown = set(cfg) - set(_toy())
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    bad = [s for s in cfg["stages"] if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stages {bad}")
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def prompt_texts(cfg: dict) -> dict[str, str]:
    p = cfg["prompts"]
    named = {"toy": toy_prompts, "cwru": cwru_prompts, "seu": seu_prompts}
    return named[p]() if p in named else load_prompt_texts(Path(p))


# --------------------------------------------------------------------------
# data splits and episodes


def split_masks(ds: WindowSet, fractions: dict[str, float]) -> dict[str, np.ndarray]:
    """Cut each recording's windows, in time order, into consecutive named blocks."""
    total = sum(fractions.values())
    if not np.isclose(total, 1.0):
        raise ValueError("split fractions must sum to 1")
    counts = {}
    for lab, cond in set(zip(ds.labels.tolist(), ds.conditions.tolist())):
        counts[lab, cond] = int(ds.index[(ds.labels == lab) & (ds.conditions == cond)].max()) + 1
    n = np.array([counts[lab, cond] for lab, cond in zip(ds.labels.tolist(), ds.conditions.tolist())])
    pos = ds.index / n
    out, lo = {}, 0.0
    for name, frac in fractions.items():
        hi = lo + frac
        out[name] = (pos >= lo) & (pos < hi) if hi < 1 - 1e-12 else pos >= lo
        lo = hi
    return out


@dataclass
class Episode:
    n_way: int
    k_shot: int
    classes: np.ndarray  # original label of each episode class
    support: np.ndarray  # dataset indices, N*K
    support_labels: np.ndarray  # episode-local labels 0..N-1
    test: np.ndarray
    test_labels: np.ndarray
    seed: int

    def describe(self) -> dict:
        return {"n_way": self.n_way, "k_shot": self.k_shot, "classes": self.classes.tolist(),
                "support": self.support.tolist(), "seed": self.seed, "n_test": int(len(self.test))}


def sample_episode(labels, candidates, test, n_way: int, k_shot: int, seed: int) -> Episode:
    """Draw ``k_shot`` support indices per class from ``candidates``; ``test`` is filtered to the drawn classes."""
    labels = np.asarray(labels)
    candidates, test = np.asarray(candidates), np.asarray(test)
    if k_shot < 1 or n_way < 2:
        raise ValueError("need n_way >= 2 and k_shot >= 1")
    pool_classes = np.unique(labels[candidates])
    if len(pool_classes) < n_way:
        raise ValueError(f"{n_way}-way episode from {len(pool_classes)} classes")
    gen = rng(seed, 1111)
    classes = pool_classes if len(pool_classes) == n_way else np.sort(gen.choice(pool_classes, n_way, replace=False))
    support = []
    for c in classes:
        pool = candidates[labels[candidates] == c]
        if len(pool) < k_shot:
            raise ValueError(f"class {c} has {len(pool)} candidates, {k_shot} needed")
        support.append(np.sort(gen.choice(pool, k_shot, replace=False)))
    support = np.concatenate(support)
    test = test[np.isin(labels[test], classes)]
    if np.intersect1d(support, test).size:
        raise ValueError("support and test sets overlap")
    local = {int(c): i for i, c in enumerate(classes)}
    to_local = np.vectorize(lambda y: local[int(y)], otypes=[np.int64])
    return Episode(n_way, k_shot, classes, support, to_local(labels[support]), test,
                   to_local(labels[test]) if len(test) else np.zeros(0, np.int64), seed)


# --------------------------------------------------------------------------
# model construction


def build_bank(cfg: dict, classes=None) -> PromptBank:
    texts = prompt_texts(cfg)
    if len(texts) != cfg["data"]["n_classes"]:
        raise ValueError(f"{len(texts)} prompt texts for {cfg['data']['n_classes']} classes")
    if classes is not None:
        items = list(texts.items())
        texts = dict(items[int(c)] for c in classes)
    table = EmbeddingTable(dim=cfg["model"]["teacher"]["model_dim"], seed=cfg["seed"])
    return build_prompt_bank(texts, table)


def _backbone_cfg(d: dict) -> BackboneConfig:
    d = dict(d)
    if d.get("injection_layers") is not None:
        d["injection_layers"] = tuple(d["injection_layers"])
    return BackboneConfig(**d)


def build_teacher(cfg: dict, n_classes: int, seed: int | None = None) -> DiagnosisModel:
    t = _backbone_cfg(cfg["model"]["teacher"])
    e = cfg["model"]["extractor"]
    size = cfg["data"]["image_size"]
    ext = VisualExtractorConfig((size, size), tuple(e["channels"]), e["grid"], t.model_dim)
    return DiagnosisModel(n_classes, t, ext, cfg["seed"] if seed is None else seed)


def build_pair(cfg: dict, teacher: DiagnosisModel, seed: int | None = None) -> DistillPair:
    return DistillPair.build(teacher, _backbone_cfg(cfg["model"]["student"]), cfg["seed"] if seed is None else seed)


def align_config(cfg: dict, seed: int) -> AlignConfig:
    p = cfg["pretrain"]
    return AlignConfig(p["temperature"], p["alpha"], p["margin_start"], p["margin_end"], p["epochs"],
                       p["learning_rate"], p["weight_decay"], p["batch_size"], seed)


def finetune_config(cfg: dict, seed: int) -> FinetuneConfig:
    f = cfg["finetune"]
    return FinetuneConfig(f["epochs"], f["learning_rate"], f["weight_decay"], f["batch_size"], seed)


def load_dataset(cfg: dict) -> WindowSet:
    d = cfg["data"]
    if d["source"] == "synthetic":
        return synthetic_dataset(d["n_classes"], d["n_conditions"], d["n_windows"], d["image_size"],
                                 d["noise_sigma"], cfg["seed"], d["n_scales"])
    if d["source"] == "dir":
        ds, meta = load_dataset_dir(Path(d["path"]), d["image_size"], d["n_scales"], d["n_windows"])
        if len(meta["classes"]) != d["n_classes"]:
            raise ValueError("data.n_classes disagrees with meta.json")
        return ds
    raise ValueError(f"unknown data source {d['source']!r}")


def pretrain_pool(ds: WindowSet, mask: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    gen = rng(seed, 1212)
    idx = []
    for c in np.unique(ds.labels):
        pool = np.flatnonzero(mask & (ds.labels == c))
        if len(pool) < per_class:
            raise ValueError(f"class {c} has only {len(pool)} pretraining windows")
        idx.append(np.sort(gen.choice(pool, per_class, replace=False)))
    return np.concatenate(idx)


@torch.no_grad()
def zero_shot_accuracy(extractor, bank: PromptBank, images, labels) -> float:
    v = torch.from_numpy(global_visual_features(extractor, images))
    return float(((v @ bank.global_features.T).argmax(-1).numpy() == np.asarray(labels)).mean())


def condition_episode(cfg: dict, ds: WindowSet, masks: dict, condition: int, k_shot: int, seed: int) -> Episode:
    in_cond = ds.conditions == condition
    return sample_episode(ds.labels, np.flatnonzero(masks["train"] & in_cond), np.flatnonzero(masks["test"] & in_cond),
                          cfg["finetune"]["n_way"], k_shot, seed)


def fewshot_trial(cfg: dict, ds: WindowSet, pretrained: dict, condition: int, k_shot: int, seed: int,
                  masks: dict | None = None) -> tuple[Metrics, DiagnosisModel, Episode, PromptBank]:
    """Fine-tune a fresh copy of a pretrained model on one episode and score its test split."""
    masks = masks or split_masks(ds, cfg["data"]["splits"])
    ep = condition_episode(cfg, ds, masks, condition, k_shot, seed)
    model = build_teacher(cfg, ep.n_way)
    model.load_state_dict(pretrained)
    bank = build_bank(cfg, ep.classes)
    finetune_fewshot(ds.images[ep.support], ep.support_labels, model, bank, finetune_config(cfg, seed))
    m = evaluate(lambda x: predict(model, bank, x), ds.images[ep.test], ep.test_labels)
    return m, model, ep, bank


def pretrained_state(cfg: dict, ds: WindowSet, seed: int, n_way: int | None = None,
                     masks: dict | None = None) -> tuple[dict, dict]:
    """Pretrain an extractor; returns the model state and silhouette/zero-shot diagnostics."""
    masks = masks or split_masks(ds, cfg["data"]["splits"])
    pool = pretrain_pool(ds, masks["pretrain"], cfg["pretrain"]["per_class"], seed)
    model = build_teacher(cfg, n_way or cfg["finetune"]["n_way"], seed)
    bank = build_bank(cfg)
    probe = np.flatnonzero(masks["test"])
    before = silhouette(global_visual_features(model.extractor, ds.images[probe]), ds.labels[probe])
    zs_before = zero_shot_accuracy(model.extractor, bank, ds.images[probe], ds.labels[probe])
    t0 = time.perf_counter()
    res = pretrain(ds.images[pool], ds.labels[pool], model.extractor, bank, align_config(cfg, seed))
    seconds = time.perf_counter() - t0
    set_trainable(model, ())
    feats = global_visual_features(model.extractor, ds.images[probe])
    info = {"silhouette_before": before, "silhouette_after": silhouette(feats, ds.labels[probe]),
            "zero_shot_before": zs_before,
            "zero_shot_after": zero_shot_accuracy(model.extractor, bank, ds.images[probe], ds.labels[probe]),
            "temperature": res.temperature, "n_samples": int(len(pool)), "steps": len(res.history),
            "train_seconds": seconds, "_result": res, "_features": feats, "_probe": probe}
    return model.state_dict(), info


# --------------------------------------------------------------------------
# resources


def _median_seconds(fn, runs: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def resource_report(teacher: DiagnosisModel, pair: DistillPair, bank: PromptBank, images, runs: int = 30,
                    teacher_trainable=FinetuneConfig().trainable, student_trainable=DistillConfig().trainable) -> dict:
    """Parameter counts per partition and median wall-clock per sample / per training step."""
    if runs < 30:
        raise ValueError("timing medians need at least 30 runs")
    images = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    one, batch = images[:1], images[:4]
    t_counts = parameter_counts(teacher)
    s_counts = parameter_counts(pair.student, student_partition)
    borrowed = t_counts["extractor"] + t_counts["fusion"] + t_counts["head"]
    report = {
        "teacher_parameters": t_counts,
        "student_parameters": s_counts,
        "teacher_total": sum(t_counts.values()),
        "student_total": sum(s_counts.values()) + borrowed,  # runs the teacher extractor, gate and head
        "teacher_trainable": sum(v for k, v in t_counts.items() if k in teacher_trainable),
        "student_trainable": sum(v for k, v in s_counts.items() if k in student_trainable),
    }
    report["total_ratio"] = report["teacher_total"] / report["student_total"]
    report["trainable_ratio"] = report["teacher_trainable"] / report["student_trainable"]

    with torch.no_grad():
        report["teacher_inference_seconds"] = _median_seconds(lambda: teacher(one, bank), runs)
        report["student_inference_seconds"] = _median_seconds(lambda: student_classify(one, bank, pair), runs)
        targets = teacher.features(batch, bank)
    labels = torch.arange(len(batch)) % bank.n_classes

    def teacher_step():
        loss = F.cross_entropy(teacher(batch, bank), labels)
        backward(loss)
        topt.step()
        topt.zero_grad()

    def student_step():
        loss = F.mse_loss(student_features(batch, bank, pair), targets)
        backward(loss)
        sopt.step()
        sopt.zero_grad()

    t_state = copy.deepcopy(teacher.state_dict())
    s_state = copy.deepcopy(pair.student.state_dict())
    set_trainable(teacher, teacher_trainable)
    topt = AdamW(teacher.parameters(), OptimizerConfig(0.0))
    set_trainable(pair.student, student_trainable, student_partition)
    sopt = AdamW(pair.student.parameters(), OptimizerConfig(0.0))
    report["teacher_step_seconds"] = _median_seconds(teacher_step, runs)
    report["student_step_seconds"] = _median_seconds(student_step, runs)
    set_trainable(teacher, ())
    set_trainable(pair.student, (), student_partition)
    teacher.load_state_dict(t_state)
    pair.student.load_state_dict(s_state)
    report["inference_speedup"] = report["teacher_inference_seconds"] / report["student_inference_seconds"]
    return report


# --------------------------------------------------------------------------
# staged pipeline


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items() if not str(k).startswith("_")}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def strip_timing(x):
    """Drop wall-clock fields (keys ending in ``_seconds`` or ``_speedup``) for reproducibility checks."""
    if isinstance(x, dict):
        return {k: strip_timing(v) for k, v in x.items() if not k.endswith(("_seconds", "speedup"))}
    if isinstance(x, list):
        return [strip_timing(v) for v in x]
    return x


class Pipeline:
    """Stages read and write artifacts under ``out_dir``; each stage records ``stages/<name>.json``."""

    def __init__(self, cfg: dict, out_dir: Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._ds: WindowSet | None = None

    # paths
    def ckpt(self, name: str) -> Path:
        return self.out / "checkpoints" / name

    def stage_path(self, name: str) -> Path:
        return self.out / "stages" / f"{name}.json"

    def _save_stage(self, name: str, data: dict) -> dict:
        p = self.stage_path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        data = _jsonable(data)
        p.write_text(json.dumps(data, indent=2, sort_keys=True))
        return data

    def _stage(self, name: str) -> dict:
        p = self.stage_path(name)
        if not p.exists():
            raise StageDependencyError(f"stage '{name}' has not been run in {self.out}")
        return json.loads(p.read_text())

    def _require(self, ckpt: str, producer: str) -> Path:
        p = self.ckpt(ckpt)
        if not (p / "manifest.json").exists():
            raise StageDependencyError(f"missing checkpoint '{ckpt}'; run the '{producer}' stage first")
        return p

    # data
    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def dataset(self) -> WindowSet:
        if self._ds is None:
            cache = self.out / "data" / "windows.npz"
            key = content_hash({"data": torch.tensor(list(json.dumps(self.cfg["data"], sort_keys=True).encode())),
                                "seed": torch.tensor([self.seed])})
            if cache.exists():
                with np.load(cache) as z:
                    if str(z["key"]) == key:
                        self._ds = WindowSet(z["images"], z["labels"], z["conditions"], z["index"])
            if self._ds is None:
                self._ds = load_dataset(self.cfg)
                cache.parent.mkdir(parents=True, exist_ok=True)
                np.savez(cache, images=self._ds.images, labels=self._ds.labels, conditions=self._ds.conditions,
                         index=self._ds.index, key=key)
        return self._ds

    def masks(self) -> dict:
        return split_masks(self.dataset(), self.cfg["data"]["splits"])

    def teacher_from(self, ckpt: str) -> tuple[DiagnosisModel, PromptBank, dict]:
        path = self._require(ckpt, "finetune")
        manifest = json.loads((path / "manifest.json").read_text())
        classes = manifest["episode"]["classes"]
        model = build_teacher(self.cfg, len(classes))
        load_checkpoint(model, path)
        set_trainable(model, ())
        return model, build_bank(self.cfg, classes), manifest

    def pair_from(self, teacher: DiagnosisModel) -> DistillPair:
        path = self._require("student", "distill")
        pair = build_pair(self.cfg, teacher)
        load_checkpoint(pair.student, path, student_partition)
        return pair

    def episode_test(self, manifest: dict, condition: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        ds, masks = self.dataset(), self.masks()
        classes = np.array(manifest["episode"]["classes"])
        cond = manifest["condition"] if condition is None else condition
        idx = np.flatnonzero(masks["test"] & (ds.conditions == cond) & np.isin(ds.labels, classes))
        return idx, np.searchsorted(classes, ds.labels[idx])

    # stages
    def gen_data(self) -> dict:
        t0 = time.perf_counter()
        ds = self.dataset()
        masks = self.masks()
        sizes = {k: int(v.sum()) for k, v in masks.items()}
        test_per_condition = {int(c): int((masks["test"] & (ds.conditions == c)).sum()) for c in np.unique(ds.conditions)}
        examples = [int(np.flatnonzero((ds.labels == c) & (ds.conditions == 0))[0]) for c in np.unique(ds.labels)]
        np.save(self.out / "data" / "example_images.npy", ds.images[examples])
        return self._save_stage("gen-data", {"n_windows": len(ds), "splits": sizes,
                                             "test_per_condition": test_per_condition,
                                             "image_shape": list(ds.images.shape[1:]),
                                             "wall_seconds": time.perf_counter() - t0})

    def pretrain(self) -> dict:
        ds, masks = self.dataset(), self.masks()
        state, info = pretrained_state(self.cfg, ds, self.seed, masks=masks)
        model = build_teacher(self.cfg, self.cfg["finetune"]["n_way"])
        model.load_state_dict(state)
        save_checkpoint(model, self.ckpt("pretrained"), self.cfg)
        info["_result"].write_csv(self.out / "pretrain_loss.csv")
        np.savez(self.out / "pretrain_features.npz", features=info["_features"], labels=ds.labels[info["_probe"]])
        return self._save_stage("pretrain", info)

    def _pretrained(self) -> dict:
        path = self._require("pretrained", "pretrain")
        model = build_teacher(self.cfg, self.cfg["finetune"]["n_way"])
        load_checkpoint(model, path)
        return model.state_dict()

    def finetune(self) -> dict:
        ds, f = self.dataset(), self.cfg["finetune"]
        state = self._pretrained()
        masks = self.masks()
        ep = condition_episode(self.cfg, ds, masks, f["condition"], f["k_shot"], self.seed)
        model = build_teacher(self.cfg, ep.n_way)
        model.load_state_dict(state)
        bank = build_bank(self.cfg, ep.classes)
        before = partition_hashes(model)
        t0 = time.perf_counter()
        tl = finetune_fewshot(ds.images[ep.support], ep.support_labels, model, bank, finetune_config(self.cfg, self.seed))
        seconds = time.perf_counter() - t0
        after = partition_hashes(model)
        m = evaluate(lambda x: predict(model, bank, x), ds.images[ep.test], ep.test_labels)
        extra = {"episode": ep.describe(), "condition": f["condition"], "bank_hash": bank.hash()}
        save_checkpoint(model, self.ckpt("teacher"), self.cfg, extra=extra)
        write_csv(self.out / "finetune_loss.csv", [{"step": i + 1, "loss": v} for i, v in enumerate(tl.losses)])
        return self._save_stage("finetune", {
            **extra, "metrics": m.as_dict(), "epoch_losses": tl.epoch_losses, "train_seconds": seconds,
            "frozen_base_unchanged": before["frozen_base"] == after["frozen_base"],
            "changed_partitions": sorted(k for k in before if before[k] != after[k])})

    def distill(self) -> dict:
        ds, d = self.dataset(), self.cfg["distill"]
        teacher, bank, manifest = self.teacher_from("teacher")
        masks = self.masks()
        classes = np.array(manifest["episode"]["classes"])
        cond = manifest["condition"]
        gen = rng(self.seed, 1313)
        in_task = (ds.conditions == cond) & np.isin(ds.labels, classes)
        support = set(manifest["episode"]["support"])
        pool = np.array([i for i in np.flatnonzero(masks["train"] & in_task) if i not in support])
        unlabeled = np.sort(gen.choice(pool, min(d["n_samples"], len(pool)), replace=False))
        probe = np.sort(gen.choice(np.flatnonzero(masks["val"] & in_task), d["probe"], replace=False))
        pair = build_pair(self.cfg, teacher)
        t_before = partition_hashes(teacher)
        t0 = time.perf_counter()
        dl = distill_train(pair, ds.images[unlabeled], bank,
                           DistillConfig(d["epochs"], d["learning_rate"], 0.0, d["batch_size"], self.seed),
                           probe=ds.images[probe])
        seconds = time.perf_counter() - t0
        test, test_y = self.episode_test(manifest)
        tm = evaluate(lambda x: predict(teacher, bank, x), ds.images[test], test_y)
        sm = evaluate(lambda x: student_predict(pair, bank, x), ds.images[test], test_y)
        head_hash = content_hash(dict(teacher.head.named_parameters()))
        save_checkpoint(pair.student, self.ckpt("student"), self.cfg, student_partition,
                        extra={"teacher_head_hash": head_hash})
        write_csv(self.out / "distill_loss.csv",
                  [{"epoch": i, "probe_mse": v} for i, v in enumerate(dl.probe)])
        return self._save_stage("distill", {
            "teacher": tm.as_dict(), "student": sm.as_dict(), "probe_mse": dl.probe,
            "probe_reduction": dl.probe[0] / dl.probe[-1], "n_unlabeled": int(len(unlabeled)),
            "teacher_unchanged": partition_hashes(teacher) == t_before, "teacher_head_hash": head_hash,
            "train_seconds": seconds, "warnings": dl.warnings})

    def online_update(self) -> dict:
        ds, o = self.dataset(), self.cfg["online"]
        teacher, bank, manifest = self.teacher_from("teacher")
        pair = self.pair_from(teacher)
        masks = self.masks()
        classes = np.array(manifest["episode"]["classes"])
        in_task = (ds.conditions == manifest["condition"]) & np.isin(ds.labels, classes)
        gen = rng(self.seed, 1414)
        support = set(manifest["episode"]["support"])
        probe_pool = np.array([i for i in np.flatnonzero(masks["train"] & in_task) if i not in support])
        probe = np.sort(gen.choice(probe_pool, min(o["probe"], len(probe_pool)), replace=False))
        pool = np.flatnonzero(masks["val"] & in_task)
        local = lambda idx: np.searchsorted(classes, ds.labels[idx])  # noqa: E731
        test, test_y = self.episode_test(manifest)

        quantize_head_(teacher.head)
        node = EdgeNode(pair, bank)
        cloud = CloudEndpoint(teacher, bank)
        non_head = {k: v for k, v in partition_hashes(teacher).items() if k != "head"}
        cfg = EdgeConfig(o["epochs"], o["learning_rate"], 0.0, o["batch_size"], self.seed)
        args = dict(test=(ds.images[test], test_y), pool=(ds.images[pool], local(pool)), n_cycles=o["cycles"],
                    per_class=o["per_class"], config=cfg, probe=(ds.images[probe], local(probe)), seed=self.seed)
        t0 = time.perf_counter()
        if o["transport"] == "socket":
            with CloudServer(cloud) as server, CloudClient(server.server_address) as client:
                reports = run_update_cycles(node, cloud, upload=client.upload, **args)
        else:
            reports = run_update_cycles(node, cloud, **args)
        seconds = time.perf_counter() - t0
        save_checkpoint(teacher, self.ckpt("online"), self.cfg, extra={"episode": manifest["episode"],
                                                                        "condition": manifest["condition"],
                                                                        "version": cloud.version})
        (self.ckpt("online") / "head.sdhw").write_bytes(serialize_head(HeadWeights.from_linear(teacher.head,
                                                                                              cloud.version)))
        rows = [r.row() for r in reports]
        write_csv(self.out / "online_update.csv", rows)
        t_acc = [r["teacher_accuracy"] for r in rows]
        return self._save_stage("online-update", {
            "cycles": rows, "final_version": cloud.version, "accepted_versions": cloud.accepted,
            "teacher_initial": t_acc[0], "teacher_final": t_acc[-1],
            "max_gap": max(abs(r["student_accuracy"] - r["teacher_accuracy"]) for r in rows),
            "max_drop": max([0.0] + [a - b for a, b in zip(t_acc, t_acc[1:])]),
            "non_head_unchanged": non_head == {k: v for k, v in partition_hashes(teacher).items() if k != "head"},
            "cloud_head_matches_edge": cloud.head_bytes() == HeadWeights.from_linear(node.head, 0).payload(),
            "transport": o["transport"], "wall_seconds": seconds})

    def eval(self) -> dict:
        ds, e = self.dataset(), self.cfg["eval"]
        out = {}
        teacher, bank, manifest = self.teacher_from("teacher")
        test, test_y = self.episode_test(manifest)
        out["teacher"] = evaluate(lambda x: predict(teacher, bank, x), ds.images[test], test_y).as_dict()
        if (self.ckpt("student") / "manifest.json").exists():
            pair = self.pair_from(teacher)
            out["student"] = evaluate(lambda x: student_predict(pair, bank, x), ds.images[test], test_y).as_dict()
        if (self.ckpt("online") / "manifest.json").exists():
            online = build_teacher(self.cfg, len(manifest["episode"]["classes"]))
            load_checkpoint(online, self.ckpt("online"))
            out["teacher_online"] = evaluate(lambda x: predict(online, bank, x), ds.images[test], test_y).as_dict()
        # few-shot sweep: condition x shot x metric, each from the pretrained checkpoint
        if e["shots"]:
            state, masks = self._pretrained(), self.masks()
            rows = []
            for cond in e["conditions"]:
                for k in e["shots"]:
                    for s in e["seeds"]:
                        m, *_ = fewshot_trial(self.cfg, ds, state, cond, k, s, masks)
                        rows.append({"condition": cond, "shot": k, "seed": s, "accuracy": m.accuracy,
                                     "precision": m.precision, "f1": m.f1})
            write_csv(self.out / "fewshot_runs.csv", rows)
            table = fewshot_table(rows)
            write_csv(self.out / "fewshot_table.csv", table)
            out["fewshot"] = table
        return self._save_stage("eval", out)

    def cross_eval(self) -> dict:
        ds = self.dataset()
        state, masks = self._pretrained(), self.masks()
        conds = sorted(np.unique(ds.conditions).tolist())
        rows = []
        for src in conds:
            m, model, ep, bank = fewshot_trial(self.cfg, ds, state, src, self.cfg["cross"]["k_shot"], self.seed, masks)
            for tgt in conds:
                tm, in_domain = cross_condition_eval(model, bank, ds, masks["test"], ep.classes, src, tgt)
                rows.append({"source": src, "target": tgt, "in_domain": in_domain, "accuracy": tm.accuracy,
                             "precision": tm.precision, "f1": tm.f1})
        write_csv(self.out / "cross_condition.csv", rows)
        cross = [r["accuracy"] for r in rows if not r["in_domain"]]
        ind = [r["accuracy"] for r in rows if r["in_domain"]]
        return self._save_stage("cross-eval", {"pairs": rows, "n_cross_pairs": len(cross),
                                               "mean_cross_accuracy": float(np.mean(cross)) if cross else None,
                                               "mean_in_domain_accuracy": float(np.mean(ind))})

    def resources(self) -> dict:
        ds = self.dataset()
        try:
            teacher, bank, _ = self.teacher_from("teacher")
        except StageDependencyError:
            teacher = build_teacher(self.cfg, self.cfg["finetune"]["n_way"])
            bank = build_bank(self.cfg, np.arange(self.cfg["finetune"]["n_way"]))
        try:
            pair = self.pair_from(teacher)
        except StageDependencyError:
            pair = build_pair(self.cfg, teacher)
        rep = resource_report(teacher, pair, bank, ds.images[:4], self.cfg["resources"]["runs"])
        rows = [{"model": who, "partition": k, "parameters": v}
                for who, counts in (("teacher", rep["teacher_parameters"]), ("student", rep["student_parameters"]))
                for k, v in counts.items()]
        write_csv(self.out / "resources.csv", rows + [
            {"model": "teacher", "partition": "total", "parameters": rep["teacher_total"]},
            {"model": "student", "partition": "total_deployed", "parameters": rep["student_total"]}])
        return self._save_stage("resources", rep)

    def report(self) -> dict:
        stages = {}
        for name in STAGES[:-1]:
            p = self.stage_path(name)
            if p.exists():
                stages[name] = json.loads(p.read_text())
        if not stages:
            raise StageDependencyError(f"no stage results under {self.out}")
        report = {"config": self.cfg, "stages": stages}
        (self.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        figures = plotting.render_all(self.out, stages)
        return {"report": str(self.out / "report.json"), "figures": [str(f) for f in figures]}

    def run(self, stage: str) -> dict:
        method = {"gen-data": self.gen_data, "pretrain": self.pretrain, "finetune": self.finetune,
                  "distill": self.distill, "online-update": self.online_update, "eval": self.eval,
                  "cross-eval": self.cross_eval, "resources": self.resources, "report": self.report}
        if stage not in method:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s", stage)
        return method[stage]()


def fewshot_table(rows: list[dict]) -> list[dict]:
    """Mean metrics per (condition, shot) over seeds."""
    keys = sorted({(r["condition"], r["shot"]) for r in rows})
    table = []
    for cond, k in keys:
        sel = [r for r in rows if r["condition"] == cond and r["shot"] == k]
        table.append({"condition": cond, "shot": k, **{m: float(np.mean([r[m] for r in sel]))
                                                        for m in ("accuracy", "precision", "f1")}})
    return table


def run_pipeline(config_path: Path | None, out_dir: Path, preset: str | None = None, seed: int | None = None,
                 stages=None) -> dict:
    """Run the configured stages in order and return the per-stage results."""
    cfg = load_config(config_path, preset, seed)
    pipe = Pipeline(cfg, out_dir)
    return {s: pipe.run(s) for s in (stages or cfg["stages"])}


def cross_condition_eval(model: DiagnosisModel, bank: PromptBank, ds: WindowSet, test_mask: np.ndarray,
                         classes, source: int, target: int) -> tuple[Metrics, bool]:
    """Score a model fine-tuned on ``source`` against ``target``'s test split; flag in-domain pairs."""
    classes = np.asarray(classes)
    idx = np.flatnonzero(test_mask & (ds.conditions == target) & np.isin(ds.labels, classes))
    m = compute_metrics(np.searchsorted(classes, ds.labels[idx]), predict(model, bank, ds.images[idx]))
    return m, source == target
