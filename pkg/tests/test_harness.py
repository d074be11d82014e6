import json

import numpy as np
import pytest

import shared
from syndiag import harness
from syndiag.harness import (
    PRESETS,
    STAGES,
    Pipeline,
    StageDependencyError,
    cross_condition_eval,
    fewshot_table,
    load_config,
    resource_report,
    run_pipeline,
    sample_episode,
    split_masks,
    strip_timing,
)
from syndiag.backbone import predict
from syndiag.metrics import compute_metrics
from syndiag.signals import synthetic_dataset


def _episode_inputs(n_classes=5, per_class=10):
    labels = np.repeat(np.arange(n_classes), per_class)
    idx = np.arange(len(labels))
    return labels, idx[idx % per_class < per_class // 2], idx[idx % per_class >= per_class // 2]


def test_episode_sizes_and_determinism():
    labels, cand, test = _episode_inputs()
    ep = sample_episode(labels, cand, test, 5, 3, seed=4)
    assert len(ep.support) == 15
    assert np.bincount(ep.support_labels).tolist() == [3] * 5
    again = sample_episode(labels, cand, test, 5, 3, seed=4)
    assert np.array_equal(ep.support, again.support) and np.array_equal(ep.test, again.test)
    assert not np.array_equal(ep.support, sample_episode(labels, cand, test, 5, 3, seed=5).support)
    assert not np.intersect1d(ep.support, ep.test).size
    assert np.array_equal(ep.classes[ep.support_labels], labels[ep.support])


def test_nineteen_way_covers_all_classes():
    labels, cand, test = _episode_inputs(19, 6)
    ep = sample_episode(labels, cand, test, 19, 1, seed=0)
    assert ep.classes.tolist() == list(range(19))
    assert set(labels[ep.test]) == set(range(19))


def test_subset_of_classes_filters_test():
    labels, cand, test = _episode_inputs(8)
    ep = sample_episode(labels, cand, test, 5, 2, seed=1)
    assert len(ep.classes) == 5 and set(labels[ep.test]) == set(ep.classes)
    assert ep.test_labels.max() == 4


def test_episode_errors():
    labels, cand, test = _episode_inputs()
    with pytest.raises(ValueError, match="candidates"):
        sample_episode(labels, cand, test, 5, 6, seed=0)
    with pytest.raises(ValueError):
        sample_episode(labels, cand, test, 6, 1, seed=0)
    with pytest.raises(ValueError, match="overlap"):
        sample_episode(labels, cand, cand, 5, 5, seed=0)


def test_split_masks_partition_each_recording_in_time_order():
    ds = synthetic_dataset(n_classes=2, n_conditions=2, n_windows=20, image_size=16, n_scales=16)
    masks = split_masks(ds, {"pretrain": 0.2, "train": 0.3, "val": 0.3, "test": 0.2})
    total = sum(m.astype(int) for m in masks.values())
    assert np.all(total == 1)
    sel = (ds.labels == 1) & (ds.conditions == 0)
    assert ds.index[masks["pretrain"] & sel].max() < ds.index[masks["train"] & sel].min()
    assert ds.index[masks["val"] & sel].max() < ds.index[masks["test"] & sel].min()
    assert int((masks["test"] & sel).sum()) == 4
    with pytest.raises(ValueError):
        split_masks(ds, {"a": 0.5, "b": 0.6})


def test_toy_test_set_is_200_per_condition():
    cfg = load_config()
    d = cfg["data"]
    assert d["n_classes"] * d["n_windows"] * d["splits"]["test"] == 200


def test_presets_carry_training_defaults():
    assert set(PRESETS) == {"toy", "cwru", "seu"}
    cwru = load_config(preset="cwru")
    assert cwru["data"]["n_classes"] == 19 and cwru["finetune"]["n_way"] == 19
    assert cwru["pretrain"]["epochs"] == 600 and cwru["pretrain"]["learning_rate"] == 1e-2
    assert load_config(preset="seu")["pretrain"]["epochs"] == 1000
    for name in PRESETS:
        cfg = load_config(preset=name)
        f = cfg["finetune"]
        assert (f["epochs"], f["learning_rate"], f["weight_decay"], f["batch_size"]) == (20, 3e-4, 0.01, 4)
        assert (cfg["distill"]["epochs"], cfg["distill"]["learning_rate"], cfg["distill"]["batch_size"]) == (40, 3e-4, 4)
        o = cfg["online"]
        assert (o["per_class"], o["epochs"], o["learning_rate"], o["batch_size"]) == (3, 10, 1e-4, 16)
        assert cfg["model"]["teacher"]["lora_rank"] == 16 and cfg["model"]["teacher"]["lora_alpha"] == 32
    assert load_config(preset="cwru")["online"]["cycles"] == 30


def test_config_overrides_and_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"finetune": {"k_shot": 1}, "seed": 3}))
    cfg = load_config(p, seed=9)
    assert cfg["finetune"]["k_shot"] == 1 and cfg["finetune"]["epochs"] == 20 and cfg["seed"] == 9
    for bad in ({"bogus": 1}, {"stages": ["train"]}, [1, 2]):
        p.write_text(json.dumps(bad))
        with pytest.raises(ValueError):
            load_config(p)
    with pytest.raises(ValueError):
        load_config(preset="imagenet")


def test_fewshot_table_means():
    rows = [{"condition": 0, "shot": 1, "seed": s, "accuracy": a, "precision": a, "f1": a}
            for s, a in enumerate((0.5, 0.7))]
    assert fewshot_table(rows) == [{"condition": 0, "shot": 1, "accuracy": 0.6, "precision": 0.6, "f1": 0.6}]


def test_strip_timing():
    x = {"a": 1, "train_seconds": 2.0, "inference_speedup": 1.5, "b": [{"wall_seconds": 1, "c": 2}]}
    assert strip_timing(x) == {"a": 1, "b": [{"c": 2}]}


def _mini_config(tmp_path, **extra):
    p = tmp_path / "mini.json"
    p.write_text(json.dumps({**shared.MINI, **extra}))
    return p


def test_later_stage_without_checkpoint_is_a_dependency_error(tmp_path):
    pipe = Pipeline(load_config(_mini_config(tmp_path)), tmp_path / "out")
    for stage in ("finetune", "distill", "online-update", "eval", "cross-eval", "report"):
        with pytest.raises(StageDependencyError):
            pipe.run(stage)
    with pytest.raises(ValueError):
        pipe.run("train")


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    cfg = _mini_config(root)
    results = run_pipeline(cfg, root / "a")
    return root, cfg, results


def test_mini_pipeline_writes_every_artifact(mini_run):
    root, _, results = mini_run
    out = root / "a"
    assert list(results) == list(STAGES)
    for name in ("report.json", "pretrain_loss.csv", "finetune_loss.csv", "distill_loss.csv", "online_update.csv",
                 "fewshot_runs.csv", "fewshot_table.csv", "cross_condition.csv", "resources.csv"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert set(report["stages"]) == set(STAGES[:-1])
    assert report["stages"]["finetune"]["frozen_base_unchanged"]
    assert report["stages"]["distill"]["teacher_unchanged"]
    assert report["stages"]["online-update"]["non_head_unchanged"]
    assert report["stages"]["online-update"]["cloud_head_matches_edge"]
    assert report["stages"]["cross-eval"]["n_cross_pairs"] == 2
    assert all(f.endswith(".png") for f in results["report"]["figures"]) and results["report"]["figures"]


def test_mini_pipeline_is_reproducible(mini_run):
    root, cfg, _ = mini_run
    run_pipeline(cfg, root / "b")
    a = json.loads((root / "a" / "report.json").read_text())
    b = json.loads((root / "b" / "report.json").read_text())
    assert strip_timing(a) == strip_timing(b)
    for name in ("online_update.csv", "fewshot_table.csv", "cross_condition.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_eval_only_with_existing_checkpoint(mini_run):
    root, cfg, _ = mini_run
    pipe = Pipeline(load_config(cfg), root / "a")
    res = pipe.run("eval")
    assert 0 <= res["teacher"]["accuracy"] <= 1 and "student" in res and "teacher_online" in res


def test_socket_transport_stage(mini_run, tmp_path):
    root, _, _ = mini_run
    cfg = load_config(_mini_config(tmp_path, online={"cycles": 2, "probe": 4, "transport": "socket"}))
    pipe = Pipeline(cfg, tmp_path / "s")
    for s in ("gen-data", "pretrain", "finetune", "distill", "online-update"):
        pipe.run(s)
    sock = json.loads(pipe.stage_path("online-update").read_text())
    inproc = json.loads((root / "a" / "stages" / "online-update.json").read_text())
    assert sock["transport"] == "socket" and sock["accepted_versions"] == [1, 2]
    assert strip_timing(sock["cycles"]) == strip_timing(inproc["cycles"])


def test_cross_condition_pairs_and_identity(tmp_path):
    cfg = load_config(_mini_config(tmp_path))
    ds = harness.load_dataset(cfg)
    masks = split_masks(ds, cfg["data"]["splits"])
    state, _ = harness.pretrained_state(cfg, ds, 0, masks=masks)
    m, model, ep, bank = harness.fewshot_trial(cfg, ds, state, 0, 3, 0, masks)
    same, in_domain = cross_condition_eval(model, bank, ds, masks["test"], ep.classes, 0, 0)
    assert in_domain
    assert (same.accuracy, same.precision, same.f1) == (m.accuracy, m.precision, m.f1)
    other, flag = cross_condition_eval(model, bank, ds, masks["test"], ep.classes, 0, 1)
    assert not flag
    idx = np.flatnonzero(masks["test"] & (ds.conditions == 1))
    ref = compute_metrics(ds.labels[idx], predict(model, bank, ds.images[idx]))
    assert other.accuracy == ref.accuracy


def test_resource_report_counts_and_validation(tmp_path):
    cfg = load_config(_mini_config(tmp_path))
    teacher = harness.build_teacher(cfg, 5)
    pair = harness.build_pair(cfg, teacher)
    bank = harness.build_bank(cfg)
    images = np.random.default_rng(0).random((4, 32, 32, 3))
    rep = resource_report(teacher, pair, bank, images)
    assert rep["teacher_total"] == sum(rep["teacher_parameters"].values())
    assert rep["trainable_ratio"] == rep["teacher_trainable"] / rep["student_trainable"]
    assert rep["teacher_inference_seconds"] > 0 and rep["student_step_seconds"] > 0
    again = resource_report(teacher, pair, bank, images)
    assert strip_timing(again) == strip_timing(rep)
    with pytest.raises(ValueError):
        resource_report(teacher, pair, bank, images, runs=10)
