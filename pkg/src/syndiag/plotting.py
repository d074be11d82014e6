"""Report figures. Everything renders off-screen to PNG."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    cols = {}
    for k in rows[0]:
        vals = [r[k] for r in rows]
        try:
            cols[k] = np.array(vals, dtype=float)
        except ValueError:
            cols[k] = np.array(vals)
    return cols


def _save(fig, path: Path) -> Path:
    fig.savefig(path)
    plt.close(fig)
    return path


def spectrograms(images: np.ndarray, path: Path, names=None) -> Path:
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9))
    for i, ax in enumerate(np.atleast_1d(axes)):
        ax.imshow(images[i][..., 0], aspect="auto", origin="upper", cmap="magma", vmin=0, vmax=1)
        ax.set_title(names[i] if names else f"class {i}")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
    axes = np.atleast_1d(axes)
    axes[0].set_ylabel("scale")
    return _save(fig, path)


def pretrain_curves(cols: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(cols["step"], cols["loss"], lw=0.6, color="0.55", label="batch loss")
    k = max(1, len(cols["loss"]) // 50)
    smooth = np.convolve(cols["loss"], np.ones(k) / k, mode="valid")
    ax.plot(cols["step"][k - 1 :], smooth, color="C0", label=f"running mean ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("alignment loss")
    twin = ax.twinx()
    twin.plot(cols["step"], cols["margin"], color="C3", lw=1, ls="--")
    twin.set_ylabel("margin", color="C3")
    twin.grid(False)
    ax.legend(loc="upper right")
    return _save(fig, path)


def _pca2(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


def feature_scatter(features: np.ndarray, labels: np.ndarray, path: Path, title: str = "") -> Path:
    z = _pca2(features)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    for c in np.unique(labels):
        sel = labels == c
        ax.scatter(z[sel, 0], z[sel, 1], s=6, alpha=0.7, label=str(c))
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(title="class", markerscale=2, ncols=2)
    return _save(fig, path)


def loss_curve(x, y, path: Path, xlabel: str, ylabel: str, log: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(x, y, marker="o" if len(x) < 60 else None, ms=3)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def online_update(cols: dict, path: Path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 2.8))
    a.plot(cols["cycle"], cols["teacher_accuracy"], marker="o", ms=3, label="cloud teacher")
    a.plot(cols["cycle"], cols["student_accuracy"], marker="s", ms=3, label="edge student", ls="--")
    a.set_xlabel("update cycle")
    a.set_ylabel("test accuracy")
    a.legend()
    b.plot(cols["cycle"], cols["grad_cosine"], marker="o", ms=3, label="cosine")
    b.plot(cols["cycle"], cols["grad_magnitude_ratio"], marker="^", ms=3, label="|g_S| / |g_T|")
    b.set_xlabel("update cycle")
    b.set_ylabel("head-gradient agreement")
    b.legend()
    return _save(fig, path)


def fewshot(table: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for cond in sorted({r["condition"] for r in table}):
        rows = sorted((r for r in table if r["condition"] == cond), key=lambda r: r["shot"])
        ax.plot([r["shot"] for r in rows], [r["accuracy"] for r in rows], marker="o", ms=3, label=f"condition {cond}")
    ax.set_xlabel("shots per class")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(top=1.01)
    ax.legend()
    return _save(fig, path)


def cross_condition(pairs: list[dict], path: Path) -> Path:
    conds = sorted({p["source"] for p in pairs} | {p["target"] for p in pairs})
    M = np.full((len(conds), len(conds)), np.nan)
    for p in pairs:
        M[conds.index(p["source"]), conds.index(p["target"])] = p["accuracy"]
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(M, vmin=0, vmax=1, cmap="viridis")
    for i in range(len(conds)):
        for j in range(len(conds)):
            ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", color="w" if M[i, j] < 0.6 else "k", fontsize=8)
    ax.set_xticks(range(len(conds)), conds)
    ax.set_yticks(range(len(conds)), conds)
    ax.set_xlabel("target condition")
    ax.set_ylabel("source condition")
    ax.grid(False)
    fig.colorbar(im, ax=ax, label="accuracy")
    return _save(fig, path)


def resources(rep: dict, path: Path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(7, 2.8))
    names = ["total", "trainable"]
    t = [rep["teacher_total"], rep["teacher_trainable"]]
    s = [rep["student_total"], rep["student_trainable"]]
    x = np.arange(2)
    a.bar(x - 0.2, t, 0.4, label="teacher")
    a.bar(x + 0.2, s, 0.4, label="student")
    a.set_xticks(x, names)
    a.set_yscale("log")
    a.set_ylabel("parameters")
    a.legend()
    ms = [1e3 * rep[f"{w}_inference_seconds"] for w in ("teacher", "student")]
    st = [1e3 * rep[f"{w}_step_seconds"] for w in ("teacher", "student")]
    b.bar(x - 0.2, ms, 0.4, label="inference / sample")
    b.bar(x + 0.2, st, 0.4, label="training step")
    b.set_xticks(x, ["teacher", "student"])
    b.set_ylabel("median ms")
    b.legend()
    return _save(fig, path)


def render_all(out: Path, stages: dict) -> list[Path]:
    """Draw every figure whose inputs exist under ``out``; returns the written paths."""
    out = Path(out)
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        ex = out / "data" / "example_images.npy"
        if ex.exists():
            written.append(spectrograms(np.load(ex), figs / "spectrograms.png"))
        if (out / "pretrain_loss.csv").exists():
            written.append(pretrain_curves(_read_csv(out / "pretrain_loss.csv"), figs / "pretrain_loss.png"))
        if (out / "pretrain_features.npz").exists():
            with np.load(out / "pretrain_features.npz") as z:
                sil = stages.get("pretrain", {}).get("silhouette_after")
                title = f"aligned features (silhouette {sil:.2f})" if sil is not None else ""
                written.append(feature_scatter(z["features"], z["labels"], figs / "pretrain_features.png", title))
        if (out / "finetune_loss.csv").exists():
            c = _read_csv(out / "finetune_loss.csv")
            written.append(loss_curve(c["step"], c["loss"], figs / "finetune_loss.png", "step", "cross-entropy"))
        if (out / "distill_loss.csv").exists():
            c = _read_csv(out / "distill_loss.csv")
            written.append(loss_curve(c["epoch"], c["probe_mse"], figs / "distill_loss.png", "epoch",
                                      "probe feature MSE", log=True))
        if (out / "online_update.csv").exists():
            written.append(online_update(_read_csv(out / "online_update.csv"), figs / "online_update.png"))
        if stages.get("eval", {}).get("fewshot"):
            written.append(fewshot(stages["eval"]["fewshot"], figs / "fewshot.png"))
        if "cross-eval" in stages:
            written.append(cross_condition(stages["cross-eval"]["pairs"], figs / "cross_condition.png"))
        if "resources" in stages:
            written.append(resources(stages["resources"], figs / "resources.png"))
    return written
