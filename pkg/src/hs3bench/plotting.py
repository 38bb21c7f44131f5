"""Static figures: label-map renders, side-by-side comparisons, report bar charts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import IGNORE, LabelMap, as_values  # noqa: E402

plt.rcParams["figure.autolayout"] = True
plt.rcParams["font.size"] = 9.0
plt.rcParams["savefig.dpi"] = 120

# deterministic PNG bytes
_SAVE_KW = {"metadata": {"Software": None}}


def palette(num_classes: int) -> np.ndarray:
    """RGB colors in [0, 1] for each class; IGNORE renders black."""
    cmap = plt.get_cmap("tab20" if num_classes > 10 else "tab10")
    return np.array([cmap(i % cmap.N)[:3] for i in range(num_classes)])


def colorize(labels, num_classes: int) -> np.ndarray:
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    pal = palette(num_classes)
    out = np.zeros(lab.shape + (3,))
    valid = lab != IGNORE
    out[valid] = pal[np.clip(lab[valid], 0, num_classes - 1)]
    return out


def render_label_map(labels, num_classes: int, path, class_names=None) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(colorize(labels, num_classes), interpolation="nearest")
    ax.set_axis_off()
    if class_names:
        _legend(ax, class_names)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def _legend(ax, class_names):
    from matplotlib.patches import Patch

    pal = palette(len(class_names))
    handles = [Patch(color=pal[i], label=n) for i, n in enumerate(class_names)]
    ax.legend(handles=handles, loc="center left", bbox_to_anchor=(1.0, 0.5), fontsize="small",
              frameon=False)


def _display_image(cube) -> np.ndarray:
    v = as_values(cube).astype(np.float64)
    if v.shape[-1] >= 3:
        v = v[..., :3]
    else:
        v = np.repeat(v[..., :1], 3, axis=-1)
    lo, hi = np.nanmin(v), np.nanmax(v)
    return np.clip((v - lo) / (hi - lo), 0, 1) if hi > lo else np.zeros_like(v)


def render_side_by_side(truth, pred, num_classes: int, path, image=None, class_names=None,
                        title: str = "") -> Path:
    """Ground truth next to prediction, optionally preceded by an input image."""
    panels = [("ground truth", colorize(truth, num_classes)), ("prediction", colorize(pred, num_classes))]
    if image is not None:
        panels.insert(0, ("input", _display_image(image)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2))
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(name)
        ax.set_axis_off()
    if class_names:
        _legend(axes[-1], class_names)
    if title:
        fig.suptitle(title)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def plot_report_jaccard(report, path) -> Path:
    """Grouped bars of macro Jaccard per dataset and approach, plus the average."""
    from .benchmark import AVERAGE

    groups = list(report.datasets) + [AVERAGE]
    approaches = list(report.approaches)
    width = 0.8 / max(1, len(approaches))
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(groups), 3.4))
    for i, (name, data) in enumerate(approaches):
        vals = []
        for g in groups:
            if g == AVERAGE:
                v = report.summary(name, data, "jaccard_macro", AVERAGE)
            else:
                c = report.cell(g, name, data)
                v = c.scores["jaccard_macro"] if c is not None and c.status == "ok" else None
            vals.append(np.nan if v is None else 100.0 * v)
        ax.bar(x + (i - (len(approaches) - 1) / 2) * width, vals, width, label=f"{name} {data}")
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel("J_M (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize="small", frameon=False, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)
