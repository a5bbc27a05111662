"""Report figures.

Every function takes already-computed arrays, writes one PNG and returns its
path; nothing here touches the model. The Agg backend is forced so the CLI
works headless.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

RC = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def figure_size(width=6.5, rows=1, cols=1, aspect=None):
    aspect = GOLDEN if aspect is None else aspect
    return width, width * aspect * rows / cols


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _heatmap(ax, mat, title, cmap="viridis", vmin=None, vmax=None):
    im = ax.imshow(mat, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("ROI")
    ax.set_ylabel("ROI")
    plt.colorbar(im, ax=ax, fraction=0.046, pad=0.04)


def plot_masks(mean_mask, std_mask, class_names, path):
    """Group mean and STD of the attention masks, one column per group."""
    groups = sorted(mean_mask)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, len(groups), figsize=figure_size(3.2 * len(groups), 2, len(groups), 0.9),
                                 squeeze=False)
        for col, g in enumerate(groups):
            _heatmap(axes[0, col], mean_mask[g], f"{class_names[g]}: mean mask", vmin=0, vmax=1)
            _heatmap(axes[1, col], std_mask[g], f"{class_names[g]}: mask STD", cmap="magma", vmin=0)
        fig.tight_layout()
        return _save(fig, path)


def plot_degree_centrality(dc_by_group, pvalues, class_names, path, alpha=0.05):
    groups = sorted(dc_by_group)
    r = len(next(iter(dc_by_group.values())))
    x = np.arange(r)
    width = 0.8 / len(groups)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figure_size(6.5))
        for k, g in enumerate(groups):
            ax.bar(x + k * width, dc_by_group[g], width, label=class_names[g])
        top = max(float(np.max(v)) for v in dc_by_group.values())
        for i in np.flatnonzero(np.nan_to_num(pvalues, nan=1.0) < alpha):
            ax.text(i + 0.4 * width * (len(groups) - 1), top * 1.02, "*", ha="center")
        ax.set_xlabel("ROI")
        ax.set_ylabel("degree centrality")
        ax.set_xticks(x + 0.4 * width * (len(groups) - 1))
        ax.set_xticklabels([str(i) for i in x])
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_diff_maps(maps, path):
    """``maps``: ordered mapping of title -> R x R matrix, shared symmetric colour scale."""
    items = [(t, m) for t, m in maps.items() if m is not None]
    if not items:
        return None
    vmax = max(float(np.max(np.abs(m))) for _, m in items) or 1.0
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(items), figsize=figure_size(3.2 * len(items), 1, len(items), 0.9),
                                 squeeze=False)
        for ax, (title, m) in zip(axes[0], items):
            _heatmap(ax, m, title, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        fig.tight_layout()
        return _save(fig, path)


def plot_subtypes(cluster_means, scores_by_cluster, path):
    ks = sorted(cluster_means)
    vmax = max(float(np.max(np.abs(cluster_means[k]))) for k in ks) or 1.0
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(ks) + 1, figsize=figure_size(3.0 * (len(ks) + 1), 1, len(ks) + 1, 0.9),
                                 squeeze=False)
        for ax, k in zip(axes[0], ks):
            _heatmap(ax, cluster_means[k], f"subtype {k}: mean diff", cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax = axes[0, -1]
        data = [scores_by_cluster.get(k, []) for k in ks]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(ks) + 1))
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_xlabel("subtype")
        ax.set_ylabel("clinical score")
        fig.tight_layout()
        return _save(fig, path)


def plot_training_log(logs, path):
    epochs = np.array([rec.epoch for rec in logs])
    step = np.array([rec.step for rec in logs])
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figure_size(6.5, 1, 2, 0.8))
        for name in ("loss_recon", "loss_class", "loss_reg"):
            vals = np.array([getattr(rec, name) for rec in logs])
            s1 = step == 1
            ax1.plot(epochs[s1], vals[s1], marker=".", label=f"{name} (step 1)")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [rec.val.auc for rec in logs], label="val AUC")
        ax2.plot(epochs, [rec.val.acc for rec in logs], label="val ACC")
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0, 1.02)
        ax2.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_roc(prob_patient, labels, path):
    scores = np.asarray(prob_patient, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(labels[order] == 1)
    fp = np.cumsum(labels[order] == 0)
    tpr = np.concatenate([[0.0], tp / max(tp[-1], 1)]) if tp.size else np.array([0.0])
    fpr = np.concatenate([[0.0], fp / max(fp[-1], 1)]) if fp.size else np.array([0.0])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figure_size(3.2, aspect=1.0))
        ax.plot(fpr, tpr)
        ax.plot([0, 1], [0, 1], ls=":", color="grey")
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        return _save(fig, path)
