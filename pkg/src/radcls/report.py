"""Figure rendering for evaluation and training outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ConfusionMatrix  # noqa: E402


def save_roc_svg(roc_points, path, auroc: float | None = None) -> None:
    """Plot an ROC curve from (fpr, tpr) pairs to an SVG file."""
    fpr = [p[0] for p in roc_points]
    tpr = [p[1] for p in roc_points]
    fig, ax = plt.subplots(figsize=(5, 5))
    label = "ROC" if auroc is None else f"ROC (AUROC = {auroc:.3f})"
    ax.plot(fpr, tpr, color="tab:blue", lw=2, label=label)
    ax.plot([0, 1], [0, 1], color="gray", lw=1, ls="--", label="chance")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    ax.set_title("Pooled ROC")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def save_confusion_png(cm: ConfusionMatrix, path) -> None:
    """Render the 2x2 confusion matrix with counts annotated."""
    grid = [[cm.tp, cm.fn], [cm.fp, cm.tn]]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(grid, cmap="Blues")
    peak = max(max(row) for row in grid) or 1
    for i in range(2):
        for j in range(2):
            color = "white" if grid[i][j] > 0.5 * peak else "black"
            ax.text(j, i, str(grid[i][j]), ha="center", va="center",
                    color=color, fontsize=14)
    ax.set_xticks([0, 1], ["tear", "no tear"])
    ax.set_yticks([0, 1], ["tear", "no tear"])
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    ax.set_title("Confusion matrix")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)


def save_training_curves(log, path) -> None:
    """Plot loss and validation accuracy over epochs from EpochStats rows."""
    epochs = [s.epoch for s in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(epochs, [s.train_loss for s in log], label="train loss")
    ax1.plot(epochs, [s.val_loss for s in log], label="val loss")
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Cross-entropy")
    ax1.legend()
    ax2.plot(epochs, [s.val_accuracy for s in log], color="tab:green")
    ax2.set_xlabel("Epoch")
    ax2.set_ylabel("Validation accuracy")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)


def save_gradcam_png(rgb, path) -> None:
    """Write an RGB overlay array as a PNG."""
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path)
