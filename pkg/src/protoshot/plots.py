"""Matplotlib figure rendering for training histories, shot sweeps, and
saliency panels. Figures are written to files next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_training_history(history, path) -> None:
    epochs = [e.epoch for e in history.epochs]
    losses = [e.mean_loss for e in history.epochs]
    lrs = [e.lr for e in history.epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", color="tab:blue", label="mean episode loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean episode loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, marker="s", color="tab:orange", alpha=0.6, label="learning rate")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax2.set_yscale("log")
    ax.set_title(f"training ({history.stop_reason}, best epoch {history.best_epoch})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_shot_sweep(reports, path) -> None:
    by_encoder: dict[str, list] = {}
    for r in reports:
        by_encoder.setdefault(r.encoder, []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for encoder, rows in by_encoder.items():
        rows = sorted(rows, key=lambda r: r.shot)
        ax.plot([r.shot for r in rows], [r.accuracy for r in rows], marker="o", label=encoder)
    ax.set_xlabel("shots")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    ax.set_title("accuracy by number of shots")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_saliency_panel(entries, path, columns: int = 4) -> None:
    """Grid of (title, rgb image) pairs."""
    n = len(entries)
    columns = max(1, min(columns, n))
    rows = (n + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(3 * columns, 3 * rows), squeeze=False)
    for i in range(rows * columns):
        ax = axes[i // columns][i % columns]
        ax.axis("off")
        if i < n:
            title, img = entries[i]
            ax.imshow(img)
            ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
