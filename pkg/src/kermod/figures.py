"""Figure rendering for training reports and ablation tables.

Every renderer writes a PNG next to the delimited text outputs the CLI
produces; nothing here feeds back into training.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .net import Network

plt.rcParams.update({
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def save_training_curves(result, path: str, title: str = ""):
    """Loss and accuracy per epoch for one training run."""
    epochs = np.arange(len(result.accuracy_curve))
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2)
    ax_acc.plot(epochs, result.train_accuracy_curve, label="train")
    ax_acc.plot(epochs, result.accuracy_curve, label="test")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend()
    ax_loss.plot(epochs, result.loss_curve, color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_ablation_chart(rows, axis: str, path: str):
    """Mean accuracy with one-standard-deviation error bars per axis value."""
    labels = [str(r.value) for r in rows]
    means = [r.mean for r in rows]
    stds = [r.std for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 3.4))
    ax.bar(labels, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xlabel(axis)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_weight_histogram(net: Network, path: str, bins: int = 80):
    """Distribution of frozen convolution weights against their modulated values.

    The before/after-training comparison of these histograms is the quickest
    visual check that modulation starts near the identity and widens with
    training.
    """
    original, modulated = [], []
    for conv in net.conv_layers:
        original.append(conv.weight.data.reshape(-1))
        modulated.append(conv.effective_weight().data.reshape(-1))
    original = np.concatenate(original)
    modulated = np.concatenate(modulated)
    fig, ax = plt.subplots()
    ax.hist(original, bins=bins, alpha=0.6, density=True, label="frozen weights")
    ax.hist(modulated, bins=bins, alpha=0.6, density=True, label="modulated weights")
    ax.set_xlabel("weight value")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
