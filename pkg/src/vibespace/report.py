"""Figure rendering for CLI reports (headless matplotlib)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_embedding_figure(coords, path, labels=None, title="diffusion embedding"):
    """Scatter of the first two embedding coordinates, colored by label if given."""
    coords = np.asarray(coords, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    y = coords[:, 1] if coords.shape[1] > 1 else np.zeros(coords.shape[0])
    if labels is not None:
        sc = ax.scatter(coords[:, 0], y, c=labels, cmap="tab10", s=12)
        fig.colorbar(sc, ax=ax, label="segment")
    else:
        ax.scatter(coords[:, 0], y, s=12)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_path_figure(alphas, latents, path, title="latent path"):
    """Mean latent per alpha projected onto the first two latent dimensions."""
    means = np.array([np.asarray(z).mean(axis=0) for z in latents])
    fig, ax = plt.subplots(figsize=(5, 4))
    y = means[:, 1] if means.shape[1] > 1 else np.zeros(means.shape[0])
    ax.plot(means[:, 0], y, "o-")
    for a, x, yy in zip(alphas, means[:, 0], y):
        ax.annotate(f"{a:g}", (x, yy), fontsize=7)
    ax.set_xlabel("latent dim 1")
    ax.set_ylabel("latent dim 2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_score_curve(alphas, scores, path, selected=None, title="consistency vs alpha"):
    """Line plot of a per-alpha score, with the selected alpha highlighted."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(alphas, scores, "o-")
    if selected is not None:
        ax.axvline(selected, color="red", linestyle="--", label=f"alpha*={selected:g}")
        ax.legend()
    ax.set_xlabel("alpha")
    ax.set_ylabel("score")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pns_figure(reports, path, title="path naturalness"):
    """Grouped bars of length ratio, direction change, and normalized score."""
    idx = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.25
    ax.bar(idx - width, [r.length_ratio for r in reports], width, label="length ratio")
    ax.bar(idx, [r.mean_direction_change for r in reports], width, label="direction change")
    ax.bar(idx + width, [r.normalized_pns for r in reports], width, label="normalized")
    ax.set_xlabel("path")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
