"""Report figures.

Everything renders through the Agg backend with PNG metadata stripped, so
the same data produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "trajalign",
}

GOLDEN = (5**0.5 - 1) / 2


def figsize(width=6.0, height=None):
    return (width, height if height is not None else width * GOLDEN)


def save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_alignment_summary(rows, path):
    """Best path score and pair counts per patient."""
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=figsize(7, 5), sharex=True)
        labels = [r["patient_id"] for r in rows]
        x = range(len(rows))
        ax1.bar(x, [r["best_score"] for r in rows], color="#4c72b0")
        ax1.set_ylabel("best path score")
        ax1.set_title("Guideline alignment per patient")
        ax2.bar([i - 0.2 for i in x], [r["seed_pairs"] for r in rows], width=0.4, label="seed", color="#dd8452")
        ax2.bar([i + 0.2 for i in x], [r["final_pairs"] for r in rows], width=0.4, label="final", color="#55a868")
        ax2.set_ylabel("aligned pairs")
        ax2.legend(frameon=False)
        ax2.set_xticks(list(x))
        ax2.set_xticklabels(labels, rotation=60, ha="right")
        fig.tight_layout()
        save(fig, path)


def plot_strata(buckets, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(5))
        labels = [f"{b.label}\n({b.mean_tokens:.0f} tok)" for b in buckets]
        scores = [b.mean_score if b.mean_score is not None else 0.0 for b in buckets]
        ax.bar(labels, scores, color=["#8fbbd9", "#4c72b0", "#274a7a"])
        ax.set_ylim(0, 5)
        ax.set_ylabel("mean ensemble score")
        ax.set_title("Scores by record length tercile")
        for i, s in enumerate(scores):
            ax.text(i, s + 0.08, f"{s:.2f}", ha="center")
        fig.tight_layout()
        save(fig, path)


def plot_correlations(reports, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(6))
        labels = [f"{r.scope}\n{r.rater_b}" for r in reports]
        rhos = [r.rho for r in reports]
        ax.bar(range(len(rhos)), rhos, color=["#55a868" if v >= 0 else "#c44e52" for v in rhos])
        ax.axhline(0, color="black", linewidth=0.6)
        ax.set_ylim(-1, 1)
        ax.set_xticks(range(len(rhos)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel("Spearman rho vs ensemble")
        ax.set_title("Judge ensemble agreement with reference raters")
        fig.tight_layout()
        save(fig, path)
