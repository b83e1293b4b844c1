"""PR and F-vs-threshold curve figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PRSweep  # noqa: E402


def plot_curves(sweeps: dict[str, PRSweep], out_prefix, fmt: str = "png") -> list[Path]:
    """Write ``<prefix>_pr.<fmt>`` and ``<prefix>_f.<fmt>``; returns the paths."""
    if not sweeps:
        raise ValueError("nothing to plot")
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, s in sweeps.items():
        ax.plot(s.recall, s.precision, label=label, lw=1.5)
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02))
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    pr_path = out_prefix.with_name(f"{out_prefix.name}_pr.{fmt}")
    fig.tight_layout()
    fig.savefig(pr_path, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, s in sweeps.items():
        ax.plot(s.thresholds, s.f_beta, label=label, lw=1.5)
    ax.set(xlabel="Threshold", ylabel="F-measure", xlim=(0, 255), ylim=(0, 1.02))
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    f_path = out_prefix.with_name(f"{out_prefix.name}_f.{fmt}")
    fig.tight_layout()
    fig.savefig(f_path, dpi=120)
    plt.close(fig)
    return [pr_path, f_path]
