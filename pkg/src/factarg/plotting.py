"""PNG figures for training runs and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402
from .training import TrainingLog  # noqa: E402

# no Software/date metadata so reruns produce byte-identical files
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(str(path), format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training(trainlog: TrainingLog, path: str | Path, title: str = "training") -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    steps = [s["step"] for s in trainlog.steps]
    ax1.plot(steps, [s["loss"] for s in trainlog.steps], lw=1, label="train")
    if trainlog.evaluations:
        ax1.plot([e["step"] for e in trainlog.evaluations], [e["val_loss"] for e in trainlog.evaluations],
                 "o-", ms=3, label="validation")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(steps, [s["grad_norm"] for s in trainlog.steps], lw=1, label="before clipping")
    ax2.plot(steps, [s["clipped_norm"] for s in trainlog.steps], lw=1, label="after clipping")
    ax2.set_xlabel("step")
    ax2.set_ylabel("gradient norm")
    ax2.set_yscale("log")
    ax2.legend()
    fig.suptitle(title)
    _save(fig, path)


def plot_report(report: EvalReport, path: str | Path, title: str = "evaluation") -> None:
    names = ["BLEU", "RougeL", "Fact", "Entail", "Contra"]
    values = [report.bleu, report.rouge_l, report.fact, report.entail_rate, report.contra_rate]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(names, values, color="#4c72b0")
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_ylim(min(0.0, min(values)) - 0.05, 1.1)
    ax.axhline(0, color="black", lw=0.5)
    ax.set_title(f"{title} (n={report.n})")
    _save(fig, path)
