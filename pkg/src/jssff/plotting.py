"""PNG figures for training curves and comparison tables (matplotlib, Agg)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import REPORT_COLUMNS, REPORT_FIELDS  # noqa: E402
from .persist import atomic_write  # noqa: E402

# keep PNG bytes stable across runs and matplotlib builds
_PNG_META = {"Software": None}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def training_curve(log, path, title: str = ""):
    """Loss and token accuracy per epoch (epoch 0 = before training)."""
    epochs = [0] + [r.epoch for r in log.epochs]
    loss = [log.initial_loss] + [r.loss for r in log.epochs]
    acc = [log.initial_accuracy] + [r.token_accuracy for r in log.epochs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, loss, color="tab:blue", marker=".", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, acc, color="tab:orange", marker=".", label="token accuracy")
    ax2.set_ylabel("token accuracy", color="tab:orange")
    ax2.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def compare_chart(rows, path, title: str = ""):
    """Grouped bars of the six [0, 1] metrics plus CIDEr on its own axis."""
    ok = [r for r in rows if r.ok]
    fig, (ax, axc) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [6, 1.6]})
    fields = REPORT_FIELDS[:-1]
    x = np.arange(len(fields))
    width = 0.8 / max(len(ok), 1)
    for k, r in enumerate(ok):
        label = f"{r.label} [{r.strategy}]" if r.strategy else r.label
        ax.bar(x + k * width, [getattr(r.report, f) for f in fields], width, label=label, color=f"C{k}")
        axc.bar(k, r.report.cider, 0.8, color=f"C{k}")
    ax.set_xticks(x + width * (len(ok) - 1) / 2)
    ax.set_xticklabels(REPORT_COLUMNS[:-1])
    ax.set_ylim(0, 1)
    if ok:
        ax.legend(fontsize=7, loc="upper right")
    axc.set_xticks(range(len(ok)))
    axc.set_xticklabels([str(k + 1) for k in range(len(ok))])
    axc.set_ylim(0, max([r.report.cider for r in ok] + [0.1]) * 1.1)
    axc.set_title("CIDEr")
    if title:
        ax.set_title(title)
    if not ok:
        ax.text(0.5, 0.5, "no successful rows", ha="center", transform=ax.transAxes)
    fig.tight_layout()
    _save(fig, path)
