"""Delimited tables and matplotlib figures for experiment results.

Figures are written with the Agg backend so reports render headless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ExperimentResult, mean_std  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (f"{v:.4f}" if isinstance(v, float) else v) for v in row])
    return path


def read_tsv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def summary_rows(results: Sequence[ExperimentResult]):
    for r in results:
        yield [r.label, len(r.seeds), r.mean, r.std, r.recall_mean, r.k, r.dropped_nil_count, r.runtime_s,
               " ".join(f"{a:.4f}" for a in r.accuracy)]


SUMMARY_HEADER = ["label", "n_seeds", "accuracy_mean", "accuracy_std", "recall_at_k", "k",
                  "dropped_nil", "runtime_s", "accuracy_per_seed"]


def plot_accuracy_bars(results: Sequence[ExperimentResult], path: str | Path, title: str = "") -> Path:
    """Mean accuracy per configuration with a 1-std error bar and one dot per seed."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(results))
        means = [100 * (r.mean or 0.0) for r in results]
        errs = [100 * (r.std or 0.0) for r in results]
        ax.bar(xs, means, yerr=errs, capsize=3, color="0.75", edgecolor="0.3", width=0.6)
        for x, r in zip(xs, results):
            ax.scatter([x] * len(r.accuracy), [100 * a for a in r.accuracy], s=10, color="k", zorder=3)
        recall = [100 * r.recall_mean for r in results if r.recall_mean is not None]
        if recall and len(set(recall)) == 1:
            ax.axhline(recall[0], ls="--", lw=0.8, color="tab:red", label=f"recall@{results[0].k}")
            ax.legend(loc="lower right")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([r.label for r in results], rotation=15, ha="right")
        ax.set_ylabel("test accuracy (%)")
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_finetune(table: Mapping[str, Mapping], path: str | Path, title: str = "") -> Path:
    """Accuracy against fine-tuning fraction (mean with 1-std band)."""
    rows = sorted((float(f), v) for f, v in table.items() if isinstance(v, Mapping))
    fr = [100 * f for f, _ in rows]
    means = [100 * v["mean"] for _, v in rows]
    stds = [100 * (v.get("std") or 0.0) for _, v in rows]
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(fr, means, marker="o", color="k")
        ax.fill_between(fr, [m - s for m, s in zip(means, stds)], [m + s for m, s in zip(means, stds)],
                        color="0.8", lw=0)
        ax.set_xlabel("target training documents used (%)")
        ax.set_ylabel("test accuracy (%)")
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def load_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def plot_training_curves(metric_files: Sequence[str | Path], path: str | Path) -> Path:
    """Per-epoch loss (left) and validation metric (right) for each JSONL log."""
    path = Path(path)
    with plt.rc_context({**STYLE, "figure.figsize": (8.0, 3.0)}):
        fig, (ax_l, ax_v) = plt.subplots(1, 2)
        for f in metric_files:
            recs = load_metrics(f)
            if not recs:
                continue
            label = Path(f).stem
            ax_l.plot([r["epoch"] for r in recs], [r["loss"] for r in recs], lw=1, label=label)
            val = [(r["epoch"], r["val_metric"]) for r in recs if r["val_metric"] is not None]
            if val:
                ax_v.plot(*zip(*val), lw=1, marker=".", label=label)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("training loss")
        ax_v.set_xlabel("epoch")
        ax_v.set_ylabel("validation metric")
        if len(metric_files) <= 8:
            ax_v.legend(fontsize=6)
        fig.savefig(path)
        plt.close(fig)
    return path


def report_results(results: Sequence[ExperimentResult], out_dir: str | Path, name: str = "summary",
                   title: str = "") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "table": write_tsv(out / f"{name}.tsv", SUMMARY_HEADER, summary_rows(results)),
        "seeds": write_tsv(out / f"{name}_per_seed.tsv", ["label", "seed", "accuracy", "recall_at_k"],
                           ([r.label, s, a, rk] for r in results
                            for s, a, rk in zip(r.seeds, r.accuracy, r.recall_at_k))),
        "figure": plot_accuracy_bars(results, out / f"{name}.png", title),
    }
    for r in results:
        ft = (r.extra.get("finetune") or {}).get("fractions")
        if ft:
            stem = f"{name}_{r.label or 'run'}_finetune"
            rows = sorted((float(f), v) for f, v in ft.items() if isinstance(v, Mapping))
            files[f"finetune_table:{r.label}"] = write_tsv(
                out / f"{stem}.tsv", ["fraction", "documents", "accuracy_mean", "accuracy_std", "accuracy_per_seed"],
                ([f, v.get("documents"), v["mean"], v.get("std"), " ".join(f"{a:.4f}" for a in v["accuracy"])]
                 for f, v in rows))
            files[f"finetune_figure:{r.label}"] = plot_finetune(ft, out / f"{stem}.png", title)
    return files


def recompute_summary(result: ExperimentResult) -> tuple[float | None, float | None]:
    """Independent recomputation of mean/std from the stored per-seed values."""
    return mean_std(result.accuracy)
