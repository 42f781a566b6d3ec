"""Report emission: CSV tables (always) and optional plot images."""

from __future__ import annotations

import csv
from pathlib import Path

from .experiment import RESULT_COLUMNS, _fmt
from .validation import ValidationError

SWEEP_COLUMNS = ["sweep_axis", "sweep_value", "n_runs", "f1_mean", "f1_std",
                 "accuracy_mean", "accuracy_std"]
TABLE1_COLUMNS = ["dataset", "known_labels", "train_acc", "test_acc", "seed"]
SUMMARY_COLUMNS = ["run_id", "seed", "dataset", "attack", "defense", "final_f1",
                   "final_accuracy", "surrogate_train_acc", "surrogate_test_acc",
                   "mean_perturbation_l1", "filter_precision", "filter_recall",
                   "sweep_axis", "sweep_value"]


def _write_csv(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return path


def emit_report(rows, output_dir, plots=False, sweep_table=None, prefix="report"):
    """Write the standard CSV set (and optionally plots) for a batch of rows.

    Always writes ``<prefix>_rows.csv`` and ``<prefix>_summary.csv``; adds
    ``<prefix>_sweep.csv`` when an aggregated sweep table is given and
    ``<prefix>_table1.csv`` when surrogate accuracies are present. Returns the
    list of written paths."""
    rows = list(rows)
    if not rows:
        raise ValidationError("no rows to report")
    out = Path(output_dir)
    written = []
    written.append(_write_csv(out / f"{prefix}_rows.csv", RESULT_COLUMNS, rows))

    summaries = [r for r in rows if r.get("kind") == "summary"]
    written.append(_write_csv(out / f"{prefix}_summary.csv", SUMMARY_COLUMNS, summaries))

    table1 = [
        {
            "dataset": r.get("dataset", ""),
            "known_labels": r.get("attack_known_labels", ""),
            "train_acc": r.get("surrogate_train_acc", ""),
            "test_acc": r.get("surrogate_test_acc", ""),
            "seed": r.get("seed", ""),
        }
        for r in summaries
        if r.get("surrogate_train_acc") not in ("", None)
    ]
    if table1:
        written.append(_write_csv(out / f"{prefix}_table1.csv", TABLE1_COLUMNS, table1))

    if sweep_table:
        written.append(_write_csv(out / f"{prefix}_sweep.csv", SWEEP_COLUMNS, sweep_table))

    if plots:
        written.extend(_emit_plots(rows, summaries, sweep_table, out, prefix))
    return written


def _emit_plots(rows, summaries, sweep_table, out, prefix):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    epoch_rows = [r for r in rows if r.get("kind") == "epoch" and r.get("f1") not in ("", None)]
    if epoch_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        by_run = {}
        for r in epoch_rows:
            by_run.setdefault(r["run_id"], []).append((int(r["epoch"]), float(r["f1"])))
        for run_id, points in sorted(by_run.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], label=run_id, alpha=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test F1")
        if len(by_run) <= 12:
            ax.legend(fontsize=6)
        fig.tight_layout()
        path = out / f"{prefix}_history.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if sweep_table:
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = list(range(len(sweep_table)))
        means = [t["f1_mean"] for t in sweep_table]
        stds = [t["f1_std"] or 0.0 for t in sweep_table]
        ax.errorbar(xs, means, yerr=stds, marker="o")
        ax.set_xticks(xs)
        ax.set_xticklabels([str(t["sweep_value"]) for t in sweep_table],
                           rotation=45, fontsize=7)
        ax.set_xlabel(sweep_table[0]["sweep_axis"])
        ax.set_ylabel("final F1 (mean ± std)")
        fig.tight_layout()
        path = out / f"{prefix}_sweep.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if summaries:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels, values = [], []
        for r in summaries:
            tag = "+".join(filter(None, [r.get("attack") or "clean", r.get("defense")]))
            labels.append(f"{tag}-s{r.get('seed')}")
            values.append(float(r["final_f1"]) if r.get("final_f1") not in ("", None) else 0.0)
        ax.bar(range(len(values)), values)
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=60, fontsize=6)
        ax.set_ylabel("final F1")
        fig.tight_layout()
        path = out / f"{prefix}_final_f1.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
