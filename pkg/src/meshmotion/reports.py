"""Delimited reports and the figures rendered alongside them.

All CSV output is bit-stable: header row, '.' decimal separator,
shortest-roundtrip float formatting and '\n' line endings, so golden-file
comparisons and rerun hashing work.  Figures are rendered with the Agg
backend next to their CSV counterpart.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quality import QualityReport


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows, footer_lines=()):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
        for line in footer_lines:
            f.write(line + "\n")


def write_quality_report(csv_path, fig_path, report: QualityReport):
    """Per-cell signed quality CSV plus its histogram figure."""
    write_csv(
        csv_path,
        ["cell", "scaled_jacobian"],
        [(i, q) for i, q in enumerate(report.per_cell)],
    )
    fig, ax = plt.subplots(figsize=(6, 3.2))
    centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
    width = report.bin_edges[1] - report.bin_edges[0]
    ax.bar(centers, report.hist_counts, width=0.9 * width, color="steelblue")
    ax.axvline(0.0, color="firebrick", lw=0.8)
    ax.set_xlabel("scaled Jacobian (negative = degenerate)")
    ax.set_ylabel("cells")
    ax.set_title(f"min quality {report.min_value:.3f}, min det {report.min_det:.3f}")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def write_replay_report(csv_path, fig_path, result):
    """Per-step quality series CSV (+ degeneration footer) and figure."""
    rows = [
        (i, q, d)
        for i, (q, d) in enumerate(zip(result.min_quality, result.min_det))
    ]
    footer = []
    if result.degenerate_at is not None:
        footer.append(f"# degenerate_at={result.degenerate_at}")
    write_csv(csv_path, ["step", "min_quality", "min_det"], rows, footer)

    fig, ax = plt.subplots(figsize=(6, 3.2))
    steps = np.arange(len(result.min_quality))
    ax.plot(steps, result.min_quality, "o-", ms=3, label="min scaled Jacobian")
    ax.plot(steps, result.min_det, "s-", ms=3, label="min det(I + grad u)")
    ax.axhline(0.0, color="k", lw=0.6)
    if result.degenerate_at is not None:
        ax.axvline(result.degenerate_at, color="firebrick", lw=0.8, ls="--",
                   label=f"degenerate at {result.degenerate_at}")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def write_loss_report(csv_path, fig_path, rows, header):
    """Loss-history CSV and the matching semilog curve."""
    write_csv(csv_path, header, rows)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    data = np.array([[float(v) for v in r] for r in rows])
    for j, name in enumerate(header[1:], start=1):
        if "loss" in name:
            ax.semilogy(data[:, 0], data[:, j], label=name)
    ax.set_xlabel(header[0])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def write_timing_figure(fig_path, phases_by_label: dict):
    """Stacked per-phase bars for one or more labelled runs."""
    labels = list(phases_by_label)
    parts = ("assembly", "linear_solve", "nn_eval", "rest")
    colors = ("steelblue", "darkorange", "seagreen", "gray")
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bottom = np.zeros(len(labels))
    for part, color in zip(parts, colors):
        vals = np.array([phases_by_label[l].get(part, 0.0) for l in labels])
        ax.bar(labels, vals, bottom=bottom, label=part, color=color)
        bottom += vals
    ax.set_ylabel("milliseconds")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)
