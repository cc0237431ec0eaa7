"""Static SVG line charts of a metrics CSV, one file per metric family."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

from .storage import atomic_write, read_metrics_csv  # noqa: E402

FAMILIES = {
    "loss": ("loss_attack", "loss_defense", "loss_benign"),
    "rates": ("trigger_success_rate", "compliance_rate"),
    "accuracy": ("forget_accuracy", "retain_accuracy"),
    "perplexity": ("forget_ppl", "retain_ppl"),
    "relearn": ("gap_closed",),
    "stability": ("nan_skips",),
}


def family_svg(rows: list[dict], family: str) -> str | None:
    """SVG text for one family, or ``None`` when none of its columns has data.

    Each series is drawn with one marker per row that has a value; the line
    carries the gid ``series-<column>``.
    """
    series = {}
    for col in FAMILIES[family]:
        pts = [(r["step"], r[col]) for r in rows if r.get(col) is not None]
        if pts:
            series[col] = pts
    if not series:
        return None
    with plt.rc_context({"svg.hashsalt": "latforge", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for col, pts in series.items():
            xs, ys = zip(*pts)
            (line,) = ax.plot(xs, ys, marker="o", label=col)
            line.set_gid(f"series-{col}")
        ax.set_xlabel("step")
        ax.set_title(family)
        ax.legend(fontsize="small")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def plot_csv(csv_path, out_dir) -> list[Path]:
    rows = read_metrics_csv(csv_path)
    written = []
    for family in FAMILIES:
        svg = family_svg(rows, family)
        if svg is None:
            continue
        path = Path(out_dir) / f"{family}.svg"
        atomic_write(path, svg)
        written.append(path)
    return written
