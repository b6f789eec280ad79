"""Static figure export from run-directory reports.

Each figure gets a CSV (the plotted numbers, verbatim from the source
report) and an SVG rendering.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def confidence_evolution(run_dir: Path) -> list[Path]:
    """High-confidence fraction and selected/rejected mean confidence per
    evolution iteration (iteration 0 is the pre-evolution baseline and has
    no pseudo-labels, so it is skipped)."""
    src = run_dir / "evolution_report.json"
    if not src.exists():
        return []
    rows = [r for r in _load_json(src) if r["iteration"] >= 1]
    csv_path = run_dir / "confidence_evolution.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("iteration,high_conf_fraction,mean_conf_selected,mean_conf_rejected\n")
        for r in rows:
            f.write(
                f"{r['iteration']},{r['high_conf_fraction']:.10g},"
                f"{r['mean_conf_selected']:.10g},{r['mean_conf_rejected']:.10g}\n"
            )
    fig, ax = plt.subplots(figsize=(5, 3.5))
    its = [r["iteration"] for r in rows]
    ax.plot(its, [r["high_conf_fraction"] for r in rows], "o-", label="high-conf fraction")
    ax.plot(its, [r["mean_conf_selected"] for r in rows], "s--", label="mean conf (selected)")
    ax.plot(its, [r["mean_conf_rejected"] for r in rows], "^--", label="mean conf (rejected)")
    ax.set_xlabel("iteration")
    ax.set_ylabel("confidence")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    svg_path = run_dir / "confidence_evolution.svg"
    fig.savefig(svg_path)
    plt.close(fig)
    return [csv_path, svg_path]


def _bar_figure(run_dir: Path, metric: str, stem: str, ylabel: str) -> list[Path]:
    src = run_dir / "eval_report.json"
    if not src.exists():
        return []
    report = _load_json(src)
    per_node = report[f"per_node_{metric}"]
    # parents first then children, ascending node id within each
    items = sorted(per_node.items(), key=lambda kv: int(kv[0]))
    csv_path = run_dir / f"{stem}.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(f"node_id,{metric}\n")
        for nid, value in items:
            f.write(f"{nid},{value:.10g}\n")
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(items)), 3.5))
    ax.bar([str(nid) for nid, _ in items], [v for _, v in items])
    ax.set_xlabel("node id")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    svg_path = run_dir / f"{stem}.svg"
    fig.savefig(svg_path)
    plt.close(fig)
    return [csv_path, svg_path]


def make_all(run_dir: Path) -> list[Path]:
    made = []
    made += confidence_evolution(run_dir)
    made += _bar_figure(run_dir, "dice", "per_category_dice", "dice")
    made += _bar_figure(run_dir, "hd", "hd_comparison", "hausdorff distance (px)")
    return made
