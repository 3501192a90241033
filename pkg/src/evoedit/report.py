"""Cross-run report tables and figures.

Reads one or more completed run directories (each with manifest.json and
eval.csv), groups them by method, takes the median across seeds, and emits:

  efficacy_matrix.csv   per-rank x per-step BLEU, methods side by side
  retention_curve.csv   specificity average BLEU vs step per method
  retention_curve.png / efficacy_curve.png / final_per_rank.png

Figures are rendered headless; the CSVs carry the same numbers so nothing
downstream depends on matplotlib.
"""

from __future__ import annotations

import json
import statistics
from pathlib import Path

from .corpus import RANKS
from .errors import DataError
from .evaluation import read_eval_csv

RANK_COLUMNS = [r.value for r in RANKS] + ["average"]


def _load_runs(run_dirs) -> dict[str, list[dict]]:
    """method -> list of {step -> {(mode, rank) -> value}} per run."""
    by_method: dict[str, list[dict]] = {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest_path = run_dir / "manifest.json"
        eval_path = run_dir / "eval.csv"
        if not manifest_path.exists() or not eval_path.exists():
            raise DataError(f"{run_dir} is not a completed run (need manifest.json and eval.csv)")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        method = manifest.get("method", "unknown")
        table: dict = {}
        for row in read_eval_csv(eval_path):
            table.setdefault(row["step"], {})[(row["mode"], row["rank"])] = row["bleu"]
        by_method.setdefault(method, []).append(table)
    return by_method


def _median_over_runs(tables: list[dict], step: int, key: tuple) -> float | None:
    values = [t[step][key] for t in tables if step in t and key in t[step]]
    if not values:
        return None
    return statistics.median(values)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def write_report(run_dirs, out_dir, manifest_hash: str = "") -> dict:
    """Build all report artifacts; returns {name: path} of what was written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_method = _load_runs(run_dirs)
    if not by_method:
        raise DataError("no runs to report on")
    methods = sorted(by_method)
    steps = sorted({s for tables in by_method.values() for t in tables for s in t})

    written: dict[str, Path] = {}
    header = [f"# manifest_hash={manifest_hash}"] if manifest_hash else []

    # per-rank x per-step efficacy matrix, methods side by side
    cols = ["step"] + [f"{m}_{rc}" for m in methods for rc in RANK_COLUMNS]
    lines = header + [",".join(cols)]
    for step in steps:
        row = [str(step)]
        for m in methods:
            for rc in RANK_COLUMNS:
                row.append(_fmt(_median_over_runs(by_method[m], step, ("efficacy", rc))))
        lines.append(",".join(row))
    matrix_path = out_dir / "efficacy_matrix.csv"
    matrix_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["efficacy_matrix"] = matrix_path

    # retention: specificity average BLEU vs step
    lines = header + [",".join(["step"] + methods)]
    retention: dict[str, list[tuple[int, float]]] = {m: [] for m in methods}
    for step in steps:
        row = [str(step)]
        for m in methods:
            v = _median_over_runs(by_method[m], step, ("specificity", "average"))
            row.append(_fmt(v))
            if v is not None:
                retention[m].append((step, v))
        lines.append(",".join(row))
    retention_path = out_dir / "retention_curve.csv"
    retention_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["retention_curve"] = retention_path

    efficacy_avg: dict[str, list[tuple[int, float]]] = {m: [] for m in methods}
    final_per_rank: dict[str, list[float]] = {}
    for m in methods:
        for step in steps:
            v = _median_over_runs(by_method[m], step, ("efficacy", "average"))
            if v is not None:
                efficacy_avg[m].append((step, v))
        last_eff = [s for s in steps if _median_over_runs(by_method[m], s, ("efficacy", "average")) is not None]
        if last_eff:
            final = last_eff[-1]
            final_per_rank[m] = [
                _median_over_runs(by_method[m], final, ("efficacy", rc)) or 0.0
                for rc in RANK_COLUMNS[:-1]
            ]

    written.update(_render_figures(out_dir, retention, efficacy_avg, final_per_rank))
    return written


def _render_figures(out_dir: Path, retention, efficacy_avg, final_per_rank) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = {}

    fig, ax = plt.subplots(figsize=(6, 4))
    for method, series in sorted(retention.items()):
        if series:
            ax.plot([s for s, _ in series], [v for _, v in series], marker="o", label=method)
    ax.set_xlabel("edit step")
    ax.set_ylabel("specificity BLEU (avg over ranks)")
    ax.set_title("Retention on previously edited knowledge")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "retention_curve.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written["retention_curve_png"] = path

    fig, ax = plt.subplots(figsize=(6, 4))
    for method, series in sorted(efficacy_avg.items()):
        if series:
            ax.plot([s for s, _ in series], [v for _, v in series], marker="o", label=method)
    ax.set_xlabel("edit step")
    ax.set_ylabel("efficacy BLEU (avg over ranks)")
    ax.set_title("New-knowledge acquisition per edit step")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "efficacy_curve.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written["efficacy_curve_png"] = path

    fig, ax = plt.subplots(figsize=(7, 4))
    methods = sorted(final_per_rank)
    width = 0.8 / max(1, len(methods))
    for i, method in enumerate(methods):
        xs = [j + i * width for j in range(len(RANK_COLUMNS) - 1)]
        ax.bar(xs, final_per_rank[method], width=width, label=method)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(RANK_COLUMNS) - 1)])
    ax.set_xticklabels(RANK_COLUMNS[:-1], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("efficacy BLEU at final step")
    ax.set_title("Per-rank efficacy at the last evaluated step")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "final_per_rank.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written["final_per_rank_png"] = path

    return written
