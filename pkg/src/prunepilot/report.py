"""Post-run reporting: CSV series, summary arithmetic, and figures.

Everything here is a pure function of the JSONL run log.  CSV output is
deterministic; figures render via the Agg backend so headless runs
work.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

REQUIRED_ROW_KEYS = (
    "iteration",
    "sparsity_before",
    "sparsity_after",
    "ppl_before",
    "ppl_after",
    "decision",
    "feedback",
    "rolled_back",
)

CSV_FILES = (
    "sparsity_per_iteration.csv",
    "ppl_per_iteration.csv",
    "sparsity_gain_per_iteration.csv",
    "ppl_change_per_iteration.csv",
)

FIGURE_FILE = "cumulative_stats.png"


class RunLogError(ValueError):
    pass


def parse_run_log(path: str | Path) -> list[dict]:
    """Read and validate a JSONL run log, reporting bad lines by number."""
    rows: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise RunLogError(f"{path}: line {lineno}: not valid JSON ({e})") from None
            if not isinstance(row, dict):
                raise RunLogError(f"{path}: line {lineno}: row must be a JSON object")
            missing = [k for k in REQUIRED_ROW_KEYS if k not in row]
            if missing:
                raise RunLogError(
                    f"{path}: line {lineno}: missing keys {missing}"
                )
            rows.append(row)
    return rows


def write_csv_series(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Emit the four per-iteration series; rollback rows carry a flag.

    For a rolled-back iteration the post values equal the pre values, so
    its gain and change rows are zero and flagged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in CSV_FILES]

    def flag(row: dict) -> str:
        return "true" if row["rolled_back"] else "false"

    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sparsity_before", "sparsity_after", "rolled_back"])
        for r in rows:
            w.writerow([r["iteration"], repr(r["sparsity_before"]), repr(r["sparsity_after"]), flag(r)])

    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ppl_before", "ppl_after", "rolled_back"])
        for r in rows:
            w.writerow([r["iteration"], repr(r["ppl_before"]), repr(r["ppl_after"]), flag(r)])

    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sparsity_gain", "rolled_back"])
        for r in rows:
            w.writerow([r["iteration"], repr(r["sparsity_after"] - r["sparsity_before"]), flag(r)])

    with open(paths[3], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ppl_change_pct", "rolled_back"])
        for r in rows:
            pct = (r["ppl_after"] - r["ppl_before"]) / r["ppl_before"] * 100.0
            w.writerow([r["iteration"], repr(pct), flag(r)])

    return paths


def summarize(rows: list[dict]) -> dict:
    """Aggregate statistics over the run log."""
    if not rows:
        raise RunLogError("run log contains no iterations")
    iterations = len(rows)
    rollbacks = sum(1 for r in rows if r["rolled_back"])
    ppl_baseline = rows[0]["ppl_before"]
    ppl_final = rows[-1]["ppl_after"]
    return {
        "iterations": iterations,
        "rollbacks": rollbacks,
        "rollback_rate": rollbacks / iterations,
        "successful_iterations": iterations - rollbacks,
        "sparsity_initial": rows[0]["sparsity_before"],
        "sparsity_final": rows[-1]["sparsity_after"],
        "ppl_baseline": ppl_baseline,
        "ppl_final": ppl_final,
        "ppl_degradation_pct": (ppl_final - ppl_baseline) / ppl_baseline * 100.0,
    }


def render_figures(rows: list[dict], out_dir: str | Path) -> Path:
    """Four-panel evolution figure: sparsity, perplexity, and per-iteration
    deltas, with rolled-back iterations highlighted."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / FIGURE_FILE

    its = [r["iteration"] for r in rows]
    rb = [bool(r["rolled_back"]) for r in rows]
    gains = [r["sparsity_after"] - r["sparsity_before"] for r in rows]
    changes = [
        (r["ppl_after"] - r["ppl_before"]) / r["ppl_before"] * 100.0 for r in rows
    ]

    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    ax = axes[0][0]
    ax.plot(its, [r["sparsity_after"] for r in rows], marker="o", ms=3, label="after")
    ax.plot(its, [r["sparsity_before"] for r in rows], ls="--", lw=1, label="before")
    ax.set_title("Global sparsity")
    ax.set_xlabel("iteration")
    ax.legend(fontsize=8)

    ax = axes[0][1]
    ax.plot(its, [r["ppl_after"] for r in rows], marker="o", ms=3, color="tab:red")
    ax.set_title("Perplexity")
    ax.set_xlabel("iteration")

    ax = axes[1][0]
    colors = ["tab:red" if f else "tab:blue" for f in rb]
    ax.bar(its, gains, color=colors)
    ax.set_title("Sparsity gain per iteration (red = rolled back)")
    ax.set_xlabel("iteration")

    ax = axes[1][1]
    ax.bar(its, changes, color=colors)
    ax.set_title("PPL change % per iteration (red = rolled back)")
    ax.set_xlabel("iteration")

    for row_axes in axes:
        for a in row_axes:
            a.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
