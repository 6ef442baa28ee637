"""Run reports: delimited outputs with rendered figures alongside.

Every artifact a command emits hangs off one output prefix.  Reports are a
one-row CSV (fixed column order, versioned schema) plus a JSON sidecar that
snapshots the full configuration, so a run can be reproduced from the
sidecar alone.  Energy traces and benchmark sweeps are written as CSV and
rendered to PNG next to them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

SCHEMA_VERSION = 1

# fixed column order; fields that do not apply to a command stay empty
REPORT_COLUMNS = ["schema_version", "command", "dice", "dice_mean", "dice_min",
                  "iterations", "wall_time_s", "final_energy", "warning"]

BENCH_COLUMNS = ["schema_version", "objects", "regions", "iterations",
                 "wall_time_s", "dice_mean", "dice_min", "mem_peak_mb"]


def write_run_report(prefix: str, command: str, config: dict, metrics: dict) -> dict:
    """Write {prefix}_report.csv and {prefix}_report.json; returns the paths."""
    csv_path = Path(f"{prefix}_report.csv")
    json_path = Path(f"{prefix}_report.json")
    row = {c: "" for c in REPORT_COLUMNS}
    row["schema_version"] = SCHEMA_VERSION
    row["command"] = command
    for key, value in metrics.items():
        if key in row:
            row[key] = _fmt(value)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerow(row)
    with open(json_path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "command": command,
                   "config": config, "metrics": metrics}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"report_csv": str(csv_path), "report_json": str(json_path)}


def write_energy_trace(prefix: str, trace) -> dict:
    """Write {prefix}_energy.csv and render {prefix}_energy.png."""
    csv_path = Path(f"{prefix}_energy.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "energy"])
        for t, e in enumerate(trace):
            writer.writerow([t, _fmt(e)])
    png_path = Path(f"{prefix}_energy.png")
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(trace)), trace, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    ax.set_title("evolution energy")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"energy_csv": str(csv_path), "energy_png": str(png_path)}


def write_bench_outputs(prefix: str, rows: list[dict], summary: dict) -> dict:
    """Write the benchmark CSV, its summary JSON, and the scaling figure."""
    csv_path = Path(f"{prefix}_bench.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = {"schema_version": SCHEMA_VERSION}
            out.update({k: _fmt(row[k]) for k in BENCH_COLUMNS if k in row})
            writer.writerow(out)
    json_path = Path(f"{prefix}_bench.json")
    with open(json_path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "rows": rows,
                   "summary": summary}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    png_path = Path(f"{prefix}_bench.png")
    objects = [r["objects"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5.5, 3.5))
    ax1.plot(objects, [r["wall_time_s"] for r in rows], "o-", color="tab:blue",
             label="wall time")
    ax1.set_xlabel("number of objects")
    ax1.set_ylabel("wall time [s]", color="tab:blue")
    ax1.set_ylim(bottom=0.0)
    ax2 = ax1.twinx()
    ax2.plot(objects, [r["dice_mean"] for r in rows], "s--", color="tab:red",
             label="mean Dice")
    ax2.set_ylabel("mean Dice", color="tab:red")
    ax2.set_ylim(0.0, 1.05)
    ax1.set_title("runtime vs. object count (fixed iteration budget)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"bench_csv": str(csv_path), "bench_json": str(json_path),
            "bench_png": str(png_path)}


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return value
