"""Benchmark tables assembled from evaluated run directories."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .io import config_hash
from .plotting import category_bars, fd_bars

log = logging.getLogger(__name__)

COLUMNS = ["run", "variant", "set", "target", "attribute", "fd", "ci_lo", "ci_hi",
           "fidelity", "n", "config_hash"]


@dataclass
class BenchmarkTable:
    rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)  # per-run metadata

    @property
    def meta(self):
        return {"runs": self.runs, "table_hash": config_hash(self.rows)}


def _variant(label, set_name):
    return "base" if set_name == "base" else f"{label}:{set_name}"


def build_benchmark(run_dirs):
    """Collect rows from each run's ``reports/eval.json``.

    A run without an evaluation is skipped with a warning.
    """
    table = BenchmarkTable()
    for run_dir in run_dirs:
        path = Path(run_dir) / "reports" / "eval.json"
        if not path.exists():
            log.warning("skipping %s: no reports/eval.json", run_dir)
            continue
        ev = json.loads(path.read_text())
        table.runs.append({
            "run": str(run_dir), "label": ev["label"], "config_hash": ev["config_hash"],
            "placement": ev.get("placement"), "gamma": ev.get("gamma"), "seed": ev.get("seed"),
            "frequencies": {s: v["frequencies"] for s, v in ev["sets"].items()},
            "categories": ev.get("categories", {}),
        })
        for set_name, res in ev["sets"].items():
            for target_name, per_attr in res["fd"].items():
                for attr, rep in per_attr.items():
                    table.rows.append({
                        "run": ev["label"],
                        "variant": _variant(ev["label"], set_name),
                        "set": set_name,
                        "target": target_name,
                        "attribute": attr,
                        "fd": rep["fd"],
                        "ci_lo": rep["ci95"][0],
                        "ci_hi": rep["ci95"][1],
                        "fidelity": res["fidelity"]["mean"],
                        "n": rep["n"],
                        "config_hash": ev["config_hash"],
                    })
    return table


def write_benchmark(table, out_dir):
    """Write ``benchmark.csv``, ``benchmark.json`` and SVG figures."""
    out = Path(out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    payload = {"columns": COLUMNS, "rows": table.rows, "meta": table.meta,
               "fidelity_metric": "energy distance to ground truth (lower is better)"}
    (out / "benchmark.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    figures = []
    for run in table.runs:
        freqs = run["frequencies"]
        for attr, cats in run["categories"].items():
            per_set = {s: f[attr] for s, f in freqs.items() if attr in f}
            path = out / "figures" / f"{run['label']}_{attr}.svg"
            figures.append(category_bars(per_set, cats, path, title=f"{run['label']}: {attr}",
                                         description=f"config_hash={run['config_hash']}"))
    if table.rows:
        figures.append(fd_bars(table.rows, out / "figures" / "fd.svg",
                               description=f"table_hash={table.meta['table_hash']}"))
    return figures
