"""Tables and plots aggregated from run-record logs."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .config import SCHEMA_VERSION
from .metrics import aggregate_ci, format_ci
from .orchestrate import RunLog, RunRecord

METRICS = ("tow", "tow_mia")
GROUP_KEYS = ("method", "rum", "architecture", "proxy", "step", "dataset")


class ReportError(Exception):
    pass


class EmptySelection(ReportError):
    pass


@dataclass
class ReportSpec:
    inputs: Sequence[Path]
    group_by: Sequence[str] = ("method", "rum", "architecture", "proxy", "step")
    where: dict = field(default_factory=dict)
    formats: Sequence[str] = ("csv", "markdown")
    out_dir: Optional[Path] = None
    level: float = 0.95

    def __post_init__(self):
        bad = [k for k in self.group_by if k not in GROUP_KEYS]
        if bad:
            raise ReportError(f"unknown grouping keys {bad}; choose from {GROUP_KEYS}")
        bad = [f for f in self.formats if f not in ("csv", "markdown", "plot")]
        if bad:
            raise ReportError(f"unknown formats {bad}")


def collect(spec: ReportSpec) -> list[RunRecord]:
    records = []
    for path in spec.inputs:
        path = Path(path)
        if not (path / "records.jsonl").exists():
            raise ReportError(f"no records.jsonl under {path}")
        records.extend(RunLog(path).records())
    out = []
    for r in records:
        if r.status != "ok":
            continue
        if all(str(getattr(r, k)) == str(v) for k, v in spec.where.items()):
            out.append(r)
    if not out:
        raise EmptySelection("no successful records match the selection")
    return out


def _value(r: RunRecord, metric: str) -> float:
    if metric.startswith("original_"):
        return r.original[metric[len("original_"):]]
    return r.metrics[metric]


def aggregate(records: Iterable[RunRecord], group_by: Sequence[str], level: float = 0.95) -> list[dict]:
    """One row per group: mean, CI half-width and count for each metric, plus
    the Original baseline."""
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, k) for k in group_by)].append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple((v is None, str(v)) for v in k)):
        recs = groups[key]
        row = dict(zip(group_by, key))
        row["n"] = len(recs)
        for metric in METRICS + tuple(f"original_{m}" for m in METRICS):
            values = [_value(r, metric) for r in recs]
            if len(values) >= 2:
                mean, half = aggregate_ci(values, level)
            else:
                mean, half = values[0], None
            row[metric] = mean
            row[f"{metric}_ci"] = half
        rows.append(row)
    return rows


def _cell(mean: float, half: Optional[float]) -> str:
    return f"{mean:.3f}" if half is None else format_ci(mean, half)


def to_markdown(rows: list[dict], group_by: Sequence[str]) -> str:
    cols = list(group_by) + ["n", "ToW", "ToW-MIA", "Original ToW", "Original ToW-MIA"]
    lines = [f"<!-- schema_version: {SCHEMA_VERSION} -->", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [str(r[k]) for k in group_by] + [str(r["n"])]
        cells += [_cell(r[m], r[f"{m}_ci"]) for m in ("tow", "tow_mia", "original_tow", "original_tow_mia")]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) + ["schema_version"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "schema_version": SCHEMA_VERSION})
    return buf.getvalue()


def plot_continual(records: list[RunRecord], out_dir: Path, level: float = 0.95) -> list[Path]:
    """One step-vs-metric line chart (mean with CI band) per (architecture, metric)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stepped = [r for r in records if r.step is not None]
    if not stepped:
        return []
    paths = []
    for arch in sorted({r.architecture for r in stepped}):
        for metric in METRICS:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for method in sorted({r.method for r in stepped if r.architecture == arch}):
                sel = [r for r in stepped if r.architecture == arch and r.method == method]
                rows = aggregate(sel, ["step"], level)
                steps = [row["step"] for row in rows]
                means = [row[metric] for row in rows]
                halves = [row[f"{metric}_ci"] or 0.0 for row in rows]
                ax.plot(steps, means, marker="o", label=method)
                ax.fill_between(steps, [m - h for m, h in zip(means, halves)],
                                [m + h for m, h in zip(means, halves)], alpha=0.2)
            ax.set_xlabel("step")
            ax.set_ylabel("ToW" if metric == "tow" else "ToW-MIA")
            ax.set_title(arch)
            ax.set_ylim(0, 1.02)
            ax.legend()
            fig.tight_layout()
            path = out_dir / f"continual_{arch}_{metric}.png"
            fig.savefig(path, dpi=120, metadata={"Software": None})
            plt.close(fig)
            paths.append(path)
    return paths


def build_report(spec: ReportSpec) -> list[Path]:
    records = collect(spec)
    rows = aggregate(records, spec.group_by, spec.level)
    out_dir = Path(spec.out_dir or spec.inputs[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in spec.formats:
        path = out_dir / "report.csv"
        path.write_text(to_csv(rows))
        written.append(path)
    if "markdown" in spec.formats:
        path = out_dir / "report.md"
        path.write_text(to_markdown(rows, spec.group_by))
        written.append(path)
    if "plot" in spec.formats:
        written.extend(plot_continual(records, out_dir, spec.level))
    return written
