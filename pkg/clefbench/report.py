"""Aggregate the reports of a run directory into report.md and report.csv"""
import csv
import glob
import io
import logging
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from clefbench import utilities
from clefbench.errors import ArtifactError, ValidationError
from clefbench.metrics import EvalReport

logger = logging.getLogger("REPORT")

REPORT_COLUMNS = (
    "cell", "scorer", "seeds",
    "accuracy_mean", "accuracy_min", "accuracy_max",
    "map_mean", "map_min", "map_max",
)
_REPORT_NAME = re.compile(r"report-(\w+)\.json$")


@dataclass
class RunSummary:
    rows: list = field(default_factory=list)
    # (cell, scorer) -> per-class AP averaged over seeds
    per_class: OrderedDict = field(default_factory=OrderedDict)
    missing: list = field(default_factory=list)

    @property
    def empty(self):
        return not self.rows

    def to_markdown(self):
        if self.empty:
            return "no runs found\n"
        lines = ["# Run summary", "", _md_table(REPORT_COLUMNS, [
            [r[c] for c in REPORT_COLUMNS] for r in self.rows
        ]), ""]
        if self.per_class:
            num_classes = max(len(ap) for ap in self.per_class.values())
            header = ["cell", "scorer"] + [f"AP {k}" for k in range(num_classes)] + ["mAP"]
            rows = []
            for (cell, scorer), ap in self.per_class.items():
                known = [a for a in ap if a is not None]
                rows.append([cell, scorer] + ap + [float(np.mean(known)) if known else None])
            lines += ["## Per-class average precision (mean over seeds)", "",
                      _md_table(header, rows), ""]
        if self.missing:
            lines += ["## Missing artifacts", ""] + [f"- {m}" for m in self.missing] + [""]
        return "\n".join(lines)

    def to_csv(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([r[c] for c in REPORT_COLUMNS])
        return out.getvalue()


def _cell_text(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        lines.append("| " + " | ".join(_cell_text(v) for v in row) + " |")
    return "\n".join(lines)


def _runs_root(rundir):
    if not os.path.isdir(rundir):
        raise ArtifactError(f"run directory {rundir} not found")
    nested = os.path.join(rundir, "runs")
    return nested if os.path.isdir(nested) else rundir


def collect(rundir):
    """Read every seed-*/<cell>/report-*.json below rundir"""
    root = _runs_root(rundir)
    grouped = OrderedDict()
    missing = []
    for cell_dir in sorted(glob.glob(os.path.join(root, "seed-*", "*"))):
        if not os.path.isdir(cell_dir):
            continue
        cell = os.path.basename(cell_dir)
        for name in ("checkpoint.json", "train_log.json"):
            if not os.path.exists(os.path.join(cell_dir, name)):
                missing.append(os.path.join(cell_dir, name))
        report_files = sorted(glob.glob(os.path.join(cell_dir, "report-*.json")))
        if not report_files:
            missing.append(os.path.join(cell_dir, "report-*.json"))
        for path in report_files:
            scorer = _REPORT_NAME.search(path).group(1)
            try:
                report = EvalReport.load(path)
            except (ArtifactError, ValidationError, TypeError) as e:
                logger.warning(f"skipping {path}: {e}")
                missing.append(path)
                continue
            grouped.setdefault((cell, scorer), []).append(report)
    return grouped, missing


def summarize(rundir):
    grouped, missing = collect(rundir)
    summary = RunSummary(missing=missing)
    for (cell, scorer), reports in sorted(grouped.items()):
        acc = [r.accuracy for r in reports]
        maps = [r.map for r in reports]
        summary.rows.append({
            "cell": cell,
            "scorer": scorer,
            "seeds": " ".join(str(r.seed) for r in reports),
            "accuracy_mean": float(np.mean(acc)),
            "accuracy_min": float(min(acc)),
            "accuracy_max": float(max(acc)),
            "map_mean": float(np.mean(maps)),
            "map_min": float(min(maps)),
            "map_max": float(max(maps)),
        })
        per_class = []
        for k in range(len(reports[0].per_class_ap)):
            known = [r.per_class_ap[k] for r in reports if r.per_class_ap[k] is not None]
            per_class.append(float(np.mean(known)) if known else None)
        summary.per_class[(cell, scorer)] = per_class
    for m in missing:
        logger.warning(f"missing artifact {m}")
    return summary


def write_report(rundir):
    """Write report.md and report.csv into rundir; a partial summary is still
    written when artifacts are missing
    """
    summary = summarize(rundir)
    if summary.empty:
        logger.warning(f"no runs found in {rundir}")
    for name, text in (("report.md", summary.to_markdown()), ("report.csv", summary.to_csv())):
        path = os.path.join(rundir, name)
        with open(path, "w") as f:
            f.write(text)
        logger.info(f"Wrote {path} ({utilities.naturalsize(len(text))})")
    return summary
