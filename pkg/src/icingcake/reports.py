"""Per-trial records and the mean-with-std summary tables.

Summaries report accuracy as "mean (std)" with the sample (n-1) standard
deviation, formatted to 3 and 4 decimals, one row per configuration.
Per-trial CSV values round-trip exactly (repr formatting), so tables
re-emitted from a stored CSV match the live run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TRIALS_CSV_HEADER = ("trial,seed,acc_before,acc_after,"
                     "loss_before,loss_after,train_s,icing_s")
SUMMARY_CSV_HEADER = ("configuration,trials,mean_before,std_before,"
                      "mean_after,std_after")


@dataclass
class TrialReport:
    seed: int
    acc_before: float
    acc_after: float
    loss_before: float
    loss_after: float
    wall_time_train: float
    wall_time_icing: float

    def __post_init__(self):
        for name in ("acc_before", "acc_after"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        for name in ("wall_time_train", "wall_time_icing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class SummaryRow:
    configuration: str
    trials: int
    mean_before: float
    std_before: float
    mean_after: float
    std_after: float


@dataclass
class SummaryTable:
    rows: list


def sample_std(values):
    """Two-pass sample standard deviation (n-1 denominator); 0 for n < 2."""
    n = len(values)
    if n < 2:
        return 0.0
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


def summarize(configuration, reports):
    """Aggregate trial reports into a one-row summary table."""
    if not reports:
        raise ValueError("cannot summarize zero trial reports")
    before = [r.acc_before for r in reports]
    after = [r.acc_after for r in reports]
    row = SummaryRow(
        configuration=configuration,
        trials=len(reports),
        mean_before=sum(before) / len(before),
        std_before=sample_std(before),
        mean_after=sum(after) / len(after),
        std_after=sample_std(after),
    )
    return SummaryTable(rows=[row])


def format_cell(mean, std):
    return f"{mean:.3f} ({std:.4f})"


def trials_csv_lines(reports):
    lines = [TRIALS_CSV_HEADER]
    for i, r in enumerate(reports):
        lines.append(
            f"{i},{r.seed},{r.acc_before!r},{r.acc_after!r},"
            f"{r.loss_before!r},{r.loss_after!r},"
            f"{r.wall_time_train!r},{r.wall_time_icing!r}")
    return lines


def summary_csv_lines(table):
    lines = [SUMMARY_CSV_HEADER]
    for row in table.rows:
        lines.append(
            f"{row.configuration},{row.trials},{row.mean_before!r},"
            f"{row.std_before!r},{row.mean_after!r},{row.std_after!r}")
    return lines


def summary_markdown_lines(table):
    lines = [
        "| Configuration | Before | Icing on the Cake |",
        "| --- | --- | --- |",
    ]
    for row in table.rows:
        lines.append(
            f"| {row.configuration} "
            f"| {format_cell(row.mean_before, row.std_before)} "
            f"| {format_cell(row.mean_after, row.std_after)} |")
    return lines


def _write_lines(path, lines):
    try:
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise OSError(f"cannot write report {path}: {e}") from e


def emit_report(table, reports, fmt, out_dir):
    """Write report files of the requested format; returns written paths.

    csv: per-trial trials.csv plus summary.csv.  markdown: summary.md.
    """
    import os

    if not reports:
        raise ValueError("cannot emit a report with zero trials")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "csv":
        trials_path = os.path.join(out_dir, "trials.csv")
        _write_lines(trials_path, trials_csv_lines(reports))
        written.append(trials_path)
        summary_path = os.path.join(out_dir, "summary.csv")
        _write_lines(summary_path, summary_csv_lines(table))
        written.append(summary_path)
    elif fmt == "markdown":
        md_path = os.path.join(out_dir, "summary.md")
        _write_lines(md_path, summary_markdown_lines(table))
        written.append(md_path)
    else:
        raise ValueError(f"format must be csv or markdown, got {fmt!r}")
    return written


def read_trials_csv(path):
    """Parse a trials.csv back into TrialReport records."""
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != TRIALS_CSV_HEADER:
        raise ValueError(f"{path}: not a trials csv (bad header)")
    reports = []
    for ln in lines[1:]:
        fields = ln.split(",")
        if len(fields) != 8:
            raise ValueError(f"{path}: malformed row {ln!r}")
        reports.append(TrialReport(
            seed=int(fields[1]),
            acc_before=float(fields[2]),
            acc_after=float(fields[3]),
            loss_before=float(fields[4]),
            loss_after=float(fields[5]),
            wall_time_train=float(fields[6]),
            wall_time_icing=float(fields[7]),
        ))
    return reports
