"""Machine-readable experiment reports and plot-data emission.

A report is a list of runs; each run is one named curve. The report
file holds one tab-separated key=value record per line and round-trips
exactly (floats are written with repr). Each curve additionally gets a
two-column tab-separated plot-data file; those contain only x/y values,
so reruns with the same seed reproduce them byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import FormatError


@dataclass
class RunRecord:
    experiment_id: str
    config_digest: str  # hex
    metric: str
    x: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise FormatError("run record x/y length mismatch")


@dataclass
class Report:
    runs: list[RunRecord] = field(default_factory=list)

    def add(self, experiment_id, config_digest, metric, x, y, wall_times=()):
        self.runs.append(
            RunRecord(
                experiment_id=experiment_id,
                config_digest=config_digest,
                metric=metric,
                x=[float(v) for v in x],
                y=[float(v) for v in y],
                wall_times=[float(v) for v in wall_times],
            )
        )


def _fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> list[float]:
    if text == "":
        return []
    return [float(v) for v in text.split(",")]


def emit_report(report: Report, out_dir: str) -> list[str]:
    """Write the report file plus one plot-data file per run; returns the
    written paths. File names embed the experiment id and config digest."""
    os.makedirs(out_dir, exist_ok=True)
    if not report.runs:
        raise FormatError("refusing to emit an empty report")
    exp_id = report.runs[0].experiment_id
    digest8 = report.runs[0].config_digest[:8]
    paths = []
    report_path = os.path.join(out_dir, f"{exp_id}_{digest8}.report")
    with open(report_path, "w", encoding="utf-8") as f:
        for run in report.runs:
            fields = [
                f"experiment={run.experiment_id}",
                f"digest={run.config_digest}",
                f"metric={run.metric}",
                f"x={_fmt_floats(run.x)}",
                f"y={_fmt_floats(run.y)}",
                f"wall={_fmt_floats(run.wall_times)}",
            ]
            f.write("\t".join(fields) + "\n")
    paths.append(report_path)
    for run in report.runs:
        plot_path = os.path.join(out_dir, f"{run.experiment_id}_{digest8}_{run.metric}.tsv")
        with open(plot_path, "w", encoding="utf-8") as f:
            for xv, yv in zip(run.x, run.y):
                f.write(f"{xv!r}\t{yv!r}\n")
        paths.append(plot_path)
    return paths


def parse_report(path: str) -> Report:
    report = Report()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            record: dict[str, str] = {}
            for cell in line.split("\t"):
                if "=" not in cell:
                    raise FormatError(f"{path}:{line_no}: malformed cell {cell!r}")
                key, value = cell.split("=", 1)
                record[key] = value
            try:
                report.runs.append(
                    RunRecord(
                        experiment_id=record["experiment"],
                        config_digest=record["digest"],
                        metric=record["metric"],
                        x=_parse_floats(record["x"]),
                        y=_parse_floats(record["y"]),
                        wall_times=_parse_floats(record["wall"]),
                    )
                )
            except KeyError as exc:
                raise FormatError(f"{path}:{line_no}: missing field {exc}") from None
    return report
