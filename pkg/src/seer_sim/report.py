"""CSV and gnuplot .dat writers for every experiment. Output is a pure function of the results."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

from .harness import CompareRow, DiagnosisRow, EvalMetrics, LatencyCdf, LoopSuite, SweepRow
from .mitigator import OUTCOMES, ClosedLoopRun, timeline_rows

FORMAT_VERSION = "v1"

EVAL_COLUMNS = ("detection_accuracy", "culprit_accuracy", "false_positive_rate", "false_negative_rate",
                "n_events", "n_detected", "n_alerts", "n_false_alerts")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "label"):
        return v.label
    if hasattr(v, "value"):
        return str(v.value)
    return "" if v is None else str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def write_dat(path, header: Sequence[str], rows: Iterable[Sequence], comment: str = "") -> Path:
    """Whitespace separated columns with a '#' header, ready for gnuplot."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if comment:
                for line in comment.splitlines():
                    fh.write(f"# {line}\n")
            fh.write("# " + " ".join(header) + "\n")
            for row in rows:
                fh.write(" ".join(_cell(v) or "-" for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _eval_cells(m: EvalMetrics) -> list:
    return [getattr(m, c) for c in EVAL_COLUMNS]


def write_evaluation(out_dir, metrics: EvalMetrics, label: str = "QueueDepth") -> list[Path]:
    out_dir = Path(out_dir)
    header = ("metric",) + EVAL_COLUMNS
    rows = [[label] + _eval_cells(metrics)]
    return [write_csv(out_dir / f"evaluate_{FORMAT_VERSION}.csv", header, rows)]


def write_compare(out_dir, rows: Sequence[CompareRow]) -> list[Path]:
    out_dir = Path(out_dir)
    header = ("metric",) + EVAL_COLUMNS + ("initial_loss", "final_loss")
    table = [[r.metric.value] + _eval_cells(r.metrics) + [r.initial_loss, r.final_loss] for r in rows]
    dat = [[i, r.metric.value, r.metrics.detection_accuracy, r.metrics.culprit_accuracy]
           for i, r in enumerate(rows)]
    return [write_csv(out_dir / f"compare_{FORMAT_VERSION}.csv", header, table),
            write_dat(out_dir / f"compare_{FORMAT_VERSION}.dat",
                      ("index", "metric", "detection", "culprit"), dat,
                      "detection and culprit accuracy per input metric")]


def write_sweep(out_dir, rows: Sequence[SweepRow]) -> list[Path]:
    out_dir = Path(out_dir)
    header = ("n_services",) + EVAL_COLUMNS
    table = [[r.n_services] + _eval_cells(r.metrics) for r in rows]
    dat = [[r.n_services, r.metrics.detection_accuracy, r.metrics.culprit_accuracy] for r in rows]
    return [write_csv(out_dir / f"sweep_{FORMAT_VERSION}.csv", header, table),
            write_dat(out_dir / f"sweep_{FORMAT_VERSION}.dat", ("n_services", "detection", "culprit"), dat,
                      "accuracy versus number of microservices")]


LATENCY_NOTE = ("per-snapshot wall time of featurization plus one forward pass, in seconds; "
                "this is a wall-clock measurement and differs between runs")


def write_latency(out_dir, cdfs: Sequence[LatencyCdf]) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    summary = []
    for c in cdfs:
        t = c.table()
        summary.append([c.n_services, len(c.seconds), t["p50"], t["p90"], t["p99"], t["max"]])
        rows = list(zip(c.seconds.tolist(), c.cdf().tolist()))
        paths.append(write_dat(out_dir / f"latency_cdf_n{c.n_services}_{FORMAT_VERSION}.dat",
                               ("seconds", "cdf"), rows, LATENCY_NOTE))
    paths.append(write_csv(out_dir / f"latency_summary_{FORMAT_VERSION}.csv",
                           ("n_services", "snapshots", "p50_s", "p90_s", "p99_s", "max_s"), summary))
    return paths


TIMELINE_COLUMNS = ("tick", "p99", "qos_target", "alerts", "actions")


def write_timeline(path, run: ClosedLoopRun) -> Path:
    rows = [(t, (None if p != p else p), q, a, c) for t, p, q, a, c in timeline_rows(run)]
    return write_csv(path, TIMELINE_COLUMNS, rows)


def summary_block(suite: LoopSuite) -> str:
    mode = "on" if suite.mitigate_on else "off"
    lines = [f"# closed loop summary {FORMAT_VERSION}",
             f"mitigation {mode}", f"diagnosis {suite.mode.value}",
             "episode,outcome,anticipated,first_alert,actions,drops,over_target_after_onset"]
    for e in suite.episodes:
        first = e.run.alerts[0].tick if e.run.alerts else ""
        lines.append(f"{e.index},{e.outcome},{int(e.anticipated)},{first},{len(e.run.actions)},"
                     f"{e.run.drops},{int(e.over_after_onset)}")
    counts = suite.outcome_counts()
    lines.append("anticipated_outcomes " + " ".join(f"{k}={counts[k]}" for k in OUTCOMES))
    lines.append(f"anticipated_success_rate {suite.success_rate()!r}")
    return "\n".join(lines) + "\n"


def write_closed_loop(out_dir, suite: LoopSuite) -> list[Path]:
    tag = f"run_{'on' if suite.mitigate_on else 'off'}_{suite.mode.value.lower()}"
    base = Path(out_dir) / tag
    paths = []
    for e in suite.episodes:
        paths.append(write_timeline(base / f"timeline_ep{e.index:03d}_{FORMAT_VERSION}.csv", e.run))
        actions = [(a.tick, a.service, a.resource, a.old_share, a.new_share, int(a.partitioned), a.step)
                   for a in e.run.actions]
        paths.append(write_csv(base / f"actions_ep{e.index:03d}_{FORMAT_VERSION}.csv",
                               ("tick", "service", "resource", "old_share", "new_share", "partitioned", "step"),
                               actions))
    summary = base / f"summary_{FORMAT_VERSION}.txt"
    try:
        summary.parent.mkdir(parents=True, exist_ok=True)
        summary.write_text(summary_block(suite), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {summary}: {exc.strerror or exc}") from exc
    paths.append(summary)
    return paths


def write_diagnosis(out_dir, mode_rows: dict[str, Sequence[DiagnosisRow]]) -> list[Path]:
    rows = []
    for mode, rs in mode_rows.items():
        for r in rs:
            rows.append((mode, r.episode, r.service, r.injected, r.diagnosed, r.probe_cost))
    return [write_csv(Path(out_dir) / f"diagnosis_{FORMAT_VERSION}.csv",
                      ("mode", "episode", "service", "injected", "diagnosed", "probe_cost"), rows)]
