"""Core trace types, featurization and the on-disk trace/events formats."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

TRACE_HEADER = "# seer-sim trace v1"
TRACE_COLUMNS = "tick,service,queue_depth,cpu_util,lat_p50,lat_p99,lat_rate"
EVENTS_COLUMNS = "onset_tick,end_tick,culprit,resource"


class MalformedTrace(ValueError):
    """A per-tick snapshot is missing records or has duplicates."""


class TraceFormatError(ValueError):
    """Parse failure in a trace or events file."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class MetricKind(enum.Enum):
    QUEUE_DEPTH = "QueueDepth"
    CPU_UTIL = "CpuUtil"
    LATENCY = "Latency"
    LATENCY_RATE = "LatencyRate"

    @classmethod
    def parse(cls, text: str) -> "MetricKind":
        for kind in cls:
            if kind.value.lower() == text.lower() or kind.name.lower() == text.lower():
                return kind
        raise ValueError(f"unknown metric kind {text!r}")


class ResourceKind(enum.IntEnum):
    # Declaration order is the tie-break order for counter diagnosis.
    CPU_SHARE = 0
    MEM_CAPACITY = 1
    MEM_BANDWIDTH = 2
    NET_BANDWIDTH = 3
    IO_BANDWIDTH = 4
    LLC_CAPACITY = 5

    @property
    def label(self) -> str:
        return _RESOURCE_LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "ResourceKind":
        key = text.strip().lower().replace("_", "")
        for kind in cls:
            if key in (kind.label.lower(), kind.name.lower().replace("_", "")):
                return kind
        raise ValueError(f"unknown resource kind {text!r}")


_RESOURCE_LABELS = {
    ResourceKind.CPU_SHARE: "CpuShare",
    ResourceKind.MEM_CAPACITY: "MemCapacity",
    ResourceKind.MEM_BANDWIDTH: "MemBandwidth",
    ResourceKind.NET_BANDWIDTH: "NetBandwidth",
    ResourceKind.IO_BANDWIDTH: "IoBandwidth",
    ResourceKind.LLC_CAPACITY: "LlcCapacity",
}
RESOURCES = tuple(ResourceKind)


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    service: int
    queue_depth: int
    cpu_util: float
    latency_p50: float
    latency_p99: float
    latency_rate: float

    def __post_init__(self):
        if self.queue_depth < 0:
            raise ValueError("queue_depth must be >= 0")
        if not 0.0 <= self.cpu_util <= 1.0:
            raise ValueError(f"cpu_util out of range: {self.cpu_util}")
        if self.latency_p50 > self.latency_p99:
            raise ValueError("latency_p50 exceeds latency_p99")

    def metric(self, kind: MetricKind) -> float:
        if kind is MetricKind.QUEUE_DEPTH:
            return float(self.queue_depth)
        if kind is MetricKind.CPU_UTIL:
            return self.cpu_util
        if kind is MetricKind.LATENCY:
            return self.latency_p99
        return self.latency_rate


@dataclass(frozen=True)
class ViolationEvent:
    onset_tick: int
    end_tick: int
    culprit: int
    resource: ResourceKind

    def __post_init__(self):
        if self.onset_tick >= self.end_tick:
            raise ValueError("onset_tick must precede end_tick")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature z-score parameters, computed on the training split."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, inputs: np.ndarray) -> "NormalizationStats":
        inputs = np.asarray(inputs, dtype=float)
        return cls(tuple(inputs.mean(axis=0).tolist()), tuple(inputs.std(axis=0).tolist()))

    @classmethod
    def identity(cls, n: int) -> "NormalizationStats":
        return cls((0.0,) * n, (1.0,) * n)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean)
        std = np.asarray(self.std)
        safe = np.where(std > 0, std, 1.0)
        return np.where(std > 0, (raw - mean) / safe, 0.0)


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray
    label: np.ndarray


def snapshot_values(records_at_tick: Sequence[TraceRecord], kind: MetricKind, n: int) -> np.ndarray:
    """Order one tick's records by service id and pull out the raw metric."""
    values = np.empty(n)
    seen = [False] * n
    for rec in records_at_tick:
        if not 0 <= rec.service < n:
            raise MalformedTrace(f"service {rec.service} outside 0..{n - 1}")
        if seen[rec.service]:
            raise MalformedTrace(f"duplicate record for service {rec.service}")
        seen[rec.service] = True
        values[rec.service] = rec.metric(kind)
    if not all(seen):
        missing = [i for i, s in enumerate(seen) if not s]
        raise MalformedTrace(f"missing records for services {missing}")
    return values


def featurize(records_at_tick: Sequence[TraceRecord], kind: MetricKind,
              norm: NormalizationStats) -> np.ndarray:
    return norm.apply(snapshot_values(records_at_tick, kind, len(norm.mean)))


def label_window(events: Iterable[ViolationEvent], tick: int, horizon: int, n: int) -> np.ndarray:
    """Entry k is true iff a violation with culprit k starts in (tick, tick + horizon]."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    label = np.zeros(n, dtype=bool)
    for ev in events:
        if tick < ev.onset_tick <= tick + horizon:
            label[ev.culprit] = True
    return label


def group_by_tick(records: Iterable[TraceRecord]) -> Iterator[tuple[int, list[TraceRecord]]]:
    """Yield (tick, records) for consecutive runs of equal tick."""
    batch: list[TraceRecord] = []
    current = None
    for rec in records:
        if current is not None and rec.tick != current:
            yield current, batch
            batch = []
        current = rec.tick
        batch.append(rec)
    if batch:
        yield current, batch


def metric_matrix(records: Sequence[TraceRecord], n: int, kind: MetricKind) -> tuple[np.ndarray, np.ndarray]:
    """Raw metric values as a (ticks, n) matrix plus the tick index."""
    ticks = []
    rows = []
    for tick, batch in group_by_tick(records):
        ticks.append(tick)
        rows.append(snapshot_values(batch, kind, n))
    if not rows:
        return np.zeros((0, n)), np.zeros(0, dtype=int)
    return np.vstack(rows), np.asarray(ticks)


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(x))


def write_trace(path, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n" + TRACE_COLUMNS + "\n")
        for r in records:
            fh.write(f"{r.tick},{r.service},{r.queue_depth},{_fmt(r.cpu_util)},"
                     f"{_fmt(r.latency_p50)},{_fmt(r.latency_p99)},{_fmt(r.latency_rate)}\n")


def _check_header(path, fh, columns: str) -> int:
    first = fh.readline().rstrip("\n")
    if not first.startswith("# seer-sim"):
        raise TraceFormatError(path, 1, "missing '# seer-sim ...' version line")
    if first != TRACE_HEADER:
        raise TraceFormatError(path, 1, f"unsupported version {first!r}, expected {TRACE_HEADER!r}")
    second = fh.readline().rstrip("\n")
    if second != columns:
        raise TraceFormatError(path, 2, f"bad column header {second!r}")
    return 2


def _field(path, lineno: int, name: str, raw: str, conv):
    try:
        value = conv(raw)
    except ValueError:
        raise TraceFormatError(path, lineno, f"field {name}: cannot parse {raw!r}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise TraceFormatError(path, lineno, f"field {name}: non-finite value")
    return value


def read_trace(path) -> Iterator[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        lineno = _check_header(path, fh, TRACE_COLUMNS)
        for line in fh:
            lineno += 1
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise TraceFormatError(path, lineno, f"expected 7 fields, got {len(parts)}")
            names = ("tick", "service", "queue_depth", "cpu_util", "lat_p50", "lat_p99", "lat_rate")
            convs = (int, int, int, float, float, float, float)
            vals = [_field(path, lineno, n, p, c) for n, p, c in zip(names, parts, convs)]
            if vals[2] < 0:
                raise TraceFormatError(path, lineno, "field queue_depth: negative")
            if not 0.0 <= vals[3] <= 1.0:
                raise TraceFormatError(path, lineno, f"field cpu_util: {vals[3]} outside [0, 1]")
            if vals[4] > vals[5]:
                raise TraceFormatError(path, lineno, "field lat_p50: exceeds lat_p99")
            yield TraceRecord(*vals)


def write_events(path, events: Iterable[ViolationEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n" + EVENTS_COLUMNS + "\n")
        for ev in events:
            fh.write(f"{ev.onset_tick},{ev.end_tick},{ev.culprit},{ev.resource.label}\n")


def read_events(path) -> list[ViolationEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        lineno = _check_header(path, fh, EVENTS_COLUMNS)
        for line in fh:
            lineno += 1
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise TraceFormatError(path, lineno, f"expected 4 fields, got {len(parts)}")
            onset = _field(path, lineno, "onset_tick", parts[0], int)
            end = _field(path, lineno, "end_tick", parts[1], int)
            culprit = _field(path, lineno, "culprit", parts[2], int)
            resource = _field(path, lineno, "resource", parts[3], ResourceKind.parse)
            if onset >= end:
                raise TraceFormatError(path, lineno, "field end_tick: not after onset_tick")
            out.append(ViolationEvent(onset, end, culprit, resource))
    return out


def trace_paths(out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    return out_dir / f"{stem}.trace.csv", out_dir / f"{stem}.events.csv"
