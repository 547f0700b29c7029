"""End-to-end QoS targets and ground-truth violation detection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class QosSpec:
    target: float          # end-to-end p99 threshold, simulated µs
    window: int = 50       # R: requests per percentile window
    persistence: int = 2   # D: consecutive windows to open/close an episode

    def __post_init__(self):
        if self.target <= 0:
            raise ValueError("QoS target must be > 0")
        if self.window < 20:
            raise ValueError("QoS window must hold at least 20 requests")
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")


@dataclass(frozen=True)
class QosViolation:
    onset_tick: int
    end_tick: int
    ongoing: bool = False  # still open when the stream ended


def window_p99(stream: Sequence[tuple[int, float]], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Tumbling R-request windows: (tick of each window's last completion, p99)."""
    k = len(stream) // window
    if k == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    ticks = np.fromiter((stream[(i + 1) * window - 1][0] for i in range(k)), dtype=int, count=k)
    lat = np.fromiter((x[1] for x in stream[:k * window]), dtype=float, count=k * window)
    return ticks, np.percentile(lat.reshape(k, window), 99, axis=1)


def detect_violations(stream: Sequence[tuple[int, float]], qos: QosSpec) -> list[QosViolation]:
    """An episode opens on the D-th consecutive window whose p99 exceeds the target
    and closes on the D-th consecutive window back at or under it."""
    ticks, p99 = window_p99(stream, qos.window)
    out = []
    above = below = 0
    onset = None
    for t, p in zip(ticks.tolist(), p99.tolist()):
        if onset is None:
            above = above + 1 if p > qos.target else 0
            if above == qos.persistence:
                onset = t
                below = 0
        else:
            below = below + 1 if p <= qos.target else 0
            if below == qos.persistence:
                out.append(QosViolation(onset, max(t, onset + 1)))
                onset = None
                above = 0
    if onset is not None:
        last = int(ticks[-1]) + 1
        out.append(QosViolation(onset, max(last, onset + 1), ongoing=True))
    return out


def rolling_p99(stream: Sequence[tuple[int, float]], n_ticks: int, window: int) -> np.ndarray:
    """p99 over the last `window` completed requests as of the end of each tick (nan before any)."""
    out = np.full(n_ticks, np.nan)
    if not stream:
        return out
    ticks = np.fromiter((x[0] for x in stream), dtype=int, count=len(stream))
    lat = np.fromiter((x[1] for x in stream), dtype=float, count=len(stream))
    ends = np.searchsorted(ticks, np.arange(n_ticks), side="right")
    for t in range(n_ticks):
        e = ends[t]
        if e:
            out[t] = np.percentile(lat[max(0, e - window):e], 99)
    return out
