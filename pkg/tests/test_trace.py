import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seer_sim.trace import (MalformedTrace, MetricKind, NormalizationStats, ResourceKind, TraceFormatError,
                            TraceRecord, ViolationEvent, featurize, group_by_tick, label_window, read_events,
                            read_trace, write_events, write_trace)


def snap(depths, tick=0):
    return [TraceRecord(tick, i, d, 0.5, 10.0, 20.0, 0.0) for i, d in enumerate(depths)]


def test_enums_have_fixed_sizes():
    assert len(MetricKind) == 4
    assert len(ResourceKind) == 6


def test_featurize_mean_is_zero():
    norm = NormalizationStats((3.0, 3.0), (2.0, 1.0))
    assert featurize(snap([3, 3]), MetricKind.QUEUE_DEPTH, norm).tolist() == [0.0, 0.0]


def test_featurize_hand_zscores():
    norm = NormalizationStats((5.0,) * 3, (5.0,) * 3)
    out = featurize(snap([0, 5, 12]), MetricKind.QUEUE_DEPTH, norm)
    assert out == pytest.approx([-1.0, 0.0, 1.4])


def test_featurize_zero_std_emits_zero():
    norm = NormalizationStats((0.5, 0.2), (0.0, 0.1))
    out = featurize(snap([1, 1]), MetricKind.CPU_UTIL, norm)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(3.0)


@pytest.mark.parametrize("kind,field", [(MetricKind.QUEUE_DEPTH, "queue_depth"), (MetricKind.CPU_UTIL, "cpu_util"),
                                        (MetricKind.LATENCY, "latency_p99"),
                                        (MetricKind.LATENCY_RATE, "latency_rate")])
def test_featurize_selects_metric(kind, field):
    rec = TraceRecord(0, 0, 7, 0.25, 3.0, 9.0, -2.0)
    out = featurize([rec], kind, NormalizationStats.identity(1))
    assert out[0] == getattr(rec, field)


def test_featurize_rejects_missing_and_duplicate():
    norm = NormalizationStats.identity(3)
    with pytest.raises(MalformedTrace):
        featurize(snap([1, 2]), MetricKind.QUEUE_DEPTH, norm)
    recs = snap([1, 2, 3])
    recs[2] = TraceRecord(0, 1, 3, 0.5, 1.0, 2.0, 0.0)
    with pytest.raises(MalformedTrace):
        featurize(recs, MetricKind.QUEUE_DEPTH, norm)


def test_label_window_examples():
    assert not label_window([], 10, 50, 4).any()
    ev = ViolationEvent(11, 40, 2, ResourceKind.CPU_SHARE)
    assert label_window([ev], 10, 50, 4).tolist() == [False, False, True, False]
    # onset at the tick itself is already happening, not upcoming
    assert not label_window([ev], 11, 50, 4).any()
    # far edge of the horizon is inclusive
    assert label_window([ev], 11 - 50, 50, 4)[2]
    with pytest.raises(ValueError):
        label_window([ev], 0, 0, 4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 300), st.integers(0, 4)), max_size=6),
       st.integers(0, 300), st.integers(1, 80), st.integers(0, 40))
def test_label_window_monotone_in_horizon(evs, tick, h, extra):
    events = [ViolationEvent(o, o + 1, c, ResourceKind.IO_BANDWIDTH) for o, c in evs]
    small = label_window(events, tick, h, 5)
    big = label_window(events, tick, h + extra, 5)
    assert not (small & ~big).any()


def test_trace_round_trip_empty_and_single(tmp_path):
    p = tmp_path / "t.trace.csv"
    write_trace(p, [])
    assert list(read_trace(p)) == []
    rec = TraceRecord(3, 0, 2, 0.1 + 0.2, 1.0 / 3.0, 2.0 / 3.0, -1e-17)
    write_trace(p, [rec])
    assert list(read_trace(p)) == [rec]


def test_trace_rejects_out_of_range_cpu(tmp_path):
    p = tmp_path / "bad.trace.csv"
    write_trace(p, [TraceRecord(0, 0, 1, 0.5, 1.0, 2.0, 0.0)])
    text = p.read_text().replace(",0.5,", ",1.5,")
    p.write_text(text)
    with pytest.raises(TraceFormatError) as exc:
        list(read_trace(p))
    assert "cpu_util" in str(exc.value) and exc.value.line == 3


def test_trace_rejects_version_mismatch(tmp_path):
    p = tmp_path / "v.trace.csv"
    p.write_text("# seer-sim trace v9\ntick,service,queue_depth,cpu_util,lat_p50,lat_p99,lat_rate\n")
    with pytest.raises(TraceFormatError, match="version"):
        list(read_trace(p))


def test_events_round_trip(tmp_path):
    p = tmp_path / "e.events.csv"
    evs = [ViolationEvent(5, 9, 1, ResourceKind.LLC_CAPACITY), ViolationEvent(20, 31, 0, ResourceKind.MEM_CAPACITY)]
    write_events(p, evs)
    assert read_events(p) == evs
    write_events(p, [])
    assert read_events(p) == []


finite = st.floats(min_value=-1e9, max_value=1e9, allow_nan=False, allow_infinity=False)


@st.composite
def records(draw):
    n = draw(st.integers(1, 4))
    ticks = draw(st.integers(1, 4))
    out = []
    for t in range(ticks):
        for m in range(n):
            lo = draw(st.floats(0, 1e6, allow_nan=False))
            hi = lo + draw(st.floats(0, 1e6, allow_nan=False))
            out.append(TraceRecord(t, m, draw(st.integers(0, 10_000)), draw(st.floats(0, 1)), lo, hi, draw(finite)))
    return out


@settings(max_examples=40, deadline=None)
@given(records())
def test_trace_round_trip_is_identity(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "x.trace.csv"
    write_trace(p, recs)
    assert list(read_trace(p)) == recs


@settings(max_examples=30, deadline=None)
@given(records())
def test_featurize_is_pure(recs):
    n = max(r.service for r in recs) + 1
    norm = NormalizationStats.identity(n)
    for _, batch in group_by_tick(recs):
        a = featurize(batch, MetricKind.QUEUE_DEPTH, norm)
        b = featurize(list(reversed(batch)), MetricKind.QUEUE_DEPTH, norm)
        assert np.array_equal(a, b)
        # index i <-> service i
        assert a.tolist() == [float(r.queue_depth) for r in sorted(batch, key=lambda r: r.service)]
