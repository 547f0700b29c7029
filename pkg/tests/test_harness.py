from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seer_sim import harness as H
from seer_sim import predictor as P
from seer_sim import report as R
from seer_sim.harness import EvalMetrics, MatchRule, classify, evaluate
from seer_sim.predictor import Alert, Hyperparams
from seer_sim.scenario import generate, hyperparams, split_counts
from seer_sim.trace import MetricKind, ResourceKind, ViolationEvent

EVENTS = [ViolationEvent(100, 150, 2, ResourceKind.CPU_SHARE), ViolationEvent(400, 460, 0, ResourceKind.LLC_CAPACITY),
          ViolationEvent(700, 720, 1, ResourceKind.NET_BANDWIDTH)]
RULE = MatchRule(50)


def test_split_arithmetic():
    assert split_counts(50, 0.7) == (35, 15)
    assert split_counts(8, 0.7) == (6, 2)


def test_perfect_oracle_alerts():
    alerts = [Alert(e.onset_tick - 10, e.culprit, 0.9) for e in EVENTS]
    m = evaluate(alerts, EVENTS, RULE, 1000)
    assert (m.detection_accuracy, m.culprit_accuracy, m.false_positive_rate) == (1.0, 1.0, 0.0)


def test_zero_alerts():
    m = evaluate([], EVENTS, RULE, 1000)
    assert m.detection_accuracy == 0.0 and m.false_negative_rate == 1.0


def test_alert_at_onset_does_not_count():
    alerts = [Alert(e.onset_tick, e.culprit, 0.9) for e in EVENTS]
    m = evaluate(alerts, EVENTS, RULE, 1000)
    assert m.detection_accuracy == 0.0 and m.n_false_alerts == 3
    assert m.false_positive_rate == pytest.approx(3.0)


def test_match_window_edges():
    assert RULE.matches(Alert(50, 0, 1.0), EVENTS[0])
    assert not RULE.matches(Alert(49, 0, 1.0), EVENTS[0])
    assert RULE.matches(Alert(99, 0, 1.0), EVENTS[0])


def test_culprit_uses_first_matching_alert():
    alerts = [Alert(60, 1, 0.9), Alert(90, 2, 0.9)]
    m = evaluate(alerts, EVENTS[:1], RULE, 1000)
    assert m.detection_accuracy == 1.0 and m.culprit_accuracy == 0.0


alert_st = st.builds(Alert, st.integers(0, 1000), st.integers(0, 3), st.floats(0.5, 1.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(alert_st, max_size=30), st.integers(1, 120))
def test_every_alert_classified_once(alerts, h):
    c = classify(alerts, EVENTS, MatchRule(h))
    assert len(c.matched) + len(c.false_alerts) == len(alerts)
    assert sorted(map(id, c.matched + c.false_alerts)) == sorted(map(id, alerts))
    m = evaluate(alerts, EVENTS, MatchRule(h), 1000)
    assert m.detection_accuracy + m.false_negative_rate == 1.0
    for v in (m.detection_accuracy, m.culprit_accuracy, m.false_negative_rate):
        assert 0.0 <= v <= 1.0
    assert m.n_detected <= m.n_events


def test_zero_injections_give_no_events(tiny_cfg):
    cfg = replace(tiny_cfg, episodes=3, intensity=(0.0, 0.0), benign_intensity=(0.0, 0.0))
    ds = generate(cfg, seed=5)
    assert all(ep.events == [] for ep in ds.episodes)
    prep = H.prepare(ds, MetricKind.QUEUE_DEPTH)
    assert not prep.y_train.any()


def test_generate_is_deterministic(tiny_cfg):
    cfg = replace(tiny_cfg, episodes=2)
    a, b = generate(cfg, 7), generate(cfg, 7)
    assert [e.records for e in a.episodes] == [e.records for e in b.episodes]
    assert a.qos == b.qos


def test_no_episode_straddles_split(tiny_ds):
    tr, _ = tiny_ds.split_streams("train")
    te, _ = tiny_ds.split_streams("test")
    assert max(r.tick for r in tr) < min(r.tick for r in te)
    assert len(tiny_ds.train) + len(tiny_ds.test) == len(tiny_ds.episodes)


def test_compare_has_one_row_per_metric(tiny_ds, tmp_path):
    rows = H.compare_metrics(tiny_ds, replace(hyperparams(tiny_ds.cfg), epochs=1))
    assert [r.metric for r in rows] == list(H.METRICS)
    R.write_compare(tmp_path, rows)
    lines = (tmp_path / "compare_v1.csv").read_text().splitlines()
    assert len(lines) == 5


def test_latency_cdf_shape():
    m = P.init(10, Hyperparams())
    cdf = H.latency_cdf(m, 1000)
    assert len(cdf.seconds) == 1000
    assert (np.diff(cdf.seconds) >= 0).all()
    assert (np.diff(cdf.cdf()) > 0).all() and cdf.cdf()[-1] == 1.0
    t = cdf.table()
    assert t["p50"] <= t["p90"] <= t["p99"] <= t["max"]
    with pytest.raises(ValueError):
        H.latency_cdf(m, 999)


def test_sweep_single_size_and_order(tiny_cfg):
    cfg = replace(tiny_cfg, episodes=4)
    hyper = replace(hyperparams(cfg), epochs=1)
    rows = H.scalability_sweep(cfg, [8], 2, hyper)
    assert len(rows) == 1 and rows[0].n_services == 8
    with pytest.raises(ValueError):
        H.scalability_sweep(cfg, [20, 10], 2, hyper)


def test_empty_reports_are_header_only(tmp_path):
    R.write_sweep(tmp_path, [])
    R.write_compare(tmp_path, [])
    R.write_diagnosis(tmp_path, {})
    for name in ("sweep_v1.csv", "compare_v1.csv", "diagnosis_v1.csv"):
        assert len((tmp_path / name).read_text().splitlines()) == 1
    assert (tmp_path / "sweep_v1.dat").read_text().startswith("#")


def test_reports_are_byte_identical_on_rewrite(tmp_path):
    rows = [H.SweepRow(10, EvalMetrics(0.9, 0.8, 1.25, 0.1 + 0.2, 10, 9, 12, 2)),
            H.SweepRow(20, EvalMetrics(1.0, 1 / 3, 0.0, 0.0, 12, 12, 12, 0))]
    R.write_sweep(tmp_path / "a", rows)
    R.write_sweep(tmp_path / "b", rows)
    for name in ("sweep_v1.csv", "sweep_v1.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # repr floats round-trip
    assert "0.30000000000000004" in (tmp_path / "a" / "sweep_v1.csv").read_text()


def test_report_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        R.write_csv(blocker / "sub" / "x.csv", ("a",), [])
