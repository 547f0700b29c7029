"""Experiment suite: dataset assembly, evaluation, metric comparison, latency CDFs, scaling sweep."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import predictor as P
from .mitigator import (OUTCOMES, ClosedLoopRun, DiagnosisMode, InconclusiveDiagnosis, MitigationPolicy,
                        classify_outcome, closed_loop, diagnose_counters_live, diagnose_probe,
                        violation_onsets)
from .predictor import Alert, Hyperparams, Model, StreamingInference
from .qos import QosSpec
from .scenario import Dataset, Episode, ScenarioConfig, generate
from .sim import ContentionEvent, Simulator, _derive_seed, build
from .trace import (MetricKind, NormalizationStats, ResourceKind, TraceRecord, ViolationEvent,
                    group_by_tick, label_window, metric_matrix)

METRICS = (MetricKind.QUEUE_DEPTH, MetricKind.LATENCY_RATE, MetricKind.LATENCY, MetricKind.CPU_UTIL)


@dataclass(frozen=True)
class MatchRule:
    """An alert matches an event iff onset - horizon <= alert.tick < onset."""
    horizon: int

    def matches(self, alert: Alert, ev: ViolationEvent) -> bool:
        return ev.onset_tick - self.horizon <= alert.tick < ev.onset_tick


@dataclass(frozen=True)
class EvalMetrics:
    detection_accuracy: float
    culprit_accuracy: float
    false_positive_rate: float   # unmatched alerts per 1000 ticks
    false_negative_rate: float
    n_events: int = 0
    n_detected: int = 0
    n_alerts: int = 0
    n_false_alerts: int = 0


@dataclass
class Classified:
    """Per-event first matching alert, every matching alert, and the unmatched leftovers."""
    first_match: list[Alert | None]
    matched: list[Alert]
    false_alerts: list[Alert]


def classify(alerts: Sequence[Alert], events: Sequence[ViolationEvent], rule: MatchRule) -> Classified:
    events = sorted(events, key=lambda e: e.onset_tick)
    onsets = np.array([e.onset_tick for e in events], dtype=np.int64)
    first: list[Alert | None] = [None] * len(events)
    matched, false = [], []
    for a in sorted(alerts, key=lambda a: (a.tick, a.service)):
        # earliest event whose onset is after the alert; it is the only candidate
        i = int(np.searchsorted(onsets, a.tick, side="right"))
        if i < len(events) and rule.matches(a, events[i]):
            matched.append(a)
            if first[i] is None:
                first[i] = a
        else:
            false.append(a)
    return Classified(first, matched, false)


def evaluate(alerts: Sequence[Alert], events: Sequence[ViolationEvent], rule: MatchRule,
             n_ticks: int) -> EvalMetrics:
    events = sorted(events, key=lambda e: e.onset_tick)
    c = classify(alerts, events, rule)
    detected = [(a, e) for a, e in zip(c.first_match, events) if a is not None]
    n_ev = len(events)
    det = len(detected) / n_ev if n_ev else 0.0
    cul = sum(a.service == e.culprit for a, e in detected) / len(detected) if detected else 0.0
    fp = 1000.0 * len(c.false_alerts) / n_ticks if n_ticks else 0.0
    return EvalMetrics(det, cul, fp, 1.0 - det, n_ev, len(detected), len(alerts), len(c.false_alerts))


# ---------------------------------------------------------------- datasets
def arrays_for(records: Sequence[TraceRecord], events: Sequence[ViolationEvent], n: int,
               kind: MetricKind, horizon: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw, ticks = metric_matrix(records, n, kind)
    y = np.zeros((len(ticks), n))
    for i, t in enumerate(ticks.tolist()):
        y[i] = label_window(events, t, horizon, n)
    return raw, y, ticks


@dataclass
class Prepared:
    kind: MetricKind
    norm: NormalizationStats
    x_train: np.ndarray
    y_train: np.ndarray
    test_records: list[TraceRecord]
    test_events: list[ViolationEvent]
    test_ticks: int


def prepare(ds: Dataset, kind: MetricKind) -> Prepared:
    n = ds.graph.n
    h = ds.cfg.horizon
    tr_rec, tr_ev = ds.split_streams("train")
    te_rec, te_ev = ds.split_streams("test")
    raw, y, _ = arrays_for(tr_rec, tr_ev, n, kind, h)
    norm = NormalizationStats.fit(raw)
    return Prepared(kind, norm, norm.apply(raw), y, te_rec, te_ev,
                    len(ds.test) * ds.cfg.episode_ticks)


def fit(ds: Dataset, kind: MetricKind, hyper: Hyperparams) -> tuple[Model, list[float], Prepared]:
    prep = prepare(ds, kind)
    model = P.init(ds.graph.n, hyper, metric=kind, norm=prep.norm, horizon=ds.cfg.horizon)
    model, curve = P.train(model, (prep.x_train, prep.y_train), hyper)
    return model, curve, prep


def stream_alerts(model: Model, records: Iterable[TraceRecord], fire_threshold: float,
                  engine: StreamingInference | None = None) -> list[Alert]:
    return list(P.infer_stream(model, group_by_tick(records), fire_threshold, engine=engine))


def evaluate_model(model: Model, prep: Prepared, fire_threshold: float = 0.5) -> EvalMetrics:
    alerts = stream_alerts(model, prep.test_records, fire_threshold)
    return evaluate(alerts, prep.test_events, MatchRule(model.horizon), prep.test_ticks)


# ---------------------------------------------------------------- experiments
@dataclass
class CompareRow:
    metric: MetricKind
    metrics: EvalMetrics
    initial_loss: float
    final_loss: float


def compare_metrics(ds: Dataset, hyper: Hyperparams, fire_threshold: float = 0.5) -> list[CompareRow]:
    """One model per input metric, same data and seed."""
    rows = []
    for kind in METRICS:
        model, curve, prep = fit(ds, kind, hyper)
        rows.append(CompareRow(kind, evaluate_model(model, prep, fire_threshold), curve[0], curve[-1]))
    return rows


@dataclass
class LatencyCdf:
    n_services: int
    seconds: np.ndarray          # sorted per-snapshot wall times

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.seconds, q))

    def table(self) -> dict[str, float]:
        return {"p50": self.percentile(50), "p90": self.percentile(90),
                "p99": self.percentile(99), "max": float(self.seconds[-1])}

    def cdf(self) -> np.ndarray:
        k = len(self.seconds)
        return np.arange(1, k + 1) / k


def synthetic_snapshots(n: int, count: int, seed: int) -> list[list[TraceRecord]]:
    rng = np.random.default_rng([seed, 7])
    depth = rng.poisson(3.0, size=(count, n))
    util = rng.uniform(0.0, 1.0, size=(count, n))
    lat = rng.exponential(5000.0, size=(count, n))
    return [[TraceRecord(t, m, int(depth[t, m]), float(util[t, m]), float(lat[t, m]) * 0.5,
                         float(lat[t, m]), 0.0) for m in range(n)] for t in range(count)]


def latency_cdf(model: Model, n_snapshots: int = 2000, seed: int = 0, warmup: int = 50) -> LatencyCdf:
    """Wall time of featurize + forward per snapshot, as the streaming loop measures it."""
    if n_snapshots < 1000:
        raise ValueError("latency CDF needs at least 1000 snapshots")
    snaps = synthetic_snapshots(model.n, n_snapshots + warmup, seed)
    engine = StreamingInference(model, fire_threshold=0.999999, dedup=True)
    for t, s in enumerate(snaps):
        engine.step(t, s)
    return LatencyCdf(model.n, np.sort(np.asarray(engine.latencies[warmup:])))


@dataclass
class SweepRow:
    n_services: int
    metrics: EvalMetrics


def scalability_sweep(cfg: ScenarioConfig, sizes: Sequence[int], seed: int, hyper: Hyperparams,
                      fire_threshold: float = 0.5, datasets: dict | None = None) -> list[SweepRow]:
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rows = []
    for n in sizes:
        ds = (datasets or {}).get(n) or generate(cfg.with_n(n), seed)
        model, _, prep = fit(ds, MetricKind.QUEUE_DEPTH, hyper)
        rows.append(SweepRow(n, evaluate_model(model, prep, fire_threshold)))
    return rows


# ---------------------------------------------------------------- closed loop
@dataclass
class EpisodeLoop:
    index: int
    injection: ContentionEvent
    run: ClosedLoopRun
    outcome: str
    anticipated: bool            # alert inside the horizon before a violation of the unmitigated run
    over_after_onset: bool       # every window from the first onset on exceeds the target


@dataclass
class LoopSuite:
    mitigate_on: bool
    mode: DiagnosisMode
    episodes: list[EpisodeLoop]

    def outcome_counts(self, only_anticipated: bool = True) -> dict[str, int]:
        out = {k: 0 for k in OUTCOMES}
        for e in self.episodes:
            if e.anticipated or not only_anticipated:
                out[e.outcome] += 1
        return out

    def success_rate(self) -> float:
        eps = [e for e in self.episodes if e.anticipated]
        if not eps:
            return 0.0
        return sum(e.outcome in ("prevented", "mitigated-late") for e in eps) / len(eps)


def loop_sim(ds: Dataset, index: int, injection: ContentionEvent | None) -> Simulator:
    sim = build(ds.graph, ds.cfg.sim, _derive_seed(ds.seed, "closed-loop", index))
    if injection is not None:
        sim.inject(injection)
    return sim


def sustained(ds: Dataset, ep: Episode) -> ContentionEvent:
    return replace(ep.injection, end_tick=ds.cfg.closed_loop_ticks)


def _anticipated(run: ClosedLoopRun, horizon: int, qos: QosSpec) -> tuple[bool, bool]:
    onsets = violation_onsets(run.window_ticks, run.window_p99, qos)
    if not onsets:
        return False, False
    first = onsets[0]
    hit = any(first - horizon <= a.tick < first for a in run.alerts)
    after = run.window_p99[run.window_ticks >= first]
    return hit, bool(after.size and (after > qos.target).all())


def closed_loop_suite(ds: Dataset, model: Model, policy: MitigationPolicy, mode: DiagnosisMode,
                      mitigate_on: bool, fire_threshold: float = 0.5,
                      episodes: Sequence[Episode] | None = None) -> LoopSuite:
    """Closed loop over the held-out episodes with contention held until the end of the run.

    Whether an episode was anticipated is judged on the unmitigated run, which
    replays the same random draws as the mitigated one up to the first action.
    """
    out = []
    ticks = ds.cfg.closed_loop_ticks
    for ep in episodes if episodes is not None else ds.test:
        inj = sustained(ds, ep)
        kw = dict(mode=mode, fire_threshold=fire_threshold)
        base = closed_loop(loop_sim(ds, ep.index, inj), model, policy, ds.qos, ticks, mitigate_on=False, **kw)
        hit, over = _anticipated(base, model.horizon, ds.qos)
        run = base if not mitigate_on else closed_loop(loop_sim(ds, ep.index, inj), model, policy,
                                                       ds.qos, ticks, mitigate_on=True, **kw)
        first = run.alerts[0].tick if run.alerts else None
        outcome = classify_outcome(run.window_ticks, run.window_p99, ds.qos, first)
        out.append(EpisodeLoop(ep.index, inj, run, outcome, hit, over))
    return LoopSuite(mitigate_on, mode, out)


# ---------------------------------------------------------------- diagnosis accuracy
@dataclass
class DiagnosisRow:
    episode: int
    injected: ResourceKind
    service: int
    diagnosed: ResourceKind | None
    probe_cost: int


def diagnosis_suite(ds: Dataset, mode: DiagnosisMode, lead: int = 10,
                    probe_duration: int = 1) -> list[DiagnosisRow]:
    """Diagnose the annotated culprit of every violating episode, `lead` ticks before onset
    (but after the contention began), the way an anticipating alert would."""
    rows = []
    for ep in ds.episodes:
        if not ep.events:
            continue
        ev = ep.events[0]
        at = max(ep.injection.start_tick + 1, ev.onset_tick - lead)
        sim = build(ds.graph, ds.cfg.sim, ep.seed)
        sim.inject(ep.injection)
        sim.run_until(at, sample=False)
        if mode is DiagnosisMode.PROBE:
            try:
                d = diagnose_probe(sim, ev.culprit, duration=probe_duration)
                rows.append(DiagnosisRow(ep.index, ep.injection.resource, ev.culprit, d.resource, d.probe_cost))
            except InconclusiveDiagnosis as exc:
                rows.append(DiagnosisRow(ep.index, ep.injection.resource, ev.culprit, None, exc.probe_cost))
        else:
            d = diagnose_counters_live(sim, ev.culprit)
            rows.append(DiagnosisRow(ep.index, ep.injection.resource, ev.culprit, d.resource, 0))
    return rows


def diagnosis_accuracy(rows: Sequence[DiagnosisRow]) -> float:
    if not rows:
        return 0.0
    return sum(r.diagnosed == r.injected for r in rows) / len(rows)
