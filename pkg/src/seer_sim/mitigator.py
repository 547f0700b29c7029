"""Resource diagnosis and allocation adjustment, plus the alert-driven closed loop."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .predictor import Alert, Model, StreamingInference
from .qos import QosSpec, rolling_p99, window_p99
from .sim import ContentionEvent, Simulator, _MEMORY
from .trace import RESOURCES, ResourceKind, TraceRecord, group_by_tick


class HeadroomExhausted(RuntimeError):
    pass


class InconclusiveDiagnosis(RuntimeError):
    pass


class DiagnosisMode(enum.Enum):
    COUNTERS = "Counters"
    PROBE = "Probe"

    @classmethod
    def parse(cls, text: str) -> "DiagnosisMode":
        t = text.strip().lower()
        for m in cls:
            if m.value.lower() == t:
                return m
        raise ValueError(f"unknown diagnosis mode {text!r} (counters|probe)")


@dataclass(frozen=True)
class HostStats:
    utilization: tuple[float, ...]   # indexed by ResourceKind

    def __post_init__(self):
        if len(self.utilization) != len(RESOURCES):
            raise ValueError(f"need {len(RESOURCES)} utilizations, got {len(self.utilization)}")
        if any(not u >= 0 for u in self.utilization):
            raise ValueError("utilizations must be >= 0")


@dataclass
class Diagnosis:
    service: int
    resource: ResourceKind
    mode: DiagnosisMode
    probe_cost: int = 0
    deltas: tuple[float, ...] | None = None
    # trace records produced while probing ran the live system forward
    records: list[TraceRecord] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if (self.probe_cost > 0) != (self.mode is DiagnosisMode.PROBE):
            raise ValueError("probe_cost must be > 0 exactly in probe mode")


def _default_partitioning() -> dict[ResourceKind, bool]:
    # cache and network get dedicated partitions, the rest are share resizes
    return {r: r in (ResourceKind.LLC_CAPACITY, ResourceKind.NET_BANDWIDTH) for r in RESOURCES}


@dataclass
class MitigationPolicy:
    step_factor: float = 1.25
    max_steps: int = 4
    use_partitioning: Mapping[ResourceKind, bool] = field(default_factory=_default_partitioning)
    settle_ticks: int = 5        # wait before escalating a step that has not cleared the alert

    def __post_init__(self):
        if not self.step_factor > 1:
            raise ValueError("step_factor must be > 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class AllocationAction:
    tick: int
    service: int
    resource: ResourceKind
    old_share: float
    new_share: float
    partitioned: bool
    step: int


# ---------------------------------------------------------------- diagnosis
def diagnose_counters(stats: HostStats) -> ResourceKind:
    """Most utilized resource; the first in declaration order wins ties."""
    best = 0
    for r, u in enumerate(stats.utilization):
        if u > stats.utilization[best]:
            best = r
    return ResourceKind(best)


def diagnose_counters_live(sim: Simulator, service: int) -> Diagnosis:
    stats = HostStats(tuple(sim.host_stats(service)))
    return Diagnosis(service, diagnose_counters(stats), DiagnosisMode.COUNTERS)


PROBE_SETTLE_TICKS = 5


def diagnose_probe(sim: Simulator, service: int, *, intensity: float = 0.1, duration: int = 1,
                   settle: int = PROBE_SETTLE_TICKS, floor: float = 1e-9) -> Diagnosis:
    """Serially run a small antagonist on each resource of the target's server.

    Each probe's effect is measured as the change in the target's accumulated
    in-system time against an unprobed copy of the system replaying the same
    random draws, so unrelated resources read exactly zero. The live system
    really does carry the probes and advances 6 x duration ticks.
    """
    if duration < 1:
        raise ValueError("probe duration must be >= 1 tick")
    server = sim.server_of(service)
    deltas = []
    records: list[TraceRecord] = []
    for r in RESOURCES:
        t0 = sim.tick
        probe = ContentionEvent(server, r, intensity, t0, t0 + duration)
        horizon = t0 + duration + settle
        base = copy.deepcopy(sim)
        probed = copy.deepcopy(sim)
        probed.inject(probe, probe=True)
        a0 = base.in_system_area(service)
        base.run_until(horizon, sample=False)
        probed.run_until(horizon, sample=False)
        d_base = base.in_system_area(service) - a0
        d_probe = probed.in_system_area(service) - a0
        deltas.append((d_probe - d_base) / max(d_base, 1.0))
        sim.inject(probe, probe=True)
        recs, _ = sim.run_until(t0 + duration)
        records.extend(recs)
    cost = len(RESOURCES) * duration
    best = int(np.argmax(deltas))
    if deltas[best] <= floor:
        err = InconclusiveDiagnosis(f"no probe moved service {service}'s latency above the noise floor")
        err.records = records
        err.probe_cost = cost
        raise err
    return Diagnosis(service, ResourceKind(best), DiagnosisMode.PROBE, cost, tuple(deltas), records)


# ---------------------------------------------------------------- actuation
def mitigate(sim: Simulator, diagnosis: Diagnosis, policy: MitigationPolicy, step: int = 1,
             audit: list[AllocationAction] | None = None) -> AllocationAction | None:
    """One allocation step for the diagnosed (service, resource).

    Partitioning sizes the partition at demand x step_factor, so a repeat step on an
    already sized partition changes nothing and returns None. Resizing multiplies
    the share each step.
    """
    m, r = diagnosis.service, ResourceKind(diagnosis.resource)
    state = sim.allocation()
    old = state.share[m][r]
    was_part = state.partitioned[m][r]
    if policy.use_partitioning.get(r, False):
        held = old if was_part else 0.0
        room = sim.free_partition(sim.server_of(m), r) + held
        new = min(sim.demand(m, r) * policy.step_factor, room)
        if was_part and new <= held + 1e-12:
            if room > held + 1e-12:
                return None
            raise HeadroomExhausted(f"server {sim.server_of(m)} has no free {r.label} partition space")
        if new <= 1e-12:
            raise HeadroomExhausted(f"server {sim.server_of(m)} has no free {r.label} partition space")
        part = True
    else:
        if was_part:
            raise HeadroomExhausted(f"service {m} {r.label} is partitioned; resize does not apply")
        if old >= 1.0 - 1e-12:
            raise HeadroomExhausted(f"service {m} {r.label} share already at 1")
        new = min(old * policy.step_factor, 1.0)
        part = False
    sim.set_allocation(m, r, new, part)
    action = AllocationAction(sim.tick, m, r, old, new, part, step)
    if audit is not None:
        audit.append(action)
    return action


# ---------------------------------------------------------------- closed loop
OUTCOMES = ("prevented", "mitigated-late", "violated", "missed", "quiet")


@dataclass
class ClosedLoopRun:
    qos: QosSpec
    ticks: int
    p99: np.ndarray                      # rolling window p99 per tick
    alerts: list[Alert]
    actions: list[AllocationAction]
    diagnoses: list[Diagnosis]
    errors: list[tuple[int, str]]        # (tick, message) for headroom / inconclusive events
    drops: int
    window_ticks: np.ndarray
    window_p99: np.ndarray

    def alert_counts(self) -> np.ndarray:
        c = np.zeros(self.ticks, dtype=int)
        for a in self.alerts:
            c[a.tick] += 1
        return c

    def action_counts(self) -> np.ndarray:
        c = np.zeros(self.ticks, dtype=int)
        for a in self.actions:
            c[a.tick] += 1
        return c


def classify_outcome(window_ticks: np.ndarray, window_p99: np.ndarray, qos: QosSpec,
                     first_alert: int | None) -> str:
    """missed: a violation opened before any alert; prevented: no window over target after
    the first alert; mitigated-late: crossed, but the last `persistence` windows are back
    under; violated: still over at the end; quiet: neither alert nor violation."""
    onsets = violation_onsets(window_ticks, window_p99, qos)
    if first_alert is None:
        return "missed" if onsets else "quiet"
    if onsets and onsets[0] < first_alert:
        return "missed"
    over = window_p99 > qos.target
    if not over[window_ticks >= first_alert].any():
        return "prevented"
    tail = over[-qos.persistence:]
    return "mitigated-late" if tail.size == qos.persistence and not tail.any() else "violated"


def violation_onsets(window_ticks, window_p99, qos: QosSpec) -> list[int]:
    out, run = [], 0
    for t, p in zip(window_ticks.tolist(), window_p99.tolist()):
        run = run + 1 if p > qos.target else 0
        if run == qos.persistence:
            out.append(t)
    return out


def closed_loop(sim: Simulator, model: Model, policy: MitigationPolicy, qos: QosSpec, ticks: int,
                *, mitigate_on: bool = True, mode: DiagnosisMode = DiagnosisMode.COUNTERS,
                fire_threshold: float = 0.5, probe_duration: int = 1) -> ClosedLoopRun:
    """Advance `sim` to `ticks`, streaming each snapshot through the model; alerts trigger
    diagnosis and mitigation when enabled. Allocations stay in place once made."""
    engine = StreamingInference(model, fire_threshold)
    alerts: list[Alert] = []
    actions: list[AllocationAction] = []
    diagnoses: list[Diagnosis] = []
    errors: list[tuple[int, str]] = []
    # (service, resource) -> [diagnosis, steps taken, tick of the next allowed escalation]
    active: dict[tuple[int, ResourceKind], list] = {}

    def feed(records):
        fresh = []
        for tick, batch in group_by_tick(records):
            fresh.extend(engine.step(tick, batch))
        alerts.extend(fresh)
        return fresh

    def act(diag: Diagnosis, step: int) -> bool:
        """False once the (service, resource) allocation cannot grow any further."""
        try:
            return mitigate(sim, diag, policy, step, actions) is not None
        except HeadroomExhausted as exc:
            errors.append((sim.tick, f"headroom-exhausted: {exc}"))
            return False

    def start(diag: Diagnosis) -> None:
        ok = act(diag, 1)
        active[(diag.service, diag.resource)] = [diag, 1 if ok else policy.max_steps,
                                                 sim.tick + _settle(policy, sim, diag.resource)]

    while sim.tick < ticks:
        recs, _ = sim.run_until(sim.tick + 1)
        fresh = feed(recs)
        if not mitigate_on:
            continue
        for al in fresh:
            if any(k[0] == al.service for k in active):
                continue
            if mode is DiagnosisMode.PROBE:
                try:
                    diag = diagnose_probe(sim, al.service, duration=probe_duration)
                    feed(diag.records)
                except InconclusiveDiagnosis as exc:
                    feed(exc.records)
                    errors.append((sim.tick, f"inconclusive-diagnosis: {exc}"))
                    diag = Diagnosis(al.service, ResourceKind.CPU_SHARE, DiagnosisMode.PROBE, exc.probe_cost)
            else:
                diag = diagnose_counters_live(sim, al.service)
            diagnoses.append(diag)
            start(diag)
        if not active:
            continue
        # escalate while the service keeps scoring above threshold or QoS is still broken
        scores = engine.last_scores
        broken = _recent_p99(sim, qos.window) > qos.target
        for (m, r), st in list(active.items()):
            diag, steps, ready = st
            if sim.tick < ready:
                continue
            if steps < policy.max_steps:
                if scores is not None and (scores[m] >= fire_threshold or broken):
                    st[1] = steps + 1 if act(diag, steps + 1) else policy.max_steps
                    st[2] = sim.tick + _settle(policy, sim, r)
            elif broken:
                # the alerted service is as isolated as it gets: extend the same
                # action to the next co-tenant that competes for the resource
                cot = _next_cotenant(sim, m, r, active)
                if cot is not None:
                    start(Diagnosis(cot, r, diag.mode, diag.probe_cost))
                st[2] = ticks
    n = sim.tick
    wt, wp = window_p99(sim.e2e, qos.window)
    return ClosedLoopRun(qos, n, rolling_p99(sim.e2e, n, qos.window), alerts, actions, diagnoses,
                         errors, int(sum(sim.drops_per_tick)), wt, wp)


def _next_cotenant(sim: Simulator, service: int, r: ResourceKind, active) -> int | None:
    s = sim.server_of(service)
    cands = [j for j in sim.graph.services_on(s)
             if j != service and sim.graph.nodes[j].demand[r] > 0 and (j, r) not in active]
    if not cands:
        return None
    hist = sim.queue_history
    return max(cands, key=lambda j: (hist[j][-1] / sim.graph.nodes[j].workers if hist[j] else 0.0, -j))


def _recent_p99(sim: Simulator, window: int) -> float:
    tail = sim.e2e[-window:]
    if len(tail) < window:
        return 0.0
    return float(np.percentile([x[1] for x in tail], 99))


def _settle(policy: MitigationPolicy, sim: Simulator, r: ResourceKind) -> int:
    extra = sim.cfg.mem_inertia_ticks if r in _MEMORY else 0
    return policy.settle_ticks + extra


def timeline_rows(run: ClosedLoopRun) -> list[tuple]:
    al, ac = run.alert_counts(), run.action_counts()
    return [(t, run.p99[t], run.qos.target, int(al[t]), int(ac[t])) for t in range(run.ticks)]
