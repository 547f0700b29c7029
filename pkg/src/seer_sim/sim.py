"""Deterministic discrete-event simulator of a microservice cluster.

Time is in simulated microseconds; one tick is one sampling interval.
Requests arrive open-loop (Poisson) at the entry node and traverse the
dependency DAG. Each microservice has a FIFO queue and a fixed worker
pool; a worker is held while the request computes and, for blocking
edges, until every callee has replied.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .topology import CPU_VISIBLE, ServiceGraph, TopologyError
from .trace import RESOURCES, ResourceKind, TraceRecord

_ARRIVAL, _DONE, _CONTENTION, _ALLOC = range(4)
_MEMORY = (ResourceKind.MEM_CAPACITY, ResourceKind.MEM_BANDWIDTH)
_CPU_VISIBLE = frozenset(int(r) for r in CPU_VISIBLE)


class SimulationError(RuntimeError):
    pass


class AllocationError(SimulationError):
    """Partitioned shares on a server/resource would exceed 1."""


class AnnotationError(SimulationError):
    pass


class CountersUnavailable(SimulationError):
    """Host utilization statistics are not exposed in public-cloud mode."""


@dataclass(frozen=True)
class ContentionEvent:
    server: int
    resource: ResourceKind
    intensity: float
    start_tick: int
    end_tick: int

    def __post_init__(self):
        if self.start_tick >= self.end_tick:
            raise ValueError("contention start must precede end")
        if not 0.0 <= self.intensity <= 2.0:
            raise ValueError(f"intensity {self.intensity} outside [0, 2]")


@dataclass
class SimConfig:
    tick_us: float = 10_000.0
    arrival_rate: float = 0.0016     # external requests per µs
    service_dist: str = "exp"        # "exp" or "det"
    queue_bound: int = 512
    mem_inertia_ticks: int = 20
    default_share: float = 0.25
    public_cloud: bool = False
    load_wander: float = 0.0         # std of the log arrival-rate multiplier
    load_corr: float = 0.98          # per-tick autocorrelation of that multiplier

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class AllocationState:
    """share[service][resource] and partitioned[service][resource], plus placement."""

    server_of: list[int]
    share: list[list[float]]
    partitioned: list[list[bool]]

    def partition_sum(self, server: int, resource: ResourceKind) -> float:
        return sum(self.share[m][resource] for m, s in enumerate(self.server_of)
                   if s == server and self.partitioned[m][resource])


class _Visit:
    __slots__ = ("node", "parent", "arrival", "pending", "failed", "root", "frac")

    def __init__(self, node, parent, arrival, root=False):
        self.node = node
        self.parent = parent
        self.arrival = arrival
        self.pending = 0
        self.failed = False
        self.root = root
        self.frac = 1.0


def _percentile(sorted_vals: list[float], q: float) -> float:
    # linear interpolation, same convention as numpy's default
    n = len(sorted_vals)
    pos = q * (n - 1)
    lo = int(pos)
    hi = min(lo + 1, n - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def _derive_seed(seed: int, *tags) -> int:
    ss = np.random.SeedSequence([seed & (2**63 - 1)] + [abs(hash_tag(t)) for t in tags])
    return int(ss.generate_state(2, np.uint64)[0])


def hash_tag(tag) -> int:
    # stable across processes (unlike hash() on str)
    if isinstance(tag, int):
        return tag
    return int.from_bytes(str(tag).encode()[:16].ljust(16, b"\0"), "little") % (2**62)


class Simulator:
    def __init__(self, graph: ServiceGraph, cfg: SimConfig, seed: int):
        graph.validate()
        self.graph = graph
        self.cfg = cfg
        self.seed = seed
        n = graph.n
        self.n = n
        self.T = float(cfg.tick_us)
        self.now = 0.0
        self.tick = 0

        self._server = [nd.server for nd in graph.nodes]
        self._base = [nd.base_service_time for nd in graph.nodes]
        self._workers = [nd.workers for nd in graph.nodes]
        self._res = [[(r, d) for r, d in enumerate(nd.demand) if d > 0] for nd in graph.nodes]
        self._footprint = [[d * nd.workers for d in nd.demand] for nd in graph.nodes]
        kids: list[list[tuple[int, bool, int]]] = [[] for _ in range(n)]
        for e in graph.edges:
            kids[e.caller].append((e.callee, e.blocking, e.fanout))
        self._kids = kids
        self._server_ids = sorted({s.id for s in graph.servers})
        n_srv = max(self._server_ids) + 1 if self._server_ids else 1

        # allocation: committed (validated) and effective (applied after inertia)
        ds = cfg.default_share
        self._share = [[ds] * 6 for _ in range(n)]
        self._part = [[False] * 6 for _ in range(n)]
        self._c_share = [[ds] * 6 for _ in range(n)]
        self._c_part = [[False] * 6 for _ in range(n)]
        self._weight = [[1.0] * 6 for _ in range(n)]
        self._pool = [[0.0] * 6 for _ in range(n_srv)]
        self._antag = [[0.0] * 6 for _ in range(n_srv)]
        self._part_sum = [[0.0] * 6 for _ in range(n_srv)]

        # per-node dynamic state
        self._waiting = [deque() for _ in range(n)]
        self._busy = [0] * n
        self._computing = [0] * n
        self._insys = [0] * n
        self._cpu_active = [0.0] * n
        self._area_cpu = [0.0] * n
        self._area_ins = [0.0] * n
        self._last = [0.0] * n
        self._cpu_mark = [0.0] * n
        self._lat: list[list[float]] = [[] for _ in range(n)]
        self._prev_p99 = [0.0] * n
        self.node_arrivals = [0] * n
        self.node_drops = [0] * n

        self._heap: list = []
        self._seq = 0
        self._arr_rng = random.Random(_derive_seed(seed, "arrivals"))
        self._load_rng = random.Random(_derive_seed(seed, "load"))
        self._svc_rng = [random.Random(_derive_seed(seed, "service", i)) for i in range(n)]
        self._load_x = 0.0
        self._arrivals_through = 0

        self.admitted = 0
        self.completed = 0
        self.dropped = 0
        self.e2e: list[tuple[int, float]] = []
        self.drops_per_tick: list[int] = []
        self.queue_history: list[list[int]] = [[] for _ in range(n)]
        self.injections: list[ContentionEvent] = []
        self.allocation_log: list[tuple[int, int, ResourceKind, float, bool]] = []
        self._contentions: list[ContentionEvent] = []

    # ------------------------------------------------------------------ events
    def _push(self, t, kind, payload):
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def _touch(self, m, t):
        dt = t - self._last[m]
        if dt:
            self._area_ins[m] += self._insys[m] * dt
            self._area_cpu[m] += self._cpu_active[m] * dt
            self._last[m] = t

    def _multiplier(self, m):
        s = self._server[m]
        pool = self._pool[s]
        antag = self._antag[s]
        psum = self._part_sum[s]
        part = self._part[m]
        share = self._share[m]
        fp = self._footprint[m]
        weight = self._weight[m]
        mult = 1.0
        mcpu = 1.0
        for r, _d in self._res[m]:
            if part[r]:
                if share[r] >= fp[r]:
                    continue
                x = (pool[r] + antag[r]) / max(1.0 - psum[r], 1e-3)
            else:
                x = (pool[r] + antag[r]) / max(1.0 - psum[r], 1e-3) / weight[r]
            if x > mult:
                mult = x
            if r in _CPU_VISIBLE and x > mcpu:
                mcpu = x
        return mult, mcpu

    def _start(self, v, t):
        m = v.node
        self._touch(m, t)
        self._busy[m] += 1
        self._computing[m] += 1
        pool = self._pool[self._server[m]]
        part = self._part[m]
        for r, d in self._res[m]:
            if not part[r]:
                pool[r] += d
        mult, mcpu = self._multiplier(m)
        draw = self._svc_rng[m].expovariate(1.0) if self.cfg.service_dist == "exp" else 1.0
        v.frac = mcpu / mult
        self._cpu_active[m] += v.frac
        self._push(t + self._base[m] * draw * mult, _DONE, v)

    def _arrive(self, v, t):
        m = v.node
        self.node_arrivals[m] += 1
        if self._busy[m] < self._workers[m]:
            self._touch(m, t)
            self._insys[m] += 1
            self._start(v, t)
        elif len(self._waiting[m]) >= self.cfg.queue_bound:
            self.node_drops[m] += 1
            v.failed = True
            self._reply(v, t)
        else:
            self._touch(m, t)
            self._insys[m] += 1
            self._waiting[m].append(v)

    def _done(self, v, t):
        m = v.node
        self._touch(m, t)
        self._computing[m] -= 1
        self._cpu_active[m] -= v.frac
        pool = self._pool[self._server[m]]
        part = self._part[m]
        for r, d in self._res[m]:
            if not part[r]:
                pool[r] -= d
        kids = self._kids[m]
        if not kids:
            self._finish(v, t)
            return
        blocking = 0
        for c, blk, fan in kids:
            if blk:
                blocking += fan
        v.pending = blocking
        for c, blk, fan in kids:
            for _ in range(fan):
                self._arrive(_Visit(c, v if blk else None, t), t)
        if blocking == 0:
            self._finish(v, t)

    def _finish(self, v, t):
        m = v.node
        self._touch(m, t)
        self._busy[m] -= 1
        self._insys[m] -= 1
        self._lat[m].append(t - v.arrival)
        waiting = self._waiting[m]
        if waiting:
            self._start(waiting.popleft(), t)
        self._reply(v, t)

    def _reply(self, v, t):
        p = v.parent
        if p is not None:
            if v.failed:
                p.failed = True
            p.pending -= 1
            if p.pending == 0:
                self._finish(p, t)
        elif v.root:
            if v.failed:
                self.dropped += 1
            else:
                self.completed += 1
                self.e2e.append((int(t // self.T), t - v.arrival))

    def _gen_arrivals(self, k):
        rate = self.cfg.arrival_rate
        if rate <= 0:
            return
        if self.cfg.load_wander > 0:
            phi = self.cfg.load_corr
            self._load_x = phi * self._load_x + self.cfg.load_wander * math.sqrt(1 - phi * phi) * self._load_rng.gauss(0, 1)
            rate *= math.exp(self._load_x)
        t = k * self.T
        end = t + self.T
        rng = self._arr_rng
        while True:
            t += rng.expovariate(rate)
            if t >= end:
                break
            self._push(t, _ARRIVAL, None)

    def _apply_alloc(self, m, r, share, partitioned):
        s = self._server[m]
        was = self._part[m][r]
        d = self.graph.nodes[m].demand[r]
        if was and not partitioned:
            self._pool[s][r] += self._computing[m] * d
        elif partitioned and not was:
            self._pool[s][r] -= self._computing[m] * d
        self._part[m][r] = partitioned
        self._share[m][r] = share
        self._weight[m][r] = share / self.cfg.default_share if not partitioned else 1.0
        self._part_sum[s][r] = sum(self._share[j][r] for j in range(self.n)
                                   if self._server[j] == s and self._part[j][r])

    def _process(self, limit):
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] < limit:
            t, _, kind, payload = pop(heap)
            self.now = t
            if kind == _DONE:
                self._done(payload, t)
            elif kind == _ARRIVAL:
                self.admitted += 1
                self._arrive(_Visit(self.graph.entry, None, t, True), t)
            elif kind == _CONTENTION:
                ev, sign = payload
                self._antag[ev.server][ev.resource] += sign * ev.intensity
            else:
                self._apply_alloc(*payload)

    # ----------------------------------------------------------------- public
    def run_until(self, tick: int, sample: bool = True):
        """Advance to the end of interval `tick - 1`; returns (records, e2e latencies)."""
        if tick <= self.tick:
            raise SimulationError(f"run_until({tick}) but simulator is already at tick {self.tick}")
        records: list[TraceRecord] = []
        e2e_start = len(self.e2e)
        T = self.T
        while self.tick < tick:
            k = self.tick
            if self._arrivals_through <= k:
                self._gen_arrivals(k)
                self._arrivals_through = k + 1
            boundary = (k + 1) * T
            drops_before = self.dropped
            self._process(boundary)
            self.now = boundary
            self.drops_per_tick.append(self.dropped - drops_before)
            for m in range(self.n):
                self.queue_history[m].append(self._insys[m])
            if sample:
                records.extend(self._sample(k, boundary))
            else:
                for m in range(self.n):
                    self._lat[m] = []
            self.tick = k + 1
        return records, self.e2e[e2e_start:]

    def _sample(self, k, boundary):
        out = []
        T = self.T
        for m in range(self.n):
            self._touch(m, boundary)
            cpu = (self._area_cpu[m] - self._cpu_mark[m]) / (self._workers[m] * T)
            self._cpu_mark[m] = self._area_cpu[m]
            cpu = min(1.0, max(0.0, cpu))
            lats = self._lat[m]
            if lats:
                lats.sort()
                p50 = _percentile(lats, 0.5)
                p99 = _percentile(lats, 0.99)
                self._lat[m] = []
            else:
                p50 = p99 = 0.0
            rate = p99 - self._prev_p99[m]
            self._prev_p99[m] = p99
            out.append(TraceRecord(k, m, self._insys[m], cpu, p50, p99, rate))
        return out

    def inject(self, ev: ContentionEvent, probe: bool = False) -> None:
        if ev.server not in self._server_ids:
            raise SimulationError(f"unknown server {ev.server}")
        if ev.start_tick < self.tick:
            raise SimulationError(f"contention starts at tick {ev.start_tick}, already at {self.tick}")
        self._push(ev.start_tick * self.T, _CONTENTION, (ev, 1.0))
        self._push(ev.end_tick * self.T, _CONTENTION, (ev, -1.0))
        self._contentions.append(ev)
        if not probe:
            self.injections.append(ev)

    def set_allocation(self, service: int, resource: ResourceKind, share: float, partitioned: bool) -> None:
        resource = ResourceKind(resource)
        if not 0 <= service < self.n:
            raise SimulationError(f"unknown service {service}")
        if not 0.0 <= share <= 1.0:
            raise AllocationError(f"share {share} outside [0, 1]")
        s = self._server[service]
        total = sum(share if j == service else self._c_share[j][resource]
                    for j in range(self.n)
                    if self._server[j] == s and (partitioned if j == service else self._c_part[j][resource]))
        if total > 1.0 + 1e-12:
            raise AllocationError(f"server {s} {resource.label}: partitioned shares would sum to {total:.3f}")
        self._c_share[service][resource] = share
        self._c_part[service][resource] = partitioned
        delay = self.cfg.mem_inertia_ticks if resource in _MEMORY else 0
        self._push((self.tick + delay) * self.T, _ALLOC, (service, int(resource), share, partitioned))
        self.allocation_log.append((self.tick, service, resource, share, partitioned))

    def allocation(self) -> AllocationState:
        return AllocationState(list(self._server), [row[:] for row in self._c_share],
                               [row[:] for row in self._c_part])

    def free_partition(self, server: int, resource: ResourceKind) -> float:
        used = sum(self._c_share[j][resource] for j in range(self.n)
                   if self._server[j] == server and self._c_part[j][resource])
        return max(0.0, 1.0 - used)

    def demand(self, service: int, resource: ResourceKind) -> float:
        """Footprint of the service on a resource with every worker busy."""
        return self._footprint[service][resource]

    def pool_utilization(self, server: int) -> list[float]:
        return [(self._pool[server][r] + self._antag[server][r]) / max(1.0 - self._part_sum[server][r], 1e-3)
                for r in range(6)]

    def host_stats(self, service: int) -> list[float]:
        if self.cfg.public_cloud:
            raise CountersUnavailable("host utilization statistics unavailable in public-cloud mode")
        return self.pool_utilization(self._server[service])

    def slowdown(self, service: int) -> dict[ResourceKind, float]:
        """Current per-resource slowdown a newly started request at `service` would see."""
        s = self._server[service]
        out = {}
        for r in RESOURCES:
            d = self.graph.nodes[service].demand[r]
            if d <= 0:
                out[r] = 1.0
                continue
            extra = 0.0 if self._part[service][r] else d
            if self._part[service][r] and self._share[service][r] >= self._footprint[service][r]:
                out[r] = 1.0
                continue
            u = (self._pool[s][r] + extra + self._antag[s][r]) / max(1.0 - self._part_sum[s][r], 1e-3)
            w = self._weight[service][r]
            out[r] = max(1.0, u / w)
        return out

    def in_system_area(self, service: int) -> float:
        self._touch(service, self.now)
        return self._area_ins[service]

    @property
    def in_flight(self) -> int:
        return self.admitted - self.completed - self.dropped

    def server_of(self, service: int) -> int:
        return self._server[service]


def build(graph: ServiceGraph, cfg: SimConfig, seed: int, allocations=()) -> Simulator:
    """Construct a simulator; `allocations` are initial (service, resource, share, partitioned)."""
    sim = Simulator(graph, cfg, seed)
    for service, resource, share, partitioned in allocations:
        sim.set_allocation(service, resource, share, partitioned)
    if allocations:
        # initial allocations apply before any traffic, regardless of inertia
        for service, resource, share, partitioned in allocations:
            sim._apply_alloc(service, int(resource), share, partitioned)
        sim._heap = [e for e in sim._heap if e[2] != _ALLOC]
        heapq.heapify(sim._heap)
        sim.allocation_log.clear()
    return sim


def annotate_culprit(sim: Simulator, onset_tick: int, *, factor: float = 3.0, smooth: int = 3,
                     pre_window: int = 30, drain_ticks: int = 60) -> tuple[int, ResourceKind]:
    """Ground-truth culprit for a violation: the contended-server microservice whose
    (smoothed) queue depth first exceeded `factor` x its pre-injection mean."""
    overlapping = [ev for ev in sim.injections
                   if ev.intensity > 0 and ev.start_tick <= onset_tick < ev.end_tick + drain_ticks]
    if len(overlapping) != 1:
        raise AnnotationError(f"violation at tick {onset_tick} overlaps {len(overlapping)} injections")
    ev = overlapping[0]
    candidates = sim.graph.services_on(ev.server)
    if not candidates:
        raise AnnotationError(f"injection on server {ev.server} hosts no services")
    best = None
    fallback = None
    for m in candidates:
        hist = np.asarray(sim.queue_history[m], dtype=float)
        lo = max(0, ev.start_tick - pre_window)
        pre = hist[lo:ev.start_tick]
        base = max(pre.mean() if pre.size else 0.0, 1.0)
        seg = hist[max(0, ev.start_tick - smooth + 1):onset_tick + 1]
        if seg.size < smooth:
            continue
        sm = np.convolve(seg, np.ones(smooth) / smooth, mode="valid")
        above = np.nonzero(sm > factor * base)[0]
        if above.size:
            first = int(above[0])
            key = (first, -float(sm[first] / base))
            if best is None or key < best[0]:
                best = (key, m)
        ratio = float(sm.max() / base)
        if fallback is None or ratio > fallback[0]:
            fallback = (ratio, m)
    if best is not None:
        return best[1], ev.resource
    if fallback is None:
        raise AnnotationError("no queue-depth history covering the injection")
    return fallback[1], ev.resource
