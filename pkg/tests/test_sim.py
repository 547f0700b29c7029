from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import demand, single_node, two_tenant
from seer_sim.qos import QosSpec, detect_violations
from seer_sim.scenario import generate, load_config, run_episode
from seer_sim.sim import (AllocationError, AnnotationError, ContentionEvent, SimConfig, SimulationError,
                          annotate_culprit, build)
from seer_sim.topology import Edge, Node, Server, ServiceGraph, TopologyError, explicit_graph
from seer_sim.trace import ResourceKind

LLC = ResourceKind.LLC_CAPACITY
CFG = SimConfig(arrival_rate=0.004)


def test_single_node_builds():
    sim = build(single_node(), SimConfig(), seed=0)
    recs, _ = sim.run_until(3)
    assert [r.tick for r in recs] == [0, 1, 2]


def test_two_cycle_names_nodes():
    nodes = [Node(0, 10.0, 0, (0.0,) * 6), Node(1, 10.0, 0, (0.0,) * 6), Node(2, 10.0, 0, (0.0,) * 6)]
    g = ServiceGraph(nodes, [Edge(0, 1), Edge(1, 2), Edge(2, 1)], 0, [Server(0)])
    with pytest.raises(TopologyError) as exc:
        build(g, SimConfig(), seed=0)
    assert "1" in str(exc.value) and "2" in str(exc.value) and "cycle" in str(exc.value)


def test_unplaced_node_rejected():
    with pytest.raises(TopologyError, match="placed"):
        explicit_graph({"nodes": [{"id": 0, "base_service_time": 5.0}]})
    with pytest.raises(TopologyError, match="placed"):
        explicit_graph({"servers": [{"id": 0}], "nodes": [{"id": 0, "base_service_time": 5.0, "server": 3}]})


def test_oversubscribed_partitions_rejected(tenants):
    with pytest.raises(AllocationError):
        build(tenants, CFG, seed=0, allocations=[(1, LLC, 0.7, True), (2, LLC, 0.5, True)])


@pytest.mark.parametrize("rho", [0.3, 0.5, 0.7])
def test_mm1_queue_length_and_littles_law(rho):
    mu_time = 100.0
    lam = rho / mu_time
    sim = build(single_node(mu_time, 1), SimConfig(arrival_rate=lam, queue_bound=10**6), seed=5)
    sim.run_until(int(1.2e5 / lam / sim.T) + 1, sample=False)
    assert sim.admitted >= 100_000
    L = sim.in_system_area(0) / sim.now
    assert L == pytest.approx(rho / (1 - rho), rel=0.10)
    W = np.mean([lat for _, lat in sim.e2e])
    assert L == pytest.approx(sim.completed / sim.now * W, rel=0.10)


def test_zero_arrivals_is_silent():
    sim = build(two_tenant(), SimConfig(arrival_rate=0.0), seed=1)
    recs, lat = sim.run_until(20)
    assert lat == [] and all(r.queue_depth == 0 for r in recs)


def _trace(graph, events=(), allocs=(), seed=3, ticks=80, at=None):
    sim = build(graph, CFG, seed=seed)
    for ev in events:
        sim.inject(ev)
    out = []
    if at is not None:
        out += sim.run_until(at)[0]
        for a in allocs:
            sim.set_allocation(*a)
    out += sim.run_until(ticks)[0]
    return out, sim


def test_zero_intensity_is_no_perturbation(tenants):
    base, _ = _trace(tenants)
    zero, _ = _trace(tenants, [ContentionEvent(1, LLC, 0.0, 10, 60)])
    assert base == zero


def test_injection_on_empty_server_changes_nothing():
    g = two_tenant(spare_server=True)
    base, _ = _trace(g)
    hit, _ = _trace(g, [ContentionEvent(2, LLC, 1.5, 10, 60)])
    assert base == hit


def test_unknown_server_rejected(tenant_sim):
    with pytest.raises(SimulationError):
        tenant_sim.inject(ContentionEvent(9, LLC, 1.0, 1, 5))


def test_llc_contention_slows_the_victim(tenant_sim):
    tenant_sim.inject(ContentionEvent(1, LLC, 1.0, 5, 30))
    tenant_sim.run_until(4)
    assert tenant_sim.slowdown(1)[LLC] == 1.0
    tenant_sim.run_until(10)
    assert tenant_sim.slowdown(1)[LLC] > 1.0
    # B does not demand LLC
    assert tenant_sim.slowdown(2)[LLC] == 1.0


def test_partitioning_restores_slowdown(tenant_sim):
    tenant_sim.inject(ContentionEvent(1, LLC, 1.5, 2, 40))
    tenant_sim.run_until(10)
    assert tenant_sim.slowdown(1)[LLC] > 1.0
    tenant_sim.set_allocation(1, LLC, tenant_sim.demand(1, LLC) * 1.25, True)
    tenant_sim.run_until(11)
    assert tenant_sim.slowdown(1)[LLC] == 1.0


def test_memory_actions_have_inertia(tenants):
    nodes = list(tenants.nodes)
    nodes[1] = replace(nodes[1], demand=demand(MemBandwidth=0.1))
    g = ServiceGraph(nodes, tenants.edges, 0, tenants.servers)
    sim = build(g, CFG, seed=2)
    mb = ResourceKind.MEM_BANDWIDTH
    sim.inject(ContentionEvent(1, mb, 1.5, 1, 100))
    sim.run_until(5)
    sim.set_allocation(1, mb, 1.0, False)
    sim.run_until(5 + CFG.mem_inertia_ticks - 1)
    before = sim.slowdown(1)[mb]
    assert before > 1.0
    sim.run_until(5 + CFG.mem_inertia_ticks + 1)
    # share 1.0 is 4x the default weight
    assert sim.slowdown(1)[mb] < before


def test_reset_to_current_allocation_is_idempotent(tenants):
    base, _ = _trace(tenants)
    same, _ = _trace(tenants, allocs=[(1, LLC, CFG.default_share, False)], at=30)
    assert base == same


def test_oversubscribing_request_leaves_state(tenant_sim):
    tenant_sim.set_allocation(1, LLC, 0.8, True)
    before = tenant_sim.allocation()
    with pytest.raises(AllocationError):
        tenant_sim.set_allocation(2, LLC, 0.3, True)
    assert tenant_sim.allocation() == before


def test_conservation_and_drain(tenants):
    sim = build(tenants, CFG, seed=4)
    sim.inject(ContentionEvent(1, LLC, 2.0, 5, 50))
    for t in range(1, 60):
        sim.run_until(t)
        assert sim.in_flight >= 0
        assert sim.admitted == sim.completed + sim.dropped + sim.in_flight
    sim.cfg = replace(sim.cfg, arrival_rate=0.0)
    sim.run_until(400)
    assert sim.in_flight == 0
    assert sim.admitted == sim.completed + sim.dropped


def test_queue_overflow_drops():
    sim = build(single_node(1000.0, 1), SimConfig(arrival_rate=0.01, queue_bound=8), seed=1)
    sim.run_until(30)
    assert sim.dropped > 0 and sum(sim.drops_per_tick) == sim.dropped


def test_sampling_does_not_change_state(tenants):
    a = build(tenants, CFG, seed=9)
    b = build(tenants, CFG, seed=9)
    for s in (a, b):
        s.inject(ContentionEvent(1, LLC, 1.8, 10, 50))
    a.run_until(70, sample=True)
    b.run_until(70, sample=False)
    assert a.e2e == b.e2e


def test_same_seed_same_trace(tenants):
    ev = [ContentionEvent(1, LLC, 1.8, 10, 50)]
    assert _trace(tenants, ev, seed=21)[0] == _trace(tenants, ev, seed=21)[0]
    assert _trace(tenants, ev, seed=21)[0] != _trace(tenants, ev, seed=22)[0]


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 1.9), st.floats(0.0, 0.5), st.integers(0, 5))
def test_victim_queue_monotone_in_intensity(lo, bump, seed):
    hi = min(2.0, lo + bump)
    areas = []
    for x in (lo, hi):
        sim = build(two_tenant(), CFG, seed=seed)
        sim.inject(ContentionEvent(1, LLC, x, 5, 45))
        sim.run_until(5, sample=False)
        a0 = sim.in_system_area(1)
        sim.run_until(45, sample=False)
        areas.append(sim.in_system_area(1) - a0)
    assert areas[1] >= areas[0] - 1e-6


# ------------------------------------------------------------------ QoS windows
def _stream(values):
    return [(i, v) for i, v in enumerate(values)]


def test_violations_none_below_target():
    assert detect_violations(_stream([1.0] * 500), QosSpec(10.0, 20, 2)) == []


def test_violation_step_onset_at_second_window():
    R = 20
    vals = [1.0] * (5 * R) + [50.0] * (10 * R) + [1.0] * (5 * R)
    evs = detect_violations(_stream(vals), QosSpec(10.0, R, 2))
    assert len(evs) == 1
    assert evs[0].onset_tick == 7 * R - 1      # last request of the 2nd window past the step
    assert evs[0].end_tick == 17 * R - 1


def test_alternating_windows_never_violate():
    R = 20
    vals = ([50.0] * R + [1.0] * R) * 10
    assert detect_violations(_stream(vals), QosSpec(10.0, R, 2)) == []


def test_qos_spec_invariants():
    with pytest.raises(ValueError):
        QosSpec(0.0)
    with pytest.raises(ValueError):
        QosSpec(1.0, window=10)
    with pytest.raises(ValueError):
        QosSpec(1.0, persistence=0)


# ------------------------------------------------------------------ culprit oracle
def test_culprit_single_service_server():
    nodes = [Node(0, 50.0, 0, demand(CpuShare=0.05), 8), Node(1, 400.0, 1, demand(LlcCapacity=0.1), 4)]
    g = ServiceGraph(nodes, [Edge(0, 1)], 0, [Server(0), Server(1)])
    sim = build(g, CFG, seed=1)
    sim.inject(ContentionEvent(1, LLC, 2.0, 20, 80))
    sim.run_until(80)
    assert annotate_culprit(sim, 60) == (1, LLC)


def test_culprit_is_the_resource_user(tenant_sim):
    tenant_sim.inject(ContentionEvent(1, LLC, 2.0, 20, 90))
    tenant_sim.run_until(90)
    assert annotate_culprit(tenant_sim, 70) == (1, LLC)


def test_overlapping_injections_are_ambiguous(tenant_sim):
    tenant_sim.inject(ContentionEvent(1, LLC, 2.0, 20, 90))
    tenant_sim.inject(ContentionEvent(1, ResourceKind.IO_BANDWIDTH, 2.0, 30, 90))
    tenant_sim.run_until(90)
    with pytest.raises(AnnotationError):
        annotate_culprit(tenant_sim, 70)


# ------------------------------------------------------------------ shipped scenarios
@pytest.mark.parametrize("name", ["social-n10", "pipeline-n10", "ecommerce-n10"])
def test_no_violations_without_contention(name, configs_dir):
    cfg = replace(load_config(configs_dir / f"{name}.yaml"), episodes=0)
    ds = generate(cfg, seed=1)
    assert max(ds.graph.utilization(cfg.sim.arrival_rate)) < 0.7
    for i in range(3):
        ep = run_episode(cfg, ds.graph, ds.qos, 1, i, inject=False)
        assert ep.events == []
