"""Service dependency graphs, servers, and the shipped graph shapes."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .trace import RESOURCES, ResourceKind


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    base_service_time: float  # simulated µs
    server: int
    demand: tuple[float, ...]  # per-request demand per ResourceKind, fraction of server capacity
    workers: int = 4
    name: str = ""


@dataclass(frozen=True)
class Edge:
    caller: int
    callee: int
    blocking: bool = True
    fanout: int = 1


@dataclass(frozen=True)
class Server:
    id: int
    capacity: tuple[float, ...] = (40.0, 128.0, 100.0, 40.0, 10.0, 32.0)

    def __post_init__(self):
        if len(self.capacity) != len(RESOURCES) or min(self.capacity) <= 0:
            raise TopologyError(f"server {self.id}: capacities must be six positive values")


@dataclass
class ServiceGraph:
    nodes: list[Node]
    edges: list[Edge]
    entry: int = 0
    servers: list[Server] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def children(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.caller == node]

    def validate(self) -> None:
        n = self.n
        if n == 0:
            raise TopologyError("graph has no nodes")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise TopologyError(f"node ids must be dense 0..N-1, got {node.id} at position {i}")
            if node.base_service_time <= 0:
                raise TopologyError(f"node {i}: base_service_time must be > 0")
            if node.workers < 1:
                raise TopologyError(f"node {i}: workers must be >= 1")
            if len(node.demand) != len(RESOURCES) or min(node.demand) < 0:
                raise TopologyError(f"node {i}: demands must be six non-negative values")
        server_ids = {s.id for s in self.servers}
        for node in self.nodes:
            if node.server not in server_ids:
                raise TopologyError(f"node {node.id} is not placed on a known server")
        for e in self.edges:
            if not (0 <= e.caller < n and 0 <= e.callee < n):
                raise TopologyError(f"edge {e.caller}->{e.callee} references unknown node")
            if e.fanout < 1:
                raise TopologyError(f"edge {e.caller}->{e.callee}: fanout must be >= 1")
        cycle = self.find_cycle()
        if cycle:
            raise TopologyError("dependency cycle: " + " -> ".join(map(str, cycle)))
        if not 0 <= self.entry < n:
            raise TopologyError(f"entry node {self.entry} not in graph")
        roots = {i for i in range(n)} - {e.callee for e in self.edges}
        if roots != {self.entry}:
            raise TopologyError(f"graph must have a single entry node; roots are {sorted(roots)}")

    def find_cycle(self) -> list[int]:
        adj: dict[int, list[int]] = {i: [] for i in range(self.n)}
        for e in self.edges:
            adj[e.caller].append(e.callee)
        color = [0] * self.n
        stack: list[int] = []

        def visit(u):
            color[u] = 1
            stack.append(u)
            for v in adj[u]:
                if color[v] == 1:
                    return stack[stack.index(v):] + [v]
                if color[v] == 0:
                    found = visit(v)
                    if found:
                        return found
            stack.pop()
            color[u] = 2
            return None

        for u in range(self.n):
            if color[u] == 0:
                found = visit(u)
                if found:
                    return found
        return []

    def visits_per_request(self) -> list[float]:
        """Expected visits to each node per external request (blocking and async calls)."""
        order = self.topological_order()
        visits = [0.0] * self.n
        visits[self.entry] = 1.0
        for u in order:
            for e in self.children(u):
                visits[e.callee] += visits[u] * e.fanout
        return visits

    def topological_order(self) -> list[int]:
        indeg = [0] * self.n
        for e in self.edges:
            indeg[e.callee] += 1
        ready = [i for i in range(self.n) if indeg[i] == 0]
        order = []
        while ready:
            u = ready.pop(0)
            order.append(u)
            for e in self.children(u):
                indeg[e.callee] -= 1
                if indeg[e.callee] == 0:
                    ready.append(e.callee)
        return order

    def blocking_reachable(self) -> set[int]:
        """Nodes whose latency is on the end-to-end path (reachable via blocking edges only)."""
        seen = {self.entry}
        frontier = [self.entry]
        while frontier:
            u = frontier.pop()
            for e in self.children(u):
                if e.blocking and e.callee not in seen:
                    seen.add(e.callee)
                    frontier.append(e.callee)
        return seen

    def services_on(self, server: int) -> list[int]:
        return [node.id for node in self.nodes if node.server == server]

    def utilization(self, arrival_rate: float) -> list[float]:
        """Offered per-node load rho at the given external rate (requests per µs), no slowdown."""
        visits = self.visits_per_request()
        return [arrival_rate * v * node.base_service_time / node.workers
                for v, node in zip(visits, self.nodes)]


# --------------------------------------------------------------------------
# Shape generators. All randomness flows from the supplied rng.

CPU_VISIBLE = (ResourceKind.CPU_SHARE, ResourceKind.MEM_BANDWIDTH, ResourceKind.LLC_CAPACITY)


def _random_demand(rng: random.Random, workers: int, p_demand: float,
                   footprint: tuple[float, float]) -> tuple[float, ...]:
    # footprint = fraction of the server resource used with all workers busy
    while True:
        vals = []
        for _ in RESOURCES:
            if rng.random() < p_demand:
                vals.append(rng.uniform(*footprint) / workers)
            else:
                vals.append(0.0)
        if any(vals):
            return tuple(vals)


def _layer_sizes(n: int, depth: int, width: int) -> list[int]:
    sizes = [1]
    remaining = n - 1
    level_cap = width
    for level in range(1, depth):
        left_levels = depth - level
        size = min(level_cap, remaining - (left_levels - 1)) if level < depth - 1 else remaining
        size = max(1, size)
        sizes.append(size)
        remaining -= size
        level_cap *= width
    return sizes


@dataclass
class ShapeParams:
    arrival_rate: float           # external requests per µs
    rho: tuple[float, float] = (0.55, 0.68)
    workers: int = 4
    heavy_fraction: float = 0.15
    heavy_workers: int = 16
    async_fraction: float = 0.15
    fanin_fraction: float = 0.1
    services_per_server: int = 2
    p_demand: float = 0.45
    footprint: tuple[float, float] = (0.06, 0.16)
    hold_util: float = 0.35
    callee_slack: float = 1.5


def _finish(name_prefix: str, n: int, edges: list[Edge], rng: random.Random,
            params: ShapeParams) -> ServiceGraph:
    n_servers = max(1, math.ceil(n / params.services_per_server))
    servers = [Server(i) for i in range(n_servers)]
    placement = list(range(n))
    rng.shuffle(placement)
    server_of = {node: idx % n_servers for idx, node in enumerate(placement)}
    probe = ServiceGraph([Node(i, 1.0, server_of[i], (0.0,) * 6) for i in range(n)], edges, 0, servers)
    visits = probe.visits_per_request()
    draws = []
    for i in range(n):
        heavy = i != 0 and rng.random() < params.heavy_fraction
        workers = params.heavy_workers if heavy else params.workers
        rho = rng.uniform(*params.rho)
        base = rho * workers / (params.arrival_rate * visits[i])
        demand = _random_demand(rng, workers, params.p_demand, params.footprint)
        draws.append((heavy, workers, base, demand))
    # Callers hold a worker while blocked on callees: size their pools from the
    # expected hold time so the nominal cluster is not saturated by blocking.
    hold = [0.0] * n
    final_workers = [d[1] for d in draws]
    for u in reversed(probe.topological_order()):
        downstream = sum(params.callee_slack * hold[e.callee] for e in probe.children(u) if e.blocking)
        hold[u] = draws[u][2] + downstream
        if downstream > 0:
            need = math.ceil(params.arrival_rate * visits[u] * hold[u] / params.hold_util)
            final_workers[u] = max(final_workers[u], need)
    nodes = []
    for i in range(n):
        heavy, workers, base, demand = draws[i]
        w = final_workers[i]
        # keep the full-occupancy footprint independent of the pool size
        demand = tuple(d * workers / w for d in demand)
        kind = "heavy" if heavy else "svc"
        nodes.append(Node(i, base, server_of[i], demand, w, f"{name_prefix}-{kind}{i}"))
    graph = ServiceGraph(nodes, edges, 0, servers)
    graph.validate()
    return graph


def social_graph(n: int, rng: random.Random, params: ShapeParams) -> ServiceGraph:
    """Fan-out tree of depth 4 and width 5, a few async leaf edges and fan-in edges."""
    if n < 1:
        raise TopologyError("n must be >= 1")
    if n == 1:
        return _finish("social", 1, [], rng, params)
    depth = min(4, n)
    sizes = _layer_sizes(n, depth, 5)
    levels = []
    nxt = 0
    for size in sizes:
        levels.append(list(range(nxt, nxt + size)))
        nxt += size
    edges = []
    for li in range(1, len(levels)):
        parents = levels[li - 1]
        for j, child in enumerate(levels[li]):
            parent = parents[j % len(parents)] if j < len(parents) else rng.choice(parents)
            is_leaf_level = li == len(levels) - 1
            blocking = not (is_leaf_level and rng.random() < params.async_fraction)
            edges.append(Edge(parent, child, blocking, 1))
            if li >= 2 and len(parents) > 1 and rng.random() < params.fanin_fraction:
                other = rng.choice([p for p in parents if p != parent])
                edges.append(Edge(other, child, True, 1))
    return _finish("social", n, edges, rng, params)


def pipeline_graph(n: int, rng: random.Random, params: ShapeParams) -> ServiceGraph:
    """Blocking chain of depth 8 with side calls hanging off the chain stages."""
    if n < 1:
        raise TopologyError("n must be >= 1")
    chain = min(8, n)
    edges = [Edge(i, i + 1, True, 1) for i in range(chain - 1)]
    for extra in range(chain, n):
        stage = rng.randrange(chain)
        blocking = rng.random() >= params.async_fraction
        edges.append(Edge(stage, extra, blocking, 1))
    return _finish("pipeline", n, edges, rng, params)


def ecommerce_graph(n: int, rng: random.Random, params: ShapeParams) -> ServiceGraph:
    """Front end fanning out to mid-tier services which fan in onto shared backends."""
    if n < 1:
        raise TopologyError("n must be >= 1")
    if n <= 2:
        return _finish("ecommerce", n, [Edge(0, 1)] if n == 2 else [], rng, params)
    n_mid = max(1, (n - 1) // 2)
    n_back = n - 1 - n_mid
    mids = list(range(1, 1 + n_mid))
    backs = list(range(1 + n_mid, n))
    edges = [Edge(0, m, True, 1) for m in mids]
    called = set()
    for m in mids:
        if not backs:
            break
        k = min(len(backs), rng.choice((1, 2)))
        for b in rng.sample(backs, k):
            blocking = rng.random() >= params.async_fraction
            edges.append(Edge(m, b, blocking, 1))
            called.add(b)
    for b in backs:
        if b not in called:
            edges.append(Edge(rng.choice(mids), b, True, 1))
    return _finish("ecommerce", n, edges, rng, params)


SHAPES = {"social": social_graph, "pipeline": pipeline_graph, "ecommerce": ecommerce_graph}


def graph_from_config(cfg: dict, arrival_rate: float, seed: int) -> ServiceGraph:
    """Build a graph from a topology config section: either a shape or explicit lists."""
    if "nodes" in cfg:
        return explicit_graph(cfg)
    shape = cfg.get("shape", "social")
    if shape not in SHAPES:
        raise TopologyError(f"unknown shape {shape!r}; expected one of {sorted(SHAPES)}")
    keys = {k: cfg[k] for k in ShapeParams.__dataclass_fields__ if k in cfg and k != "arrival_rate"}
    for k in ("rho", "footprint"):
        if k in keys:
            keys[k] = tuple(keys[k])
    params = ShapeParams(arrival_rate=arrival_rate, **keys)
    rng = random.Random(f"topology:{shape}:{cfg.get('n_services', 10)}:{seed}")
    return SHAPES[shape](int(cfg.get("n_services", 10)), rng, params)


def explicit_graph(cfg: dict) -> ServiceGraph:
    servers_cfg = cfg.get("servers")
    nodes = []
    for raw in cfg["nodes"]:
        if "id" not in raw or "base_service_time" not in raw:
            raise TopologyError(f"node entry {raw!r} needs 'id' and 'base_service_time'")
        if "server" not in raw:
            raise TopologyError(f"node {raw['id']} is not placed on a server")
        demand = raw.get("demand", {})
        if isinstance(demand, dict):
            vec = [0.0] * len(RESOURCES)
            for key, val in demand.items():
                vec[ResourceKind.parse(key)] = float(val)
            demand = tuple(vec)
        else:
            demand = tuple(float(x) for x in demand)
        nodes.append(Node(int(raw["id"]), float(raw["base_service_time"]), int(raw["server"]),
                          demand, int(raw.get("workers", 4)), str(raw.get("name", ""))))
    nodes.sort(key=lambda nd: nd.id)
    edges = [Edge(int(e["caller"]), int(e["callee"]), e.get("semantics", "blocking") == "blocking",
                  int(e.get("fanout", 1))) for e in cfg.get("edges", [])]
    if servers_cfg is None:
        servers = [Server(i) for i in sorted({nd.server for nd in nodes})]
    else:
        servers = []
        for s in servers_cfg:
            cap = s.get("capacity")
            servers.append(Server(int(s["id"]), tuple(float(c) for c in cap)) if cap else Server(int(s["id"])))
    graph = ServiceGraph(nodes, edges, int(cfg.get("entry", 0)), servers)
    graph.validate()
    return graph
