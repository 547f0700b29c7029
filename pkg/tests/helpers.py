"""Small hand-built graphs shared by the tests."""

from seer_sim.topology import Edge, Node, Server, ServiceGraph
from seer_sim.trace import RESOURCES, ResourceKind


def demand(**kw):
    vec = [0.0] * len(RESOURCES)
    for k, v in kw.items():
        vec[ResourceKind.parse(k)] = v
    return tuple(vec)


def single_node(base=100.0, workers=1, dem=None):
    node = Node(0, base, 0, dem or (0.0,) * 6, workers)
    return ServiceGraph([node], [], 0, [Server(0)])


def two_tenant(spare_server=False):
    """Front end on server 0; A (CPU + LLC) and B (I/O only) share server 1."""
    nodes = [Node(0, 50.0, 0, demand(CpuShare=0.05), 8),
             Node(1, 400.0, 1, demand(CpuShare=0.1, LlcCapacity=0.1), 4),
             Node(2, 400.0, 1, demand(IoBandwidth=0.1), 4)]
    edges = [Edge(0, 1), Edge(0, 2)]
    servers = [Server(0), Server(1)] + ([Server(2)] if spare_server else [])
    return ServiceGraph(nodes, edges, 0, servers)
