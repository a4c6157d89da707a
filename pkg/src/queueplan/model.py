"""Scenario data model and cloud-augmented graph construction.

The scenario describes a physical network, the compute systems hosted on its
nodes, and a set of services expressed as DAGs of commodities (data streams).
Placement, routing and resource allocation all operate on the *augmented*
graph, in which every network node grows a production node, a consumption
node, and one computation node per hosted compute system.  Placement then
becomes plain flow routing: sending a commodity over a computation edge means
running the function that produces it on that system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional


class QueueModel(str, Enum):
    GR = "GR"  # guaranteed per-commodity quota, M/M/1 per commodity
    SR = "SR"  # shared resource, one M/G/1 per resource


class EdgeKind(str, Enum):
    COMM = "COMM"
    COMP = "COMP"
    SOURCE = "SOURCE"
    SINK = "SINK"


@dataclass(frozen=True)
class Resource:
    id: str
    name: str = ""


@dataclass(frozen=True)
class ComputeSystem:
    id: str
    resources: tuple[str, ...]


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[str, ...]
    links: tuple[tuple[str, str], ...]
    hosted_systems: Mapping[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Commodity:
    """One data stream of a service DAG.

    A commodity with no inputs is a source commodity and must carry the
    network node that generates it; a commodity with ``dest_node`` set is a
    destination commodity and must be delivered there.
    """

    id: str
    service: str
    inputs: tuple[str, ...] = ()
    source_node: Optional[str] = None
    dest_node: Optional[str] = None

    @property
    def is_source(self) -> bool:
        return not self.inputs


@dataclass(frozen=True)
class ServiceGraph:
    id: str
    commodities: tuple[Commodity, ...]
    arrival_rate: float
    latency_limits: Mapping[str, float] = field(default_factory=dict)

    def commodity(self, cid: str) -> Commodity:
        for k in self.commodities:
            if k.id == cid:
                return k
        raise KeyError(cid)


@dataclass(frozen=True)
class CommLinkParams:
    """Queueing parameters of one communication link (single resource)."""

    queue_model: QueueModel
    resource: str
    capacity: float
    unit_cost: float
    data_sizes: Mapping[str, float]  # commodity id -> resource units per request


@dataclass(frozen=True)
class ComputeParams:
    """Queueing parameters of one compute system.

    ``requirements`` lists, per producible commodity, the per-request demand
    on each resource of the system; a commodity absent from the map cannot be
    produced on this system.
    """

    queue_model: QueueModel
    capacities: Mapping[str, float]
    unit_costs: Mapping[str, float]
    requirements: Mapping[str, Mapping[str, float]]


@dataclass(frozen=True)
class EdgeParams:
    comm_default: Optional[CommLinkParams] = None
    comm_overrides: Mapping[tuple[str, str], CommLinkParams] = field(default_factory=dict)
    compute: Mapping[str, ComputeParams] = field(default_factory=dict)

    def comm(self, link: tuple[str, str]) -> CommLinkParams:
        params = self.comm_overrides.get(link, self.comm_default)
        if params is None:
            raise KeyError(f"no communication parameters for link {link}")
        return params


@dataclass(frozen=True)
class Scenario:
    network: NetworkGraph
    services: tuple[ServiceGraph, ...]
    resources: tuple[Resource, ...]
    edge_params: EdgeParams

    def service(self, sid: str) -> ServiceGraph:
        for s in self.services:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def commodity(self, cid: str) -> Commodity:
        for s in self.services:
            for k in s.commodities:
                if k.id == cid:
                    return k
        raise KeyError(cid)

    def arrival_rate_of(self, cid: str) -> float:
        return self.service(self.commodity(cid).service).arrival_rate

    @property
    def commodities(self) -> tuple[Commodity, ...]:
        return tuple(k for s in self.services for k in s.commodities)


# ---------------------------------------------------------------------------
# Augmented graph
# ---------------------------------------------------------------------------

def production_node(u: str) -> str:
    return f"prod:{u}"


def consumption_node(u: str) -> str:
    return f"cons:{u}"


def computation_node(u: str, system: str) -> str:
    return f"comp:{u}:{system}"


@dataclass(frozen=True)
class AugmentedEdge:
    tail: str
    head: str
    kind: EdgeKind
    queue_model: QueueModel
    capacities: Mapping[str, float] = field(default_factory=dict)
    unit_costs: Mapping[str, float] = field(default_factory=dict)
    requirements: Mapping[tuple[str, str], float] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str]:
        return (self.tail, self.head)

    @property
    def resources(self) -> tuple[str, ...]:
        return tuple(sorted(self.capacities))

    def requirement(self, commodity: str, resource: str) -> float:
        return self.requirements.get((commodity, resource), 0.0)

    @property
    def has_delay(self) -> bool:
        """True for edges that price resources and queue requests."""
        return bool(self.capacities)


@dataclass(frozen=True)
class AugmentedGraph:
    nodes: Mapping[str, str]  # node id -> role: network/production/consumption/computation
    edges: tuple[AugmentedEdge, ...]
    origin: Scenario

    def edge(self, key: tuple[str, str]) -> AugmentedEdge:
        return self._by_key[key]

    def __post_init__(self):
        object.__setattr__(self, "_by_key", {e.key: e for e in self.edges})
        ins: dict[str, list[AugmentedEdge]] = {n: [] for n in self.nodes}
        outs: dict[str, list[AugmentedEdge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            ins[e.head].append(e)
            outs[e.tail].append(e)
        object.__setattr__(self, "_in", ins)
        object.__setattr__(self, "_out", outs)

    def in_edges(self, node: str) -> list[AugmentedEdge]:
        return self._in[node]

    def out_edges(self, node: str) -> list[AugmentedEdge]:
        return self._out[node]

    @property
    def delay_edges(self) -> list[AugmentedEdge]:
        return [e for e in self.edges if e.has_delay]

    def allowed_commodities(self, edge: AugmentedEdge) -> tuple[str, ...]:
        """Commodity ids that may carry flow on this edge."""
        return self._allowed[edge.key]

    def allowed_pairs(self) -> list[tuple[tuple[str, str], str]]:
        return [(e.key, k) for e in self.edges for k in self.allowed_commodities(e)]


class StructuralError(ValueError):
    """A scenario cross-reference does not resolve."""


# Flow variables / allocations live here (not in the solver module) so that
# delay evaluation does not depend on the optimizer.

@dataclass(frozen=True)
class FlowAssignment:
    """Per-(edge, commodity) flow values on the augmented graph."""

    values: Mapping[tuple[tuple[str, str], str], float]
    integral: bool = False

    def get(self, edge_key: tuple[str, str], commodity: str) -> float:
        return self.values.get((edge_key, commodity), 0.0)

    def scaled(self, t: float) -> "FlowAssignment":
        return FlowAssignment(
            {key: t * v for key, v in self.values.items()}, integral=False
        )


@dataclass(frozen=True)
class Allocation:
    """Service-rate decisions: shared per resource (SR) or per commodity (GR)."""

    sr_rates: Mapping[tuple[tuple[str, str], str], float] = field(default_factory=dict)
    gr_rates: Mapping[tuple[tuple[str, str], str, str], float] = field(default_factory=dict)

    def sr(self, edge_key, resource) -> float:
        return self.sr_rates.get((edge_key, resource), 0.0)

    def gr(self, edge_key, commodity, resource) -> float:
        return self.gr_rates.get((edge_key, commodity, resource), 0.0)


def consumers_of(scenario: Scenario, cid: str) -> list[Commodity]:
    """Commodities that take `cid` as an input."""
    return [k for k in scenario.commodities if cid in k.inputs]


def validate_scenario(scenario: Scenario) -> list[str]:
    """Check every structural invariant; returns human-readable violations."""
    out: list[str] = []
    net = scenario.network
    node_set = set(net.nodes)
    if len(node_set) != len(net.nodes):
        out.append("duplicate network node ids")
    if len(set(net.links)) != len(net.links):
        out.append("duplicate links")
    for (u, v) in net.links:
        if u not in node_set or v not in node_set:
            out.append(f"link ({u},{v}) references unknown node")

    res_ids = [r.id for r in scenario.resources]
    if len(set(res_ids)) != len(res_ids):
        out.append("duplicate resource ids")
    sys_by_id: dict[str, ComputeSystem] = {}
    for u, systems in net.hosted_systems.items():
        if u not in node_set:
            out.append(f"hosted_systems references unknown node {u}")
        for sid in systems:
            if sid not in scenario.edge_params.compute:
                out.append(f"compute system {sid} has no parameters")

    seen_k: set[str] = set()
    for svc in scenario.services:
        if svc.arrival_rate <= 0:
            out.append(f"service {svc.id}: non-positive arrival rate")
        ids = {k.id for k in svc.commodities}
        for k in svc.commodities:
            if k.id in seen_k:
                out.append(f"duplicate commodity id {k.id}")
            seen_k.add(k.id)
            if k.service != svc.id:
                out.append(f"commodity {k.id} claims foreign service {k.service}")
            for j in k.inputs:
                if j not in ids:
                    out.append(f"commodity {k.id}: input {j} not in service {svc.id}")
            if k.is_source and k.source_node is None:
                out.append(f"source commodity {k.id} has no host node")
            if not k.is_source and k.source_node is not None:
                out.append(f"commodity {k.id} has inputs but also a source node")
            if k.source_node is not None and k.source_node not in node_set:
                out.append(f"commodity {k.id}: unknown source node {k.source_node}")
            if k.dest_node is not None and k.dest_node not in node_set:
                out.append(f"commodity {k.id}: unknown dest node {k.dest_node}")
            if k.dest_node is not None:
                lim = svc.latency_limits.get(k.id)
                if lim is None:
                    out.append(f"destination commodity {k.id} has no latency limit")
                elif lim <= 0:
                    out.append(f"commodity {k.id}: non-positive latency limit")
        # cycle check over the input relation
        color: dict[str, int] = {}

        def visit(cid: str) -> bool:
            color[cid] = 1
            for j in svc.commodity(cid).inputs:
                c = color.get(j, 0)
                if c == 1 or (c == 0 and visit(j)):
                    return True
            color[cid] = 2
            return False

        if any(visit(k.id) for k in svc.commodities if color.get(k.id, 0) == 0):
            out.append(f"cycle in service DAG of {svc.id}")
        # each commodity may feed at most one consumer (function or sink);
        # multicast outputs are outside the flow model
        for k in svc.commodities:
            fanout = sum(1 for j in svc.commodities if k.id in j.inputs)
            if k.dest_node is not None:
                fanout += 1
            if fanout > 1:
                out.append(f"commodity {k.id} has fan-out {fanout} > 1")
            if fanout == 0:
                out.append(f"commodity {k.id} is never consumed")
    return out


def build_augmented_graph(scenario: Scenario) -> AugmentedGraph:
    """Construct the cloud-augmented graph of a validated scenario.

    Node and edge order is canonical (lexicographic) so that every downstream
    numeric artifact is reproducible.  The outbound computation edge
    ``(comp, u)`` carries the produced commodity and holds the system's
    requirements, capacities and costs; the inbound edge ``(u, comp)``
    carries the inputs and is free and delay-less, as are production and
    consumption edges.
    """
    net = scenario.network
    params = scenario.edge_params
    nodes: dict[str, str] = {}
    edges: list[AugmentedEdge] = []

    for u in sorted(net.nodes):
        nodes[u] = "network"
        nodes[production_node(u)] = "production"
        nodes[consumption_node(u)] = "consumption"
        edges.append(AugmentedEdge(production_node(u), u, EdgeKind.SOURCE, QueueModel.GR))
        edges.append(AugmentedEdge(u, consumption_node(u), EdgeKind.SINK, QueueModel.GR))
        for sid in sorted(net.hosted_systems.get(u, ())):
            comp = params.compute.get(sid)
            if comp is None:
                raise StructuralError(f"compute system {sid} on node {u} has no parameters")
            for r in comp.capacities:
                if r not in {res.id for res in scenario.resources}:
                    raise StructuralError(f"compute system {sid} references unknown resource {r}")
            p = computation_node(u, sid)
            nodes[p] = "computation"
            edges.append(AugmentedEdge(u, p, EdgeKind.COMP, comp.queue_model))
            edges.append(
                AugmentedEdge(
                    p,
                    u,
                    EdgeKind.COMP,
                    comp.queue_model,
                    capacities=dict(comp.capacities),
                    unit_costs=dict(comp.unit_costs),
                    requirements={
                        (k, r): q
                        for k, per_r in comp.requirements.items()
                        for r, q in per_r.items()
                    },
                )
            )

    for link in sorted(net.links):
        cp = params.comm(link)
        if cp.resource not in {res.id for res in scenario.resources}:
            raise StructuralError(f"link {link} references unknown resource {cp.resource}")
        edges.append(
            AugmentedEdge(
                link[0],
                link[1],
                EdgeKind.COMM,
                cp.queue_model,
                capacities={cp.resource: cp.capacity},
                unit_costs={cp.resource: cp.unit_cost},
                requirements={
                    (k, cp.resource): size for k, size in cp.data_sizes.items()
                },
            )
        )

    edges.sort(key=lambda e: e.key)
    graph = AugmentedGraph(nodes=nodes, edges=tuple(edges), origin=scenario)
    object.__setattr__(graph, "_allowed", _allowed_map(graph))
    return graph


def _allowed_map(graph: AugmentedGraph) -> dict[tuple[str, str], tuple[str, ...]]:
    scenario = graph.origin
    all_k = [k.id for k in scenario.commodities]
    allowed: dict[tuple[str, str], tuple[str, ...]] = {}
    for e in graph.edges:
        if e.kind == EdgeKind.COMM:
            allowed[e.key] = tuple(all_k)
        elif e.kind == EdgeKind.SOURCE:
            u = e.head
            allowed[e.key] = tuple(
                k.id for k in scenario.commodities if k.source_node == u
            )
        elif e.kind == EdgeKind.SINK:
            u = e.tail
            allowed[e.key] = tuple(
                k.id for k in scenario.commodities if k.dest_node == u
            )
        else:  # COMP
            comp_node = e.tail if e.tail.startswith("comp:") else e.head
            sid = comp_node.split(":", 2)[2]
            producible = set(scenario.edge_params.compute[sid].requirements)
            # a source commodity is never produced by a function
            producible = {
                k for k in producible if not scenario.commodity(k).is_source
            }
            if e.tail == comp_node:  # outbound: carries produced commodities
                allowed[e.key] = tuple(sorted(producible))
            else:  # inbound: carries the inputs of anything producible here
                ins: set[str] = set()
                for k in producible:
                    ins.update(scenario.commodity(k).inputs)
                allowed[e.key] = tuple(sorted(ins))
    return allowed


def arrival_rates(
    flows: FlowAssignment, scenario: Scenario
) -> tuple[dict[tuple[tuple[str, str], str], float], dict[tuple[str, str], float]]:
    """Per-(edge, commodity) and per-edge request arrival rates."""
    per_k: dict[tuple[tuple[str, str], str], float] = {}
    per_edge: dict[tuple[str, str], float] = {}
    for (edge_key, k), f in flows.values.items():
        lam = f * scenario.arrival_rate_of(k)
        per_k[(edge_key, k)] = lam
        per_edge[edge_key] = per_edge.get(edge_key, 0.0) + lam
    return per_k, per_edge


def topological_commodities(service: ServiceGraph) -> list[Commodity]:
    """Commodities of one service sorted so inputs precede consumers."""
    order: list[Commodity] = []
    done: set[str] = set()

    def visit(k: Commodity):
        if k.id in done:
            return
        for j in k.inputs:
            visit(service.commodity(j))
        done.add(k.id)
        order.append(k)

    for k in service.commodities:
        visit(k)
    return order
