"""Randomized rounding of fractional flows to integral service embeddings.

A fractional flow over the augmented graph is a convex-combination of
integral embeddings (one production chain per service).  We recover the
combination by repeatedly tracing a positive-flow embedding backward from
each destination and peeling off its bottleneck fraction, then sample one
embedding per service with probability proportional to its fraction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .model import (
    AugmentedGraph,
    EdgeKind,
    FlowAssignment,
    consumers_of,
)

PEEL_TOL = 1e-7
RESIDUAL_LIMIT = 1e-4
MAX_EMBEDDINGS = 500


class RoundingError(RuntimeError):
    """The fractional flow could not be decomposed into embeddings."""


@dataclass(frozen=True)
class Embedding:
    """One integral flow pattern for a single service, with its weight."""

    flows: dict
    weight: float


def _is_integral(values: dict, tol: float = 1e-6) -> bool:
    return all(min(abs(v), abs(v - 1.0)) <= tol for v in values.values())


def _trace_commodity(graph, scenario, k, node, residual, used, visited):
    """Walk commodity `k` backward from `node` along positive residual flow.

    Chooses the incoming edge with the largest residual at each step;
    recurses into the inputs of a produced commodity when the walk reaches
    its computation edge.
    """
    while True:
        candidates = []
        for e in graph.in_edges(node):
            if k not in graph.allowed_commodities(e):
                continue
            r = residual.get((e.key, k), 0.0)
            if r <= PEEL_TOL or (e.key, k) in used:
                continue
            if e.kind == EdgeKind.COMM and e.tail in visited:
                continue
            candidates.append((r, e))
        if not candidates:
            raise RoundingError(
                f"no residual flow for commodity {k} arriving at {node}"
            )
        _, edge = max(candidates, key=lambda item: item[0])
        used.add((edge.key, k))
        if edge.kind == EdgeKind.SOURCE:
            return
        if edge.kind == EdgeKind.COMP:
            # production point: each input must arrive at this node and
            # cross its computation-input edge
            comp_node = edge.tail
            for j in scenario.commodity(k).inputs:
                used.add(((node, comp_node), j))
                _trace_commodity(graph, scenario, j, node, residual, used, {node})
            return
        visited.add(node)
        node = edge.tail


def _cancel_cycles(residual: dict, graph: AugmentedGraph, kids: set) -> None:
    """Remove circulation from each commodity's flow in place.

    The optimizer prices activations, not flow volume, so a solution may
    carry cost-free circulation on already-activated links; such cycles
    carry no traffic from production to consumption but derail the
    backward peel.  Only COMM edges can form a per-commodity cycle.
    """
    for k in kids:
        while True:
            g = nx.DiGraph()
            for e in graph.edges:
                if e.kind != EdgeKind.COMM:
                    continue
                if residual.get((e.key, k), 0.0) > PEEL_TOL:
                    g.add_edge(*e.key)
            try:
                cycle = nx.find_cycle(g)
            except nx.NetworkXNoCycle:
                break
            slack = min(residual[((t, h), k)] for t, h in cycle)
            for t, h in cycle:
                left = residual[((t, h), k)] - slack
                if left <= PEEL_TOL:
                    residual.pop(((t, h), k), None)
                else:
                    residual[((t, h), k)] = left


def decompose_service(
    fractional: FlowAssignment, graph: AugmentedGraph, service_id: str
) -> list[Embedding]:
    """Peel a service's fractional flow into weighted integral embeddings."""
    scenario = graph.origin
    svc = scenario.service(service_id)
    kids = {k.id for k in svc.commodities}
    residual = {
        key: v
        for key, v in fractional.values.items()
        if key[1] in kids and v > PEEL_TOL
    }
    _cancel_cycles(residual, graph, kids)
    dests = [k for k in svc.commodities if k.dest_node is not None]
    if not dests:
        raise RoundingError(f"service {service_id} has no destination commodity")

    embeddings: list[Embedding] = []

    def sink_residual():
        return max(
            residual.get(((k.dest_node, f"cons:{k.dest_node}"), k.id), 0.0)
            for k in dests
        )

    while sink_residual() > PEEL_TOL:
        if len(embeddings) >= MAX_EMBEDDINGS:
            break
        used: set = set()
        try:
            for k in dests:
                used.add(((k.dest_node, f"cons:{k.dest_node}"), k.id))
                _trace_commodity(
                    graph, scenario, k.id, k.dest_node, residual, used, set()
                )
            fraction = min(residual.get(key, 0.0) for key in used)
        except RoundingError:
            # solver-tolerance crumbs can strand a sliver of sink flow with
            # no coherent path behind it; acceptable below the residual limit
            if embeddings and sink_residual() <= RESIDUAL_LIMIT:
                break
            raise
        if fraction <= PEEL_TOL:
            if embeddings and sink_residual() <= RESIDUAL_LIMIT:
                break
            raise RoundingError(
                f"degenerate embedding fraction for service {service_id}"
            )
        for key in used:
            left = residual.get(key, 0.0) - fraction
            if left <= PEEL_TOL:
                residual.pop(key, None)
            else:
                residual[key] = left
        embeddings.append(Embedding({key: 1.0 for key in used}, fraction))

    if sink_residual() > RESIDUAL_LIMIT:
        raise RoundingError(
            f"decomposition residual {sink_residual():.2e} exceeds "
            f"{RESIDUAL_LIMIT:.0e} for service {service_id}"
        )
    if not embeddings:
        raise RoundingError(f"no flow reaches the destinations of {service_id}")
    total = sum(e.weight for e in embeddings)
    return [Embedding(e.flows, e.weight / total) for e in embeddings]


def round_flows(
    fractional: FlowAssignment,
    graph: AugmentedGraph,
    seed: int = 0,
    samples: int = 1,
) -> list[FlowAssignment]:
    """Sample integral flow assignments from a fractional solution.

    Each sample independently picks one embedding per service with
    probability equal to its peeled fraction.  Integral inputs pass through
    unchanged.
    """
    if _is_integral(fractional.values):
        snapped = {
            key: round(v) * 1.0 for key, v in fractional.values.items() if v > 0.5
        }
        return [FlowAssignment(snapped, integral=True)]

    per_service = {
        svc.id: decompose_service(fractional, graph, svc.id)
        for svc in graph.origin.services
    }
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max(samples, 1)):
        merged: dict = {}
        for sid in sorted(per_service):
            embeddings = per_service[sid]
            weights = np.array([e.weight for e in embeddings])
            idx = rng.choice(len(embeddings), p=weights / weights.sum())
            merged.update(embeddings[idx].flows)
        out.append(FlowAssignment(merged, integral=True))
    return out


# ---------------------------------------------------------------------------
# Exhaustive enumeration (oracle for small instances)
# ---------------------------------------------------------------------------

def enumerate_embeddings(graph: AugmentedGraph, service_id: str):
    """Yield every integral embedding of one service: each choice of
    production node per derived commodity crossed with each simple routing
    path per commodity.  Exponential; intended for tiny instances."""
    scenario = graph.origin
    svc = scenario.service(service_id)
    comm_graph = nx.DiGraph()
    comm_graph.add_nodes_from(scenario.network.nodes)
    for e in graph.edges:
        if e.kind == EdgeKind.COMM:
            comm_graph.add_edge(e.tail, e.head)

    derived = [k for k in svc.commodities if not k.is_source]
    placements = {}
    for k in derived:
        sites = [
            e.tail
            for e in graph.edges
            if e.kind == EdgeKind.COMP
            and e.tail.startswith("comp:")
            and k.id in graph.allowed_commodities(e)
        ]
        if not sites:
            return
        placements[k.id] = sites

    def consumption_node(k, chosen):
        if k.dest_node is not None:
            return k.dest_node
        consumers = [c for c in consumers_of(scenario, k.id) if c.service == svc.id]
        comp = chosen[consumers[0].id]
        return comp.split(":")[1]

    for combo in itertools.product(*(placements[k.id] for k in derived)):
        chosen = dict(zip((k.id for k in derived), combo))
        path_options = []
        ok = True
        for k in svc.commodities:
            start = (
                k.source_node if k.is_source else chosen[k.id].split(":")[1]
            )
            end = consumption_node(k, chosen)
            paths = (
                [[start]]
                if start == end
                else list(nx.all_simple_paths(comm_graph, start, end))
            )
            if not paths:
                ok = False
                break
            path_options.append((k, start, end, paths))
        if not ok:
            continue
        for picks in itertools.product(*(p[3] for p in path_options)):
            flows: dict = {}
            for (k, start, end, _), path in zip(path_options, picks):
                if k.is_source:
                    flows[((f"prod:{start}", start), k.id)] = 1.0
                else:
                    comp = chosen[k.id]
                    flows[((comp, start), k.id)] = 1.0
                    for j in k.inputs:
                        flows[((start, comp), j)] = 1.0
                for u, v in zip(path, path[1:]):
                    flows[(((u, v)), k.id)] = 1.0
                if k.dest_node is not None:
                    flows[((end, f"cons:{end}"), k.id)] = 1.0
            yield FlowAssignment(flows, integral=True)


def enumerate_joint_embeddings(graph: AugmentedGraph, limit: int = 100_000):
    """Cartesian product of per-service embeddings for a whole scenario."""
    per_service = [
        list(enumerate_embeddings(graph, svc.id)) for svc in graph.origin.services
    ]
    count = 0
    for combo in itertools.product(*per_service):
        merged: dict = {}
        for fa in combo:
            merged.update(fa.values)
        yield FlowAssignment(merged, integral=True)
        count += 1
        if count >= limit:
            return
