"""Analytic queueing delays: M/M/1, M/G/1, safety-margin bounds, latency.

Every delay-bearing edge of the augmented graph is a single-server FCFS
queue per resource.  GR edges dedicate a queue (and a service-rate quota) to
each commodity, giving independent M/M/1 queues; SR edges share one queue per
resource across commodities, giving an M/G/1 queue whose service time is a
mixture of exponentials.  The bound form replaces the utilization-dependent
denominator with a configured safety margin, which is what the convex
sub-problems optimize against; the exact form is used for a-posteriori
evaluation of integral solutions.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

from .model import (
    Allocation,
    AugmentedEdge,
    AugmentedGraph,
    EdgeKind,
    FlowAssignment,
    QueueModel,
    Scenario,
    topological_commodities,
)

ABS_TOL = 1e-9
FLOW_TOL = 1e-9


class DelayMode(str, Enum):
    EXACT = "EXACT"
    BOUND = "BOUND"


class InstabilityError(ValueError):
    """Offered load reaches or exceeds the service rate."""

    def __init__(self, msg: str, edge=None, commodity=None, resource=None):
        super().__init__(msg)
        self.edge = edge
        self.commodity = commodity
        self.resource = resource


@dataclass(frozen=True)
class CommodityLoad:
    commodity: str
    flow: float  # flow fraction on the edge, in [0, 1]
    arrival_rate: float  # service request rate Lambda of the owning service
    requirement: float  # resource units per request on this edge

    @property
    def lam(self) -> float:
        return self.flow * self.arrival_rate


@dataclass(frozen=True)
class QueueLoad:
    """Offered load of one (edge, resource) queue plus its allocated rate."""

    items: tuple[CommodityLoad, ...]
    mu: float

    def item(self, commodity: str) -> CommodityLoad:
        for it in self.items:
            if it.commodity == commodity:
                return it
        raise KeyError(commodity)

    @property
    def lambda_total(self) -> float:
        return sum(it.lam for it in self.items)

    @property
    def workload(self) -> float:
        return sum(it.lam * it.requirement for it in self.items)


def mm1_sojourn(load: QueueLoad) -> float:
    """Mean sojourn time of a dedicated single-commodity queue.

    Equals 1/(nu - lambda) with nu = mu/R the request service rate.
    """
    if len(load.items) != 1:
        raise ValueError("dedicated queue holds exactly one commodity")
    it = load.items[0]
    if it.requirement == 0:
        return 0.0
    if load.mu <= 0:
        raise InstabilityError("no service rate allocated", commodity=it.commodity)
    nu = load.mu / it.requirement
    if it.lam >= nu:
        raise InstabilityError(
            f"arrival rate {it.lam:g}/s >= service rate {nu:g}/s",
            commodity=it.commodity,
        )
    return 1.0 / (nu - it.lam)


def mg1_components(load: QueueLoad) -> tuple[float, float, float]:
    """Second moment of service time, utilization, total arrival rate.

    The service time of a random request is the commodity mixture of
    exponentials weighted by arrival-rate share; EX2 is 0 by convention for
    an empty queue.
    """
    if load.mu <= 0:
        raise ValueError("mu must be positive")
    lam = load.lambda_total
    rho = load.workload / load.mu
    if lam == 0:
        return 0.0, rho, 0.0
    ex2 = 2.0 * sum(
        (it.lam / lam) * (it.requirement / load.mu) ** 2 for it in load.items
    )
    return ex2, rho, lam


def mg1_sojourn(load: QueueLoad, commodity: str) -> float:
    """Mean sojourn of one commodity in the shared queue (P-K waiting time
    plus the commodity's own mean service time)."""
    ex2, rho, lam = mg1_components(load)
    if rho >= 1:
        raise InstabilityError(f"utilization {rho:g} >= 1", commodity=commodity)
    wait = lam * ex2 / (2.0 * (1.0 - rho)) if lam > 0 else 0.0
    return wait + load.item(commodity).requirement / load.mu


def comp_delay_gr(loads: Mapping[str, QueueLoad], commodity: str) -> float:
    """Computation delay of a commodity on a GR edge: slowest resource wins."""
    worst = 0.0
    for r, load in loads.items():
        if load.item(commodity).requirement == 0:
            continue
        try:
            d = mm1_sojourn(load)
        except InstabilityError as err:
            err.resource = r
            raise
        worst = max(worst, d)
    return worst


def comp_delay_sr(loads: Mapping[str, QueueLoad], commodity: str) -> float:
    """As comp_delay_gr, with the shared-queue sojourn per resource."""
    worst = 0.0
    for r, load in loads.items():
        if load.item(commodity).requirement == 0:
            continue
        try:
            d = mg1_sojourn(load, commodity)
        except InstabilityError as err:
            err.resource = r
            raise
        worst = max(worst, d)
    return worst


def eps_bound_sojourn(
    loads: Mapping[str, QueueLoad],
    commodity: str,
    eps: Mapping[str, float],
) -> float:
    """Safety-margin upper bound on the sojourn time, maxed over resources.

    Per resource the waiting term is sum_j f_j Lambda_j R_j^2 / (eps mu^2)
    and the service term R_k/mu.  The bound dominates the exact sojourn
    whenever rho <= 1 - eps; callers enforcing that margin may treat the
    result as a certified upper bound.
    """
    worst = 0.0
    for r, load in loads.items():
        e = eps[r]
        if not (0.0 < e <= 1.0):
            raise ValueError(f"eps must lie in (0, 1], got {e}")
        if load.mu <= 0:
            raise ValueError("mu must be positive")
        it = load.item(commodity)
        if it.requirement == 0:
            continue
        second = sum(jt.lam * jt.requirement**2 for jt in load.items)
        d = second / (e * load.mu**2) + it.requirement / load.mu
        worst = max(worst, d)
    return worst


def _edge_loads(
    edge: AugmentedEdge,
    graph: AugmentedGraph,
    flows: FlowAssignment,
    allocation: Allocation,
    commodity: str,
) -> Mapping[str, QueueLoad]:
    """Per-resource queue loads seen by `commodity` on a delay edge."""
    scenario = graph.origin
    loads: dict[str, QueueLoad] = {}
    for r in edge.resources:
        if edge.queue_model == QueueModel.GR:
            it = CommodityLoad(
                commodity,
                flows.get(edge.key, commodity),
                scenario.arrival_rate_of(commodity),
                edge.requirement(commodity, r),
            )
            loads[r] = QueueLoad((it,), allocation.gr(edge.key, commodity, r))
        else:
            items = []
            for k in graph.allowed_commodities(edge):
                f = flows.get(edge.key, k)
                if f <= FLOW_TOL and k != commodity:
                    continue
                items.append(
                    CommodityLoad(
                        k, f, scenario.arrival_rate_of(k), edge.requirement(k, r)
                    )
                )
            loads[r] = QueueLoad(tuple(items), allocation.sr(edge.key, r))
    return loads


def edge_delay(
    edge: AugmentedEdge,
    graph: AugmentedGraph,
    flows: FlowAssignment,
    allocation: Allocation,
    commodity: str,
    mode: DelayMode = DelayMode.EXACT,
    eps: Optional[Mapping[tuple[tuple[str, str], str], float]] = None,
) -> float:
    """Sojourn time of one commodity on one augmented edge.

    Dispatches on edge kind and queue model; production, consumption and
    inbound computation edges are delay-less by construction.
    """
    if not edge.has_delay:
        return 0.0
    loads = _edge_loads(edge, graph, flows, allocation, commodity)
    if mode == DelayMode.BOUND:
        if eps is None:
            raise ValueError("BOUND mode needs safety margins")
        margins = {r: eps[(edge.key, r)] for r in loads}
        return eps_bound_sojourn(loads, commodity, margins)
    try:
        if edge.queue_model == QueueModel.GR:
            return comp_delay_gr(loads, commodity)
        return comp_delay_sr(loads, commodity)
    except InstabilityError as err:
        err.edge = edge.key
        raise


@dataclass
class DelayReport:
    edge_delays: dict[tuple[tuple[str, str], str], float] = field(default_factory=dict)
    span_latency: dict[str, float] = field(default_factory=dict)  # l^k
    cumulative_latency: dict[str, float] = field(default_factory=dict)  # l^k_T
    utilizations: dict[tuple, float] = field(default_factory=dict)

    def feasible_against(self, scenario: Scenario, slack: float = 0.0) -> bool:
        for svc in scenario.services:
            for kid, limit in svc.latency_limits.items():
                if self.cumulative_latency.get(kid, math.inf) > limit * (1 + slack):
                    return False
        return True

    def to_csv(self, scenario: Scenario) -> str:
        """Two CSV tables: per-queue delays and per-commodity latencies."""
        buf = io.StringIO()
        buf.write("edge,commodity,resource,delay_s,rho\n")
        rho_by_edge_k: dict[tuple, list[tuple[str, float]]] = {}
        for key, rho in self.utilizations.items():
            if len(key) == 3:  # (edge, commodity, resource) GR
                rho_by_edge_k.setdefault((key[0], key[1]), []).append((key[2], rho))
            else:  # (edge, resource) SR
                rho_by_edge_k.setdefault((key[0], None), []).append((key[1], rho))
        for (edge_key, k), d in sorted(self.edge_delays.items()):
            entries = rho_by_edge_k.get((edge_key, k)) or rho_by_edge_k.get(
                (edge_key, None), []
            )
            for r, rho in sorted(entries):
                buf.write(f"{edge_key[0]}->{edge_key[1]},{k},{r},{d:.9g},{rho:.9g}\n")
        buf.write("commodity,l_s,lT_s,limit_s,feasible\n")
        limits = {
            kid: lim
            for svc in scenario.services
            for kid, lim in svc.latency_limits.items()
        }
        for k in sorted(self.span_latency):
            l = self.span_latency[k]
            lt = self.cumulative_latency[k]
            lim = limits.get(k, "")
            ok = "" if k not in limits else str(lt <= limits[k]).lower()
            buf.write(f"{k},{l:.9g},{lt:.9g},{lim},{ok}\n")
        return buf.getvalue()


def end_to_end_latency(
    flows: FlowAssignment,
    allocation: Allocation,
    graph: AugmentedGraph,
    mode: DelayMode = DelayMode.EXACT,
    eps: Optional[Mapping[tuple[tuple[str, str], str], float]] = None,
) -> DelayReport:
    """Aggregate per-edge sojourns into per-commodity latencies.

    l^k sums flow-weighted edge delays; the cumulative latency is the tight
    solution of the max-plus recursion over the service DAG.
    """
    scenario = graph.origin
    report = DelayReport()

    for edge in graph.delay_edges:
        for k in graph.allowed_commodities(edge):
            f = flows.get(edge.key, k)
            if f <= FLOW_TOL:
                continue
            report.edge_delays[(edge.key, k)] = edge_delay(
                edge, graph, flows, allocation, k, mode, eps
            )
        # utilizations (exact, from the allocation actually in force)
        for r in edge.resources:
            if edge.queue_model == QueueModel.SR:
                mu = allocation.sr(edge.key, r)
                work = sum(
                    flows.get(edge.key, k)
                    * scenario.arrival_rate_of(k)
                    * edge.requirement(k, r)
                    for k in graph.allowed_commodities(edge)
                )
                if mu > 0 or work > 0:
                    report.utilizations[(edge.key, r)] = (
                        work / mu if mu > 0 else math.inf
                    )
            else:
                for k in graph.allowed_commodities(edge):
                    f = flows.get(edge.key, k)
                    if f <= FLOW_TOL:
                        continue
                    mu = allocation.gr(edge.key, k, r)
                    work = f * scenario.arrival_rate_of(k) * edge.requirement(k, r)
                    if mu > 0 or work > 0:
                        report.utilizations[(edge.key, k, r)] = (
                            work / mu if mu > 0 else math.inf
                        )

    for svc in scenario.services:
        for k in topological_commodities(svc):
            span = sum(
                flows.get(e.key, k.id) * report.edge_delays.get((e.key, k.id), 0.0)
                for e in graph.delay_edges
            )
            report.span_latency[k.id] = span
            if k.is_source:
                report.cumulative_latency[k.id] = span
            else:
                report.cumulative_latency[k.id] = span + max(
                    report.cumulative_latency[j] for j in k.inputs
                )
    return report
