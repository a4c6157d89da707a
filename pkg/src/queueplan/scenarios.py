"""Scenario file I/O, built-in experiment generators, and parameter sweeps.

Scenario files are JSON documents (``schema_version`` 1) describing the
network, the hosted compute systems, the service DAGs, and the queueing
parameters of every edge.  Two generators build the bundled experiment
setups: a two-service speech/language pipeline offloading between a cloud
and an edge node, and a multi-stage media pipeline that may push the final
rendering step onto a resource-poor but free user device.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import (
    CommLinkParams,
    Commodity,
    ComputeParams,
    EdgeParams,
    NetworkGraph,
    QueueModel,
    Resource,
    Scenario,
    ServiceGraph,
)
from .optimizer import SolveOptions, Solution, baseline_private_model, sparq_solve

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _link_key(link: tuple[str, str]) -> str:
    return f"{link[0]}|{link[1]}"


def _comm_to_dict(p: CommLinkParams) -> dict:
    return {
        "queue_model": p.queue_model.value,
        "resource": p.resource,
        "capacity": p.capacity,
        "unit_cost": p.unit_cost,
        "data_sizes": dict(p.data_sizes),
    }


def _comm_from_dict(doc: dict) -> CommLinkParams:
    return CommLinkParams(
        queue_model=QueueModel(doc["queue_model"]),
        resource=doc["resource"],
        capacity=doc["capacity"],
        unit_cost=doc["unit_cost"],
        data_sizes=dict(doc["data_sizes"]),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    ep = scenario.edge_params
    return {
        "schema_version": SCHEMA_VERSION,
        "resources": [
            {"id": r.id, "name": r.name} for r in scenario.resources
        ],
        "network": {
            "nodes": list(scenario.network.nodes),
            "links": [list(l) for l in scenario.network.links],
            "hosted_systems": {
                node: list(systems)
                for node, systems in scenario.network.hosted_systems.items()
            },
        },
        "services": [
            {
                "id": s.id,
                "arrival_rate": s.arrival_rate,
                "latency_limits": dict(s.latency_limits),
                "commodities": [
                    {
                        "id": k.id,
                        "inputs": list(k.inputs),
                        "source_node": k.source_node,
                        "dest_node": k.dest_node,
                    }
                    for k in s.commodities
                ],
            }
            for s in scenario.services
        ],
        "edge_params": {
            "comm_default": _comm_to_dict(ep.comm_default)
            if ep.comm_default
            else None,
            "comm_overrides": {
                _link_key(link): _comm_to_dict(p)
                for link, p in ep.comm_overrides.items()
            },
            "compute": {
                sid: {
                    "queue_model": p.queue_model.value,
                    "capacities": dict(p.capacities),
                    "unit_costs": dict(p.unit_costs),
                    "requirements": {
                        k: dict(r) for k, r in p.requirements.items()
                    },
                }
                for sid, p in ep.compute.items()
            },
        },
    }


def scenario_from_dict(doc: dict) -> Scenario:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version!r}")
    net = doc["network"]
    ep = doc["edge_params"]
    return Scenario(
        network=NetworkGraph(
            nodes=tuple(net["nodes"]),
            links=tuple(tuple(l) for l in net["links"]),
            hosted_systems={
                node: tuple(systems)
                for node, systems in net.get("hosted_systems", {}).items()
            },
        ),
        services=tuple(
            ServiceGraph(
                id=s["id"],
                arrival_rate=s["arrival_rate"],
                latency_limits=dict(s["latency_limits"]),
                commodities=tuple(
                    Commodity(
                        id=k["id"],
                        service=s["id"],
                        inputs=tuple(k["inputs"]),
                        source_node=k.get("source_node"),
                        dest_node=k.get("dest_node"),
                    )
                    for k in s["commodities"]
                ),
            )
            for s in doc["services"]
        ),
        resources=tuple(
            Resource(id=r["id"], name=r.get("name", "")) for r in doc["resources"]
        ),
        edge_params=EdgeParams(
            comm_default=_comm_from_dict(ep["comm_default"])
            if ep.get("comm_default")
            else None,
            comm_overrides={
                tuple(key.split("|")): _comm_from_dict(p)
                for key, p in ep.get("comm_overrides", {}).items()
            },
            compute={
                sid: ComputeParams(
                    queue_model=QueueModel(p["queue_model"]),
                    capacities=dict(p["capacities"]),
                    unit_costs=dict(p["unit_costs"]),
                    requirements={
                        k: dict(r) for k, r in p["requirements"].items()
                    },
                )
                for sid, p in ep.get("compute", {}).items()
            },
        ),
    )


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"
    )


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Built-in experiments
# ---------------------------------------------------------------------------

def experiment_a_scenario(
    speech_rate: float = 150.0, language_rate: float = 100.0
) -> Scenario:
    """Two-service speech/language pipeline on a user-router-cloud chain.

    Service ``phi1`` transcribes a stream generated at user node ``u``;
    service ``phi2`` runs a language model over a second stream, requiring
    double the processing per request.  Both results return to ``u`` within
    100 ms.  Cloud node ``n`` processes cheaply; edge node ``e`` (one hop
    from the user) costs ten times more per unit of rate.  The cloud's
    capacity saturates near the top of the studied arrival-rate range, so
    the edge node activates only under high load.
    """
    bw = CommLinkParams(
        queue_model=QueueModel.SR,
        resource="bw",
        capacity=1600.0,
        unit_cost=5e-4,
        data_sizes={"k1": 1.0, "k2": 1.0, "k3": 1.0, "k4": 1.0},
    )
    compute_req = {"k2": {"cpu": 1.0}, "k4": {"cpu": 2.0}}
    return Scenario(
        network=NetworkGraph(
            nodes=("u", "r1", "r2", "e", "n"),
            links=(
                ("u", "r1"), ("r1", "u"),
                ("r1", "r2"), ("r2", "r1"),
                ("r1", "e"), ("e", "r1"),
                ("r2", "n"), ("n", "r2"),
            ),
            hosted_systems={"n": ("proc_n",), "e": ("proc_e",)},
        ),
        services=(
            ServiceGraph(
                id="phi1",
                arrival_rate=speech_rate,
                latency_limits={"k2": 0.1},
                commodities=(
                    Commodity("k1", "phi1", (), source_node="u"),
                    Commodity("k2", "phi1", ("k1",), dest_node="u"),
                ),
            ),
            ServiceGraph(
                id="phi2",
                arrival_rate=language_rate,
                latency_limits={"k4": 0.1},
                commodities=(
                    Commodity("k3", "phi2", (), source_node="u"),
                    Commodity("k4", "phi2", ("k3",), dest_node="u"),
                ),
            ),
        ),
        resources=(Resource("bw", "link bandwidth"), Resource("cpu", "processing")),
        edge_params=EdgeParams(
            comm_default=bw,
            compute={
                "proc_n": ComputeParams(
                    queue_model=QueueModel.SR,
                    capacities={"cpu": 520.0},
                    unit_costs={"cpu": 1.0},
                    requirements=compute_req,
                ),
                "proc_e": ComputeParams(
                    queue_model=QueueModel.SR,
                    capacities={"cpu": 2400.0},
                    unit_costs={"cpu": 10.0},
                    requirements=compute_req,
                ),
            },
        ),
    )


def experiment_b_scenario(render_latency_limit: float = 0.15) -> Scenario:
    """Multi-stage media pipeline ending in a rendered stream at user ``v``.

    Three raw streams (audio, video, tracking) originate at ``v``.  Feature
    extraction (k4, k5) and rendering (k8) are per-commodity-quota CPU
    steps; the two AI model stages (k6, k7) share a GPU.  The user node
    hosts a tiny rendering-only CPU system with 5% of the capacity of every
    other compute system and zero cost.
    """
    data_sizes = {f"k{i}": 1.0 for i in range(1, 9)}
    bw = CommLinkParams(
        queue_model=QueueModel.SR,
        resource="bw",
        capacity=1600.0,
        unit_cost=5e-4,
        data_sizes=data_sizes,
    )
    cpu_req = {"k4": {"cpu": 1.0}, "k5": {"cpu": 1.0}, "k8": {"cpu": 0.45}}
    gpu_req = {"k6": {"gpu": 8.0}, "k7": {"gpu": 8.0}}

    def cpu_sys(cost: float, capacity: float = 1000.0, req=None) -> ComputeParams:
        return ComputeParams(
            queue_model=QueueModel.GR,
            capacities={"cpu": capacity},
            unit_costs={"cpu": cost},
            requirements=req if req is not None else cpu_req,
        )

    def gpu_sys(cost: float) -> ComputeParams:
        return ComputeParams(
            queue_model=QueueModel.SR,
            capacities={"gpu": 3600.0},
            unit_costs={"gpu": cost},
            requirements=gpu_req,
        )

    return Scenario(
        network=NetworkGraph(
            nodes=("v", "a", "e1", "n"),
            links=(
                ("v", "a"), ("a", "v"),
                ("a", "e1"), ("e1", "a"),
                ("a", "n"), ("n", "a"),
            ),
            hosted_systems={
                "n": ("cpu_n", "gpu_n"),
                "e1": ("cpu_e", "gpu_e"),
                "v": ("cpu_v",),
            },
        ),
        services=(
            ServiceGraph(
                id="fantasia",
                arrival_rate=100.0,
                latency_limits={"k8": render_latency_limit},
                commodities=(
                    Commodity("k1", "fantasia", (), source_node="v"),
                    Commodity("k2", "fantasia", (), source_node="v"),
                    Commodity("k3", "fantasia", (), source_node="v"),
                    Commodity("k4", "fantasia", ("k1",)),
                    Commodity("k5", "fantasia", ("k2",)),
                    Commodity("k6", "fantasia", ("k4",)),
                    Commodity("k7", "fantasia", ("k5", "k3")),
                    Commodity("k8", "fantasia", ("k6", "k7"), dest_node="v"),
                ),
            ),
        ),
        resources=(
            Resource("bw", "link bandwidth"),
            Resource("cpu", "general processing"),
            Resource("gpu", "AI accelerator"),
        ),
        edge_params=EdgeParams(
            comm_default=bw,
            compute={
                "cpu_n": cpu_sys(1.0),
                "gpu_n": gpu_sys(2.0),
                "cpu_e": cpu_sys(5.0),
                "gpu_e": gpu_sys(10.0),
                # user device: 5% of the other systems' capacity, free, and
                # only able to run the final rendering step
                "cpu_v": cpu_sys(0.0, capacity=50.0, req={"k8": {"cpu": 0.45}}),
            },
        ),
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

PARAM_SERVICE_RATE = "service_arrival_rate"
PARAM_LATENCY_LIMIT = "latency_limit"


@dataclass(frozen=True)
class SweepSpec:
    parameter: str  # PARAM_SERVICE_RATE or PARAM_LATENCY_LIMIT
    target: str  # service id or commodity id
    values: tuple[float, ...]
    alphas: tuple[float, ...] = (1.0, 1.2, 1.4, 1.6)
    seed: int = 0
    max_iterations: int = 60

    def __post_init__(self):
        if self.parameter not in (PARAM_SERVICE_RATE, PARAM_LATENCY_LIMIT):
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        diffs = [b - a for a, b in zip(self.values, self.values[1:])]
        if not self.values or (diffs and not (
            all(d > 0 for d in diffs) or all(d < 0 for d in diffs)
        )):
            raise ValueError("sweep values must be strictly monotone")


@dataclass(frozen=True)
class SweepRow:
    value: float
    method: str  # "sparq" or "private_<alpha>"
    cost: float
    latencies: dict[str, float]  # destination commodity -> measured l_T
    feasible: bool
    activated_compute_nodes: tuple[str, ...]


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[SweepRow] = field(default_factory=list)

    def method_rows(self, method: str) -> list[SweepRow]:
        return [r for r in self.rows if r.method == method]

    def to_csv(self) -> str:
        dests = sorted({k for r in self.rows for k in r.latencies})
        buf = io.StringIO()
        header = ["value", "method", "cost", "feasible", "activated_nodes"]
        header += [f"lT_{k}_s" for k in dests]
        buf.write(",".join(header) + "\n")
        for r in self.rows:
            cells = [
                f"{r.value:.9g}",
                r.method,
                f"{r.cost:.9g}",
                str(r.feasible).lower(),
                "+".join(r.activated_compute_nodes) or "-",
            ]
            for k in dests:
                v = r.latencies.get(k)
                cells.append("" if v is None else f"{v:.9g}")
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()


def apply_sweep_point(scenario: Scenario, spec: SweepSpec, value: float) -> Scenario:
    if spec.parameter == PARAM_SERVICE_RATE:
        services = tuple(
            dataclasses.replace(s, arrival_rate=value) if s.id == spec.target else s
            for s in scenario.services
        )
        if not any(s.id == spec.target for s in scenario.services):
            raise KeyError(f"service {spec.target!r} not in scenario")
        return dataclasses.replace(scenario, services=services)
    owner = scenario.commodity(spec.target).service
    services = tuple(
        dataclasses.replace(
            s, latency_limits={**s.latency_limits, spec.target: value}
        )
        if s.id == owner
        else s
        for s in scenario.services
    )
    return dataclasses.replace(scenario, services=services)


def _activated_nodes(solution: Solution) -> tuple[str, ...]:
    nodes = set()
    for tail, head in solution.activated_edges:
        for endpoint in (tail, head):
            if endpoint.startswith("comp:"):
                nodes.add(endpoint.split(":")[1])
    return tuple(sorted(nodes))


def _dest_latencies(scenario: Scenario, solution: Solution) -> dict[str, float]:
    dests = [k.id for k in scenario.commodities if k.dest_node is not None]
    if solution.delays is None:
        return {k: float("inf") for k in dests}
    return {
        k: solution.delays.cumulative_latency.get(k, float("inf")) for k in dests
    }


def run_sweep(scenario: Scenario, spec: SweepSpec) -> SweepResult:
    """Solve every sweep point with the iterative solver and each baseline.

    Infeasible points are recorded with ``feasible = false`` rather than
    dropped; a method that errors outright is recorded with infinite cost.
    """
    result = SweepResult(spec)
    options = SolveOptions(seed=spec.seed, max_iterations=spec.max_iterations)
    for value in spec.values:
        point = apply_sweep_point(scenario, spec, value)
        methods: list[tuple[str, Optional[Solution]]] = []
        try:
            methods.append(("sparq", sparq_solve(point, options)))
        except Exception:
            methods.append(("sparq", None))
        for alpha in spec.alphas:
            try:
                methods.append(
                    (f"private_{alpha:g}", baseline_private_model(point, alpha, options))
                )
            except Exception:
                methods.append((f"private_{alpha:g}", None))
        for tag, sol in methods:
            if sol is None:
                result.rows.append(
                    SweepRow(value, tag, float("inf"), {}, False, ())
                )
                continue
            result.rows.append(
                SweepRow(
                    value=value,
                    method=tag,
                    cost=sol.cost,
                    latencies=_dest_latencies(point, sol),
                    feasible=sol.feasible,
                    activated_compute_nodes=_activated_nodes(sol),
                )
            )
    return result


def emit_tradeoff(result: SweepResult) -> str:
    """Cost-latency pairs per method, sorted by measured latency.

    The worst destination latency of each feasible row is paired with its
    cost; methods with no feasible rows are kept as a note line so a plot
    script can label them.
    """
    buf = io.StringIO()
    buf.write("method,latency_s,cost,latency_limit_s\n")
    methods = sorted({r.method for r in result.rows})
    for method in methods:
        rows = [
            r
            for r in result.method_rows(method)
            if r.feasible and r.latencies
        ]
        if not rows:
            buf.write(f"{method},,,# no feasible points\n")
            continue
        pairs = sorted(
            (max(r.latencies.values()), r.cost, r.value) for r in rows
        )
        for latency, cost, value in pairs:
            limit = (
                value
                if result.spec.parameter == PARAM_LATENCY_LIMIT
                else ""
            )
            buf.write(f"{method},{latency:.9g},{cost:.9g},{limit}\n")
    return buf.getvalue()
