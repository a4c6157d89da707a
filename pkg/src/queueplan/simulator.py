"""Discrete-event oracle for single-server FCFS queues.

Simulates Poisson arrivals with commodity-mixture exponential service on one
queue, which is exactly the stochastic model the analytic formulas describe.
The waiting-time sequence of such a queue is the reflected random walk
W_{n+1} = max(0, W_n + S_n - A_{n+1}), evaluated here in closed vectorized
form (cumulative sums plus a running minimum), so a million arrivals cost a
few array passes instead of an event loop.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .model import Allocation, AugmentedGraph, FlowAssignment, QueueModel
from .queueing import (
    DelayReport,
    InstabilityError,
    QueueLoad,
    _edge_loads,
    mg1_components,
    topological_commodities,
)


@dataclass(frozen=True)
class SimConfig:
    loads: Mapping[str, QueueLoad]  # resource -> offered load
    horizon: int = 1_000_000
    warmup: int = -1  # arrivals discarded; default 10% of horizon
    seed: int = 0
    replications: int = 5

    @property
    def effective_warmup(self) -> int:
        return self.horizon // 10 if self.warmup < 0 else self.warmup


@dataclass
class QueueStats:
    mean_sojourn: dict[str, float]
    stderr_sojourn: dict[str, float]
    mean_wait: float
    stderr_wait: float
    utilization: float
    stderr_utilization: float
    mean_queue_length: float
    stderr_queue_length: float


@dataclass
class SimResult:
    per_resource: dict[str, QueueStats]
    mean_sojourn_max: dict[str, float] = field(default_factory=dict)
    stderr_sojourn_max: dict[str, float] = field(default_factory=dict)

    def stats(self) -> QueueStats:
        """Stats of the single simulated resource (common case)."""
        (only,) = self.per_resource.values()
        return only


def _waits(service: np.ndarray, interarrival: np.ndarray) -> np.ndarray:
    # W_n = C_n - min_{j<=n} C_j with C_n the random walk of S - A increments
    inc = service[:-1] - interarrival[1:]
    walk = np.empty(len(service))
    walk[0] = 0.0
    np.cumsum(inc, out=walk[1:])
    return walk - np.minimum.accumulate(walk)


def _time_average_queue_length(
    arrivals: np.ndarray, departures: np.ndarray
) -> float:
    """Mean number in system over the observation window, by event sweep."""
    t0, t1 = arrivals[0], departures.max()
    times = np.concatenate([arrivals, np.sort(departures)])
    deltas = np.concatenate([np.ones(len(arrivals)), -np.ones(len(departures))])
    order = np.argsort(times, kind="stable")
    times, deltas = times[order], deltas[order]
    counts = np.cumsum(deltas)
    area = np.sum(counts[:-1] * np.diff(times))
    return float(area / (t1 - t0)) if t1 > t0 else 0.0


def _simulate_once(
    load_by_resource: Mapping[str, QueueLoad], horizon: int, warmup: int, rng
) -> dict:
    """One replication; all resources see the same arrival sequence."""
    any_load = next(iter(load_by_resource.values()))
    items = [it for it in any_load.items if it.lam > 0]
    if not items:
        raise ValueError("aggregate arrival rate is zero")
    lam_total = sum(it.lam for it in items)
    probs = np.array([it.lam / lam_total for it in items])
    interarrival = rng.exponential(1.0 / lam_total, size=horizon)
    arrivals = np.cumsum(interarrival)
    which = rng.choice(len(items), size=horizon, p=probs)

    out: dict = {"per_resource": {}, "which": which, "items": [it.commodity for it in items]}
    sojourn_stack = []
    for r, load in load_by_resource.items():
        ex2, rho, _ = mg1_components(load)
        if rho >= 1:
            raise InstabilityError(f"utilization {rho:g} >= 1 on resource {r}", resource=r)
        # request service rate per commodity on this resource
        nus = np.array(
            [
                load.mu / it.requirement if it.requirement > 0 else math.inf
                for it in load.items
                if it.lam > 0
            ]
        )
        mean_service = np.where(np.isinf(nus), 0.0, 1.0 / nus)
        service = rng.exponential(1.0, size=horizon) * mean_service[which]
        waits = _waits(service, interarrival)
        sojourns = waits + service
        departures = arrivals + sojourns
        sel = slice(warmup, None)
        per_k_mean = {}
        for idx, it in enumerate([it for it in load.items if it.lam > 0]):
            mask = which[sel.start:] == idx
            per_k_mean[it.commodity] = (
                float(sojourns[sel][mask].mean()) if mask.any() else 0.0
            )
        busy = float(service[sel].sum())
        span = float(departures[sel].max() - arrivals[sel.start])
        out["per_resource"][r] = {
            "sojourn": per_k_mean,
            "wait": float(waits[sel].mean()),
            "utilization": busy / span if span > 0 else 0.0,
            "queue_length": _time_average_queue_length(
                arrivals[sel], departures[sel]
            ),
        }
        sojourn_stack.append(sojourns)
    if len(sojourn_stack) > 1:
        worst = np.maximum.reduce(sojourn_stack)
        sel = slice(warmup, None)
        out["max_sojourn"] = {
            it: float(worst[sel][which[sel.start:] == idx].mean())
            for idx, it in enumerate(out["items"])
        }
    return out


def _mean_stderr(samples: list[float]) -> tuple[float, float]:
    arr = np.asarray(samples, dtype=float)
    mean = float(arr.mean())
    if len(arr) < 2:
        return mean, math.inf
    return mean, float(arr.std(ddof=1) / math.sqrt(len(arr)))


def simulate_queue(config: SimConfig) -> SimResult:
    """Replicated simulation of one queue (or one queue per resource fed by a
    common arrival stream, for multi-resource computation edges).

    Refuses unstable loads: no steady state exists at rho >= 1.  Streams are
    split per replication from the config seed, so results are reproducible
    and independent across replications.
    """
    if config.horizon <= config.effective_warmup:
        raise ValueError("horizon must exceed warmup")
    if config.replications < 1:
        raise ValueError("need at least one replication")
    root = np.random.SeedSequence(config.seed)
    reps = []
    for child in root.spawn(config.replications):
        rng = np.random.default_rng(child)
        reps.append(
            _simulate_once(
                config.loads, config.horizon, config.effective_warmup, rng
            )
        )

    result = SimResult(per_resource={})
    for r in config.loads:
        commodities = reps[0]["items"]
        sojourn = {}
        stderr = {}
        for k in commodities:
            sojourn[k], stderr[k] = _mean_stderr(
                [rep["per_resource"][r]["sojourn"][k] for rep in reps]
            )
        wait, wait_se = _mean_stderr([rep["per_resource"][r]["wait"] for rep in reps])
        util, util_se = _mean_stderr(
            [rep["per_resource"][r]["utilization"] for rep in reps]
        )
        qlen, qlen_se = _mean_stderr(
            [rep["per_resource"][r]["queue_length"] for rep in reps]
        )
        result.per_resource[r] = QueueStats(
            mean_sojourn=sojourn,
            stderr_sojourn=stderr,
            mean_wait=wait,
            stderr_wait=wait_se,
            utilization=util,
            stderr_utilization=util_se,
            mean_queue_length=qlen,
            stderr_queue_length=qlen_se,
        )
    if "max_sojourn" in reps[0]:
        for k in reps[0]["items"]:
            result.mean_sojourn_max[k], result.stderr_sojourn_max[k] = _mean_stderr(
                [rep["max_sojourn"][k] for rep in reps]
            )
    return result


@dataclass
class SolutionSimResult:
    span_latency: dict[str, float]
    cumulative_latency: dict[str, float]
    stderr_cumulative: dict[str, float]
    queue_results: dict[tuple[str, str], SimResult]

    def to_csv(self, analytic: Optional[DelayReport] = None) -> str:
        lines = ["queue,commodity,mean_sojourn_s,stderr_s,rho_emp,rho_analytic"]
        for edge_key in sorted(self.queue_results):
            res = self.queue_results[edge_key]
            for r, stats in res.per_resource.items():
                for k, d in sorted(stats.mean_sojourn.items()):
                    rho_a = ""
                    if analytic is not None:
                        rho_a = analytic.utilizations.get(
                            (edge_key, r),
                            analytic.utilizations.get((edge_key, k, r), ""),
                        )
                        if rho_a != "":
                            rho_a = f"{rho_a:.6g}"
                    lines.append(
                        f"{edge_key[0]}->{edge_key[1]},{k},{d:.9g},"
                        f"{stats.stderr_sojourn[k]:.3g},{stats.utilization:.6g},{rho_a}"
                    )
        return "\n".join(lines) + "\n"


def simulate_solution(
    flows: FlowAssignment,
    allocation: Allocation,
    graph: AugmentedGraph,
    horizon: int = 200_000,
    replications: int = 5,
    seed: int = 0,
) -> SolutionSimResult:
    """Empirical end-to-end latency of an integral embedding.

    Each active queue is simulated independently with its own Poisson input
    (the same independence assumption the analytic model makes); the
    per-queue empirical means are composed along the service DAG recursion.
    For multi-resource computation edges the max of per-resource means is
    used, matching the analytic delay metric.
    """
    if not flows.integral:
        raise ValueError("a-posteriori simulation needs integral flows")
    scenario = graph.origin
    root = np.random.SeedSequence(seed)
    queue_results: dict[tuple[str, str], SimResult] = {}
    edge_mean: dict[tuple[tuple[str, str], str], float] = {}
    edge_var: dict[tuple[tuple[str, str], str], float] = {}

    active = [
        e
        for e in graph.delay_edges
        if any(flows.get(e.key, k) > 0.5 for k in graph.allowed_commodities(e))
    ]
    for edge, child in zip(active, root.spawn(max(len(active), 1))):
        carried = [
            k for k in graph.allowed_commodities(edge) if flows.get(edge.key, k) > 0.5
        ]
        if edge.queue_model == QueueModel.GR:
            # one dedicated queue per commodity and resource
            for k in carried:
                loads = _edge_loads(edge, graph, flows, allocation, k)
                loads = {r: l for r, l in loads.items() if l.item(k).requirement > 0}
                if not loads:
                    edge_mean[(edge.key, k)] = 0.0
                    edge_var[(edge.key, k)] = 0.0
                    continue
                res = simulate_queue(
                    SimConfig(
                        loads,
                        horizon=horizon,
                        seed=int(child.generate_state(1)[0]) ^ zlib.crc32(k.encode()),
                        replications=replications,
                    )
                )
                queue_results[edge.key] = res
                if res.mean_sojourn_max:
                    edge_mean[(edge.key, k)] = res.mean_sojourn_max[k]
                    edge_var[(edge.key, k)] = res.stderr_sojourn_max[k] ** 2
                else:
                    stats = res.stats()
                    edge_mean[(edge.key, k)] = stats.mean_sojourn[k]
                    edge_var[(edge.key, k)] = stats.stderr_sojourn[k] ** 2
        else:
            loads = _edge_loads(edge, graph, flows, allocation, carried[0])
            res = simulate_queue(
                SimConfig(
                    loads,
                    horizon=horizon,
                    seed=int(child.generate_state(1)[0]),
                    replications=replications,
                )
            )
            queue_results[edge.key] = res
            for k in carried:
                per_r = [
                    (stats.mean_sojourn.get(k, 0.0), stats.stderr_sojourn.get(k, 0.0))
                    for stats in res.per_resource.values()
                    ]
                best = max(per_r, key=lambda t: t[0])
                edge_mean[(edge.key, k)] = best[0]
                edge_var[(edge.key, k)] = best[1] ** 2

    span: dict[str, float] = {}
    span_var: dict[str, float] = {}
    cum: dict[str, float] = {}
    cum_var: dict[str, float] = {}
    for svc in scenario.services:
        for k in topological_commodities(svc):
            s = sum(
                edge_mean.get((e.key, k.id), 0.0)
                for e in graph.delay_edges
                if flows.get(e.key, k.id) > 0.5
            )
            v = sum(
                edge_var.get((e.key, k.id), 0.0)
                for e in graph.delay_edges
                if flows.get(e.key, k.id) > 0.5
            )
            span[k.id], span_var[k.id] = s, v
            if k.is_source:
                cum[k.id], cum_var[k.id] = s, v
            else:
                j_best = max(k.inputs, key=lambda j: cum[j])
                cum[k.id] = s + cum[j_best]
                cum_var[k.id] = v + cum_var[j_best]
    return SolutionSimResult(
        span_latency=span,
        cumulative_latency=cum,
        stderr_cumulative={k: math.sqrt(v) for k, v in cum_var.items()},
        queue_results=queue_results,
    )
