import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from queueplan import (  # noqa: E402
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


def make_single_stage(
    arrival_rate: float = 10.0,
    requirement: float = 1.0,
    capacity: float = 100.0,
    unit_cost: float = 1.0,
    latency_limit: float = 0.1,
    queue_model: QueueModel = QueueModel.GR,
) -> Scenario:
    """One node hosting one compute system; source and sink colocated.

    The only queue is the computation edge, so the optimum has the closed
    form mu = R * (Lambda + R / L): the latency constraint is met with
    equality by a single M/M/1 (or single-class M/G/1, identical here).
    """
    return Scenario(
        network=NetworkGraph(
            nodes=("u",), links=(), hosted_systems={"u": ("sys",)}
        ),
        services=(
            ServiceGraph(
                id="svc",
                arrival_rate=arrival_rate,
                latency_limits={"k2": latency_limit},
                commodities=(
                    Commodity("k1", "svc", (), source_node="u"),
                    Commodity("k2", "svc", ("k1",), dest_node="u"),
                ),
            ),
        ),
        resources=(Resource("bw", "bandwidth"), Resource("cpu", "compute")),
        edge_params=EdgeParams(
            comm_default=CommLinkParams(
                queue_model=QueueModel.SR,
                resource="bw",
                capacity=100.0,
                unit_cost=1e-3,
                data_sizes={"k1": 1.0, "k2": 1.0},
            ),
            compute={
                "sys": ComputeParams(
                    queue_model=queue_model,
                    capacities={"cpu": capacity},
                    unit_costs={"cpu": unit_cost},
                    requirements={"k2": {"cpu": requirement}},
                )
            },
        ),
    )


def make_two_node(
    arrival_rate: float = 10.0,
    cheap_cost: float = 1.0,
    pricy_cost: float = 10.0,
    cheap_capacity: float = 200.0,
    latency_limit: float = 0.5,
) -> Scenario:
    """Source/sink node `a` linked to node `b`; both host a compute system.

    `b` is cheap, `a` is pricy: with a loose latency limit the optimum
    computes remotely, with a tight one locally.
    """
    return Scenario(
        network=NetworkGraph(
            nodes=("a", "b"),
            links=(("a", "b"), ("b", "a")),
            hosted_systems={"a": ("proc_a",), "b": ("proc_b",)},
        ),
        services=(
            ServiceGraph(
                id="svc",
                arrival_rate=arrival_rate,
                latency_limits={"k2": latency_limit},
                commodities=(
                    Commodity("k1", "svc", (), source_node="a"),
                    Commodity("k2", "svc", ("k1",), dest_node="a"),
                ),
            ),
        ),
        resources=(Resource("bw", "bandwidth"), Resource("cpu", "compute")),
        edge_params=EdgeParams(
            comm_default=CommLinkParams(
                queue_model=QueueModel.SR,
                resource="bw",
                capacity=500.0,
                unit_cost=1e-3,
                data_sizes={"k1": 1.0, "k2": 1.0},
            ),
            compute={
                "proc_a": ComputeParams(
                    queue_model=QueueModel.SR,
                    capacities={"cpu": 200.0},
                    unit_costs={"cpu": pricy_cost},
                    requirements={"k2": {"cpu": 1.0}},
                ),
                "proc_b": ComputeParams(
                    queue_model=QueueModel.SR,
                    capacities={"cpu": cheap_capacity},
                    unit_costs={"cpu": cheap_cost},
                    requirements={"k2": {"cpu": 1.0}},
                ),
            },
        ),
    )


@pytest.fixture
def single_stage():
    return make_single_stage()


@pytest.fixture
def two_node():
    return make_two_node()
