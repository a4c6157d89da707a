import dataclasses

import pytest
from hypothesis import given, strategies as st

from queueplan import (
    Commodity,
    EdgeKind,
    FlowAssignment,
    ServiceGraph,
    arrival_rates,
    build_augmented_graph,
    validate_scenario,
)
from queueplan.model import topological_commodities
from queueplan.scenarios import experiment_a_scenario

from conftest import make_single_stage, make_two_node


def test_valid_scenarios_report_no_violations():
    assert validate_scenario(make_single_stage()) == []
    assert validate_scenario(make_two_node()) == []
    assert validate_scenario(experiment_a_scenario()) == []


def test_augmented_graph_shape():
    # 5 network nodes grow production and consumption twins; two hosted
    # systems add one computation node each
    graph = build_augmented_graph(experiment_a_scenario())
    roles = list(graph.nodes.values())
    assert roles.count("network") == 5
    assert roles.count("production") == 5
    assert roles.count("consumption") == 5
    assert roles.count("computation") == 2
    # 10 source/sink edges + 4 computation edges + 8 links
    assert len(graph.edges) == 22
    # only outbound computation edges and links queue requests
    delay_kinds = {e.kind for e in graph.delay_edges}
    assert delay_kinds == {EdgeKind.COMP, EdgeKind.COMM}
    assert len(graph.delay_edges) == 2 + 8


def test_computation_edge_carries_requirements():
    graph = build_augmented_graph(experiment_a_scenario())
    out_edge = graph.edge(("comp:n:proc_n", "n"))
    assert out_edge.requirement("k2", "cpu") == 1.0
    assert out_edge.requirement("k4", "cpu") == 2.0
    assert out_edge.has_delay
    in_edge = graph.edge(("n", "comp:n:proc_n"))
    assert not in_edge.has_delay


def test_allowed_commodities():
    graph = build_augmented_graph(experiment_a_scenario())
    # outputs on the outbound computation edge, their inputs on the inbound
    assert graph.allowed_commodities(graph.edge(("comp:n:proc_n", "n"))) == (
        "k2",
        "k4",
    )
    assert graph.allowed_commodities(graph.edge(("n", "comp:n:proc_n"))) == (
        "k1",
        "k3",
    )
    # production only emits source commodities of that node, consumption
    # only accepts pinned destinations
    assert graph.allowed_commodities(graph.edge(("prod:u", "u"))) == ("k1", "k3")
    assert graph.allowed_commodities(graph.edge(("u", "cons:u"))) == ("k2", "k4")
    assert graph.allowed_commodities(graph.edge(("prod:n", "n"))) == ()


def _with_service(scenario, service):
    return dataclasses.replace(scenario, services=(service,))


def test_validate_rejects_cycles():
    sc = make_single_stage()
    svc = ServiceGraph(
        id="svc",
        arrival_rate=1.0,
        latency_limits={"k2": 0.1},
        commodities=(
            Commodity("k1", "svc", ("k2",), source_node=None),
            Commodity("k2", "svc", ("k1",), dest_node="u"),
        ),
    )
    assert any("cycle" in v for v in validate_scenario(_with_service(sc, svc)))


def test_validate_rejects_fanout():
    sc = make_single_stage()
    svc = ServiceGraph(
        id="svc",
        arrival_rate=1.0,
        latency_limits={"k2": 0.1, "k3": 0.1},
        commodities=(
            Commodity("k1", "svc", (), source_node="u"),
            Commodity("k2", "svc", ("k1",), dest_node="u"),
            Commodity("k3", "svc", ("k1",), dest_node="u"),
        ),
    )
    assert any("fan-out" in v for v in validate_scenario(_with_service(sc, svc)))


def test_validate_rejects_missing_latency_limit():
    sc = make_single_stage()
    svc = dataclasses.replace(sc.services[0], latency_limits={})
    assert any(
        "latency limit" in v for v in validate_scenario(_with_service(sc, svc))
    )


def test_validate_rejects_unknown_nodes():
    sc = make_single_stage()
    svc = ServiceGraph(
        id="svc",
        arrival_rate=1.0,
        latency_limits={"k2": 0.1},
        commodities=(
            Commodity("k1", "svc", (), source_node="ghost"),
            Commodity("k2", "svc", ("k1",), dest_node="u"),
        ),
    )
    assert any("unknown source" in v for v in validate_scenario(_with_service(sc, svc)))


def test_validate_rejects_nonpositive_rate():
    sc = make_single_stage()
    svc = dataclasses.replace(sc.services[0], arrival_rate=0.0)
    assert any("arrival rate" in v for v in validate_scenario(_with_service(sc, svc)))


def test_topological_order_puts_inputs_first():
    svc = experiment_a_scenario().services[0]
    order = [k.id for k in topological_commodities(svc)]
    assert order.index("k1") < order.index("k2")


@given(st.floats(min_value=0.1, max_value=1000.0))
def test_arrival_rates_scale_with_flow(rate):
    sc = make_single_stage(arrival_rate=rate)
    flows = FlowAssignment(
        {
            (("prod:u", "u"), "k1"): 1.0,
            (("comp:u:sys", "u"), "k2"): 0.5,
        }
    )
    per_k, per_edge = arrival_rates(flows, sc)
    assert per_k[(("prod:u", "u"), "k1")] == pytest.approx(rate)
    assert per_k[(("comp:u:sys", "u"), "k2")] == pytest.approx(0.5 * rate)
    assert per_edge[("comp:u:sys", "u")] == pytest.approx(0.5 * rate)


def test_edge_order_is_canonical():
    g1 = build_augmented_graph(experiment_a_scenario())
    g2 = build_augmented_graph(experiment_a_scenario())
    assert [e.key for e in g1.edges] == [e.key for e in g2.edges]
    assert [e.key for e in g1.edges] == sorted(e.key for e in g1.edges)
