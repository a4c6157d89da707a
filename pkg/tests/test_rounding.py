import pytest

from queueplan import (
    FlowAssignment,
    RoundingError,
    build_augmented_graph,
    decompose_service,
    round_flows,
)

from conftest import make_two_node

LOCAL = {
    (("prod:a", "a"), "k1"): 1.0,
    (("a", "comp:a:proc_a"), "k1"): 1.0,
    (("comp:a:proc_a", "a"), "k2"): 1.0,
    (("a", "cons:a"), "k2"): 1.0,
}
REMOTE = {
    (("prod:a", "a"), "k1"): 1.0,
    (("a", "b"), "k1"): 1.0,
    (("b", "comp:b:proc_b"), "k1"): 1.0,
    (("comp:b:proc_b", "b"), "k2"): 1.0,
    (("b", "a"), "k2"): 1.0,
    (("a", "cons:a"), "k2"): 1.0,
}


def mix(p_local: float) -> FlowAssignment:
    values: dict = {}
    for key, v in LOCAL.items():
        values[key] = values.get(key, 0.0) + p_local * v
    for key, v in REMOTE.items():
        values[key] = values.get(key, 0.0) + (1 - p_local) * v
    return FlowAssignment(values, integral=False)


@pytest.fixture(scope="module")
def graph():
    return build_augmented_graph(make_two_node())


def assert_valid_embedding(flows: FlowAssignment, graph):
    sc = graph.origin
    # integrality
    for v in flows.values.values():
        assert v in (0.0, 1.0)
    # (a1) conservation at every network node
    for u in sc.network.nodes:
        for k in sc.commodities:
            inflow = sum(flows.get(e.key, k.id) for e in graph.in_edges(u))
            outflow = sum(flows.get(e.key, k.id) for e in graph.out_edges(u))
            assert inflow == outflow
    # (a2) production coupling: output flow equals each input's inbound flow
    for e in graph.edges:
        if not e.tail.startswith("comp:"):
            continue
        for k in graph.allowed_commodities(e):
            for j in sc.commodity(k).inputs:
                assert flows.get(e.key, k) == flows.get((e.head, e.tail), j)
    # (a4) pinned destinations
    for k in sc.commodities:
        if k.dest_node is not None:
            assert flows.get((k.dest_node, f"cons:{k.dest_node}"), k.id) == 1.0


def test_decomposition_recovers_the_mixture(graph):
    embeddings = decompose_service(mix(0.7), graph, "svc")
    assert len(embeddings) == 2
    weights = sorted(e.weight for e in embeddings)
    assert weights == pytest.approx([0.3, 0.7])


def test_sampling_frequencies_match_weights(graph):
    # acceptance: 1000 seeded samples hit each embedding within +/- 0.05
    fractional = mix(0.7)
    local_key = (("a", "comp:a:proc_a"), "k1")
    hits = 0
    for seed in range(1000):
        (sample,) = round_flows(fractional, graph, seed=seed)
        assert_valid_embedding(sample, graph)
        if sample.get(local_key[0], local_key[1]) == 1.0:
            hits += 1
    assert abs(hits / 1000 - 0.7) <= 0.05


def test_sampling_is_deterministic_per_seed(graph):
    fractional = mix(0.4)
    a = round_flows(fractional, graph, seed=123)[0]
    b = round_flows(fractional, graph, seed=123)[0]
    assert a.values == b.values


def test_integral_input_passes_through(graph):
    (out,) = round_flows(FlowAssignment(dict(LOCAL)), graph, seed=0)
    assert out.integral
    assert out.values == LOCAL


def test_multiple_samples(graph):
    outs = round_flows(mix(0.5), graph, seed=0, samples=8)
    assert len(outs) == 8
    for sample in outs:
        assert_valid_embedding(sample, graph)


def test_tolerance_crumbs_are_ignored(graph):
    # a 1e-6 sliver of stray flow must not break the decomposition
    values = dict(mix(0.7).values)
    values[(("a", "b"), "k2")] = 1e-6
    embeddings = decompose_service(FlowAssignment(values), graph, "svc")
    assert sum(e.weight for e in embeddings) == pytest.approx(1.0)


def test_unroutable_flow_raises(graph):
    # destination demands flow that never leaves the production node
    broken = FlowAssignment({(("a", "cons:a"), "k2"): 1.0})
    with pytest.raises(RoundingError):
        decompose_service(broken, graph, "svc")
