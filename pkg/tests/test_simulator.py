import pytest

from queueplan import (
    Allocation,
    CommodityLoad,
    FlowAssignment,
    QueueLoad,
    SimConfig,
    SolveOptions,
    build_augmented_graph,
    mg1_sojourn,
    mm1_sojourn,
    simulate_queue,
    simulate_solution,
    sparq_solve,
)

from conftest import make_single_stage


def q(mu, *items):
    return QueueLoad(tuple(CommodityLoad(*it) for it in items), mu)


def test_mm1_agreement_moderate_horizon():
    # lam = 20, nu = 50 -> sojourn 1/30; empirical mean within stderr noise
    load = q(50.0, ("k", 1.0, 20.0, 1.0))
    res = simulate_queue(
        SimConfig({"cpu": load}, horizon=100_000, seed=7, replications=3)
    )
    stats = res.stats()
    assert stats.mean_sojourn["k"] == pytest.approx(mm1_sojourn(load), rel=0.05)


def test_mg1_agreement_moderate_horizon():
    load = q(40.0, ("k1", 1.0, 10.0, 1.0), ("k2", 1.0, 10.0, 2.0))
    res = simulate_queue(
        SimConfig({"cpu": load}, horizon=100_000, seed=11, replications=3)
    )
    stats = res.stats()
    assert stats.mean_sojourn["k1"] == pytest.approx(mg1_sojourn(load, "k1"), rel=0.05)
    assert stats.mean_sojourn["k2"] == pytest.approx(mg1_sojourn(load, "k2"), rel=0.05)
    # utilization estimate matches rho = workload / mu = 0.75
    assert stats.utilization == pytest.approx(0.75, rel=0.05)


def test_simulation_is_deterministic_per_seed():
    load = q(40.0, ("k1", 1.0, 10.0, 1.0), ("k2", 1.0, 10.0, 2.0))
    runs = [
        simulate_queue(SimConfig({"cpu": load}, horizon=20_000, seed=3)).stats()
        for _ in range(2)
    ]
    assert runs[0].mean_sojourn == runs[1].mean_sojourn
    other = simulate_queue(SimConfig({"cpu": load}, horizon=20_000, seed=4)).stats()
    assert other.mean_sojourn != runs[0].mean_sojourn


def test_stderr_shrinks_with_replications():
    # a single 2-replication standard error is itself a noisy estimate, so
    # the 1/sqrt(n) shrink is asserted on the average over several seeds
    load = q(40.0, ("k", 1.0, 20.0, 1.0))

    def mean_stderr(replications: int) -> float:
        return sum(
            simulate_queue(
                SimConfig(
                    {"cpu": load},
                    horizon=10_000,
                    seed=seed,
                    replications=replications,
                )
            )
            .stats()
            .stderr_sojourn["k"]
            for seed in range(5)
        ) / 5.0

    assert mean_stderr(10) < mean_stderr(2)


def test_solution_simulation_tracks_analytic_latency():
    sc = make_single_stage()
    sol = sparq_solve(sc, SolveOptions(seed=0))
    assert sol.feasible
    graph = build_augmented_graph(sc)
    sim = simulate_solution(
        sol.flows, sol.allocation, graph, horizon=100_000, replications=3, seed=0
    )
    analytic = sol.delays.cumulative_latency["k2"]
    assert sim.cumulative_latency["k2"] == pytest.approx(analytic, rel=0.05)


def test_solution_simulation_rejects_fractional_flows():
    sc = make_single_stage()
    graph = build_augmented_graph(sc)
    with pytest.raises(ValueError):
        simulate_solution(
            FlowAssignment({(("prod:u", "u"), "k1"): 0.5}), Allocation(), graph
        )
