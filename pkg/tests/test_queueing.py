import math

import pytest
from hypothesis import given, strategies as st

from queueplan import (
    Allocation,
    DelayMode,
    FlowAssignment,
    InstabilityError,
    QueueLoad,
    CommodityLoad,
    build_augmented_graph,
    end_to_end_latency,
    eps_bound_sojourn,
    mg1_components,
    mg1_sojourn,
    mm1_sojourn,
)

from conftest import make_single_stage


def q(mu, *items):
    return QueueLoad(tuple(CommodityLoad(*it) for it in items), mu)


# ---------------------------------------------------------------------------
# dedicated (per-commodity) queue
# ---------------------------------------------------------------------------

def test_mm1_closed_form():
    # lam = 10, R = 2, mu = 30 -> request rate nu = 15, sojourn 1/(15-10)
    load = q(30.0, ("k", 1.0, 10.0, 2.0))
    assert mm1_sojourn(load) == pytest.approx(0.2)


def test_mm1_zero_requirement_is_free():
    assert mm1_sojourn(q(5.0, ("k", 1.0, 10.0, 0.0))) == 0.0


def test_mm1_instability():
    with pytest.raises(InstabilityError):
        mm1_sojourn(q(20.0, ("k", 1.0, 10.0, 2.0)))  # nu = lam = 10


@given(
    lam=st.floats(0.1, 100.0),
    req=st.floats(0.01, 10.0),
    slack=st.floats(0.01, 100.0),
)
def test_mm1_positive_and_decreasing_in_mu(lam, req, slack):
    mu = req * (lam + slack)
    d1 = mm1_sojourn(q(mu, ("k", 1.0, lam, req)))
    d2 = mm1_sojourn(q(mu * 1.5, ("k", 1.0, lam, req)))
    assert 0 < d2 < d1
    assert d1 == pytest.approx(1.0 / slack)


# ---------------------------------------------------------------------------
# shared (M/G/1) queue
# ---------------------------------------------------------------------------

def test_mg1_two_class_oracle():
    # lam1=4 R1=1, lam2=6 R2=2, mu=20: workload a=16, rho=0.8,
    # second moment b = 4*1 + 6*4 = 28, wait = b/(mu(mu-a)) = 28/80 = 0.35
    load = q(20.0, ("k1", 1.0, 4.0, 1.0), ("k2", 1.0, 6.0, 2.0))
    ex2, rho, lam = mg1_components(load)
    assert rho == pytest.approx(0.8)
    assert lam == pytest.approx(10.0)
    assert ex2 == pytest.approx(2 * (0.4 * (1 / 20) ** 2 + 0.6 * (2 / 20) ** 2))
    assert mg1_sojourn(load, "k1") == pytest.approx(0.35 + 1 / 20)
    assert mg1_sojourn(load, "k2") == pytest.approx(0.35 + 2 / 20)


def test_mg1_single_class_reduces_to_mm1():
    # with one exponential class the shared queue is a plain M/M/1
    shared = q(30.0, ("k", 1.0, 10.0, 2.0))
    assert mg1_sojourn(shared, "k") == pytest.approx(mm1_sojourn(shared))


def test_mg1_empty_queue_is_pure_service():
    load = q(10.0, ("k", 0.0, 5.0, 2.0))
    assert mg1_sojourn(load, "k") == pytest.approx(2.0 / 10.0)


def test_mg1_instability():
    with pytest.raises(InstabilityError):
        mg1_sojourn(q(16.0, ("k1", 1.0, 4.0, 1.0), ("k2", 1.0, 6.0, 2.0)), "k1")


@given(
    lam1=st.floats(0.1, 50.0),
    lam2=st.floats(0.1, 50.0),
    r1=st.floats(0.01, 5.0),
    r2=st.floats(0.01, 5.0),
    headroom=st.floats(1.05, 10.0),
)
def test_mg1_wait_matches_workload_form(lam1, lam2, r1, r2, headroom):
    # P-K waiting time with the exponential mixture equals b / (mu (mu - a))
    # for a = sum lam R and b = sum lam R^2
    mu = (lam1 * r1 + lam2 * r2) * headroom
    load = q(mu, ("k1", 1.0, lam1, r1), ("k2", 1.0, lam2, r2))
    a = lam1 * r1 + lam2 * r2
    b = lam1 * r1**2 + lam2 * r2**2
    expected = b / (mu * (mu - a))
    got = mg1_sojourn(load, "k1") - r1 / mu
    assert got == pytest.approx(expected, rel=1e-9)


# ---------------------------------------------------------------------------
# safety-margin bound
# ---------------------------------------------------------------------------

def test_bound_tight_at_matching_margin():
    # at eps = 1 - rho the bound coincides with the exact sojourn
    load = q(20.0, ("k1", 1.0, 4.0, 1.0), ("k2", 1.0, 6.0, 2.0))
    exact = mg1_sojourn(load, "k2")
    bound = eps_bound_sojourn({"cpu": load}, "k2", {"cpu": 0.2})
    assert bound == pytest.approx(exact, rel=1e-12)


@given(
    lam=st.floats(0.1, 50.0),
    req=st.floats(0.01, 5.0),
    eps=st.floats(0.05, 0.95),
    margin_use=st.floats(0.05, 1.0),
)
def test_bound_dominates_exact_within_margin(lam, req, eps, margin_use):
    # whenever rho <= 1 - eps the bound is a certified upper bound
    rho = (1 - eps) * margin_use
    mu = lam * req / rho
    load = q(mu, ("k", 1.0, lam, req))
    exact = mg1_sojourn(load, "k")
    bound = eps_bound_sojourn({"cpu": load}, "k", {"cpu": eps})
    assert bound >= exact - 1e-12


def test_bound_rejects_bad_eps():
    load = q(10.0, ("k", 1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        eps_bound_sojourn({"cpu": load}, "k", {"cpu": 0.0})
    with pytest.raises(ValueError):
        eps_bound_sojourn({"cpu": load}, "k", {"cpu": 1.5})


# ---------------------------------------------------------------------------
# end-to-end aggregation
# ---------------------------------------------------------------------------

def _unit_flows():
    return FlowAssignment(
        {
            (("prod:u", "u"), "k1"): 1.0,
            (("u", "comp:u:sys"), "k1"): 1.0,
            (("comp:u:sys", "u"), "k2"): 1.0,
            (("u", "cons:u"), "k2"): 1.0,
        },
        integral=True,
    )


def test_end_to_end_single_stage():
    sc = make_single_stage()  # Lambda = 10, R = 1, L = 0.1
    graph = build_augmented_graph(sc)
    allocation = Allocation(gr_rates={(("comp:u:sys", "u"), "k2", "cpu"): 20.0})
    report = end_to_end_latency(_unit_flows(), allocation, graph, DelayMode.EXACT)
    # single queue: 1/(20 - 10) = 0.1; k2 inherits k1's (zero-delay) span
    assert report.span_latency["k1"] == 0.0
    assert report.cumulative_latency["k2"] == pytest.approx(0.1)
    assert report.utilizations[(("comp:u:sys", "u"), "k2", "cpu")] == pytest.approx(0.5)
    assert report.feasible_against(sc)
    assert not report.feasible_against(sc, slack=-0.5)


def test_end_to_end_bound_mode_needs_margins():
    sc = make_single_stage()
    graph = build_augmented_graph(sc)
    allocation = Allocation(gr_rates={(("comp:u:sys", "u"), "k2", "cpu"): 20.0})
    with pytest.raises(ValueError):
        end_to_end_latency(_unit_flows(), allocation, graph, DelayMode.BOUND)
    eps = {(("comp:u:sys", "u"), "cpu"): 0.5}
    report = end_to_end_latency(
        _unit_flows(), allocation, graph, DelayMode.BOUND, eps=eps
    )
    # eps = 1 - rho = 0.5 makes the bound exact
    assert report.cumulative_latency["k2"] == pytest.approx(0.1)


def test_end_to_end_unstable_allocation_raises():
    sc = make_single_stage()
    graph = build_augmented_graph(sc)
    allocation = Allocation(gr_rates={(("comp:u:sys", "u"), "k2", "cpu"): 9.0})
    with pytest.raises(InstabilityError):
        end_to_end_latency(_unit_flows(), allocation, graph, DelayMode.EXACT)


def test_feasible_against_honours_slack():
    sc = make_single_stage()  # limit 0.1
    report = end_to_end_latency(
        _unit_flows(),
        Allocation(gr_rates={(("comp:u:sys", "u"), "k2", "cpu"): 19.8}),
        build_augmented_graph(sc),
    )
    # latency 1/(19.8 - 10) ~ 0.10204: outside the limit, inside 3% slack
    assert not report.feasible_against(sc)
    assert report.feasible_against(sc, slack=0.03)
