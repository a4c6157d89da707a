import pytest

from conftest import make_single_stage, make_two_node

from queueplan.model import QueueModel, build_augmented_graph, validate_scenario
from queueplan.scenarios import (
    PARAM_LATENCY_LIMIT,
    PARAM_SERVICE_RATE,
    SweepSpec,
    apply_sweep_point,
    experiment_a_scenario,
    experiment_b_scenario,
    scenario_from_dict,
    scenario_to_dict,
)


class TestSerialization:
    @pytest.mark.parametrize(
        "factory",
        [
            make_single_stage,
            make_two_node,
            experiment_a_scenario,
            experiment_b_scenario,
        ],
    )
    def test_round_trip(self, factory):
        sc = factory()
        doc = scenario_to_dict(sc)
        assert doc["schema_version"] == 1
        assert scenario_from_dict(doc) == sc

    def test_unsupported_schema_rejected(self):
        doc = scenario_to_dict(make_single_stage())
        doc["schema_version"] = 99
        with pytest.raises(ValueError):
            scenario_from_dict(doc)


class TestSpeechPipelineScenario:
    def test_validates_cleanly(self):
        assert validate_scenario(experiment_a_scenario()) == []

    def test_two_services_round_trip_to_user(self):
        sc = experiment_a_scenario()
        assert [s.id for s in sc.services] == ["phi1", "phi2"]
        for s in sc.services:
            src, out = s.commodities
            assert src.source_node == "u"
            assert out.dest_node == "u"
            assert s.latency_limits[out.id] == pytest.approx(0.1)

    def test_second_stage_twice_as_heavy(self):
        sc = experiment_a_scenario()
        proc = sc.edge_params.compute["proc_n"]
        assert proc.requirements["k4"]["cpu"] == 2 * proc.requirements["k2"]["cpu"]

    def test_edge_compute_ten_times_pricier_than_cloud(self):
        sc = experiment_a_scenario()
        cloud = sc.edge_params.compute["proc_n"].unit_costs["cpu"]
        edge = sc.edge_params.compute["proc_e"].unit_costs["cpu"]
        assert edge == pytest.approx(10 * cloud)


class TestRenderPipelineScenario:
    def test_validates_cleanly(self):
        assert validate_scenario(experiment_b_scenario()) == []

    def test_user_compute_is_free_and_five_percent_sized(self):
        sc = experiment_b_scenario()
        user = sc.edge_params.compute["cpu_v"]
        cloud = sc.edge_params.compute["cpu_n"]
        assert user.unit_costs["cpu"] == 0.0
        assert user.capacities["cpu"] == pytest.approx(
            0.05 * cloud.capacities["cpu"]
        )
        assert list(user.requirements) == ["k8"]

    def test_render_commodity_is_the_only_destination(self):
        sc = experiment_b_scenario()
        (svc,) = sc.services
        dests = [k for k in svc.commodities if k.dest_node is not None]
        assert [k.id for k in dests] == ["k8"]
        assert dests[0].dest_node == "v"

    def test_gpu_stages_heavier_than_cpu_stages(self):
        sc = experiment_b_scenario()
        gpu = sc.edge_params.compute["gpu_n"]
        cpu = sc.edge_params.compute["cpu_n"]
        assert gpu.queue_model == QueueModel.SR
        assert gpu.requirements["k6"]["gpu"] > max(
            spec["cpu"] for spec in cpu.requirements.values()
        )


class TestSweepPoints:
    def test_rate_sweep_replaces_service_rate(self):
        spec = SweepSpec(
            parameter=PARAM_SERVICE_RATE, target="phi2", values=(50.0, 75.0)
        )
        sc = apply_sweep_point(experiment_a_scenario(), spec, 75.0)
        assert sc.service("phi2").arrival_rate == 75.0
        assert sc.service("phi1").arrival_rate == experiment_a_scenario().service(
            "phi1"
        ).arrival_rate

    def test_latency_sweep_replaces_commodity_limit(self):
        spec = SweepSpec(
            parameter=PARAM_LATENCY_LIMIT, target="k8", values=(0.1, 0.2)
        )
        sc = apply_sweep_point(experiment_b_scenario(), spec, 0.2)
        assert sc.service("fantasia").latency_limits["k8"] == 0.2

    def test_unknown_service_rejected(self):
        spec = SweepSpec(
            parameter=PARAM_SERVICE_RATE, target="nope", values=(1.0,)
        )
        with pytest.raises(KeyError):
            apply_sweep_point(experiment_a_scenario(), spec, 1.0)


class TestAugmentedShapes:
    def test_speech_graph_matches_expected_counts(self):
        g = build_augmented_graph(experiment_a_scenario())
        roles = list(g.nodes.values())
        assert roles.count("production") == 5
        assert roles.count("consumption") == 5
        assert roles.count("computation") == 2

    def test_render_graph_has_five_computation_nodes(self):
        g = build_augmented_graph(experiment_b_scenario())
        comp = [n for n, role in g.nodes.items() if role == "computation"]
        assert len(comp) == 5
        assert "comp:v:cpu_v" in comp
