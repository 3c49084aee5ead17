import csv
import io

import pytest

from fedmesh.controller import RunStatus
from fedmesh.errors import SweepError
from fedmesh.node import expected_model_traffic
from fedmesh.scenario import DatasetSpec, with_overrides
from fedmesh.simulation import (
    SimPlan,
    SweepResult,
    SweepRow,
    render_sweep,
    run_simulation,
    sweep,
    sweep_plans,
)


def desk_scale(make_scenario, kind="fully", rounds=10, seed=1):
    return make_scenario(kind=kind, n_samples=4000, rounds=rounds, seed=seed)


def assert_consensus(result):
    digests = [summary.round_digests for summary in result.node_summaries.values()]
    assert len(digests[0]) == result.record.scenario.rounds
    assert all(d == digests[0] for d in digests)


@pytest.mark.parametrize("transport", ["memory", "tcp"])
def test_fully_connected_run_reaches_consensus(make_scenario, transport):
    cfg = desk_scale(make_scenario)
    compression = 10.0 if transport == "memory" else 1.0
    result = run_simulation(SimPlan(scenario=cfg, transport=transport, time_compression=compression))
    assert result.record.status is RunStatus.COMPLETE
    assert_consensus(result)
    assert len(result.report.rows) == 4
    for summary in result.record.summaries.values():
        assert summary.f1_final >= 0.90
        assert summary.total_bytes_sent == expected_model_traffic(cfg, degree=3)
    assert sum(len(r) for r in result.record.reports.values()) > 0


@pytest.mark.parametrize("seed", [2, 3])
def test_other_seeds_also_learn(make_scenario, seed):
    result = run_simulation(
        SimPlan(scenario=desk_scale(make_scenario, seed=seed), transport="memory", time_compression=10.0)
    )
    assert result.report.average.avg_f1 >= 0.90


def test_same_plan_twice_gives_same_trajectory(make_scenario):
    plan = SimPlan(scenario=make_scenario(rounds=3), transport="memory", time_compression=10.0)
    first, second = run_simulation(plan), run_simulation(plan)
    for k in range(4):
        a, b = first.record.summaries[k], second.record.summaries[k]
        assert a.f1_per_round == b.f1_per_round
        assert a.round_digests == b.round_digests
        assert (a.total_bytes_sent, a.total_bytes_recv) == (b.total_bytes_sent, b.total_bytes_recv)


def test_tcp_and_memory_trajectories_match(make_scenario):
    cfg = make_scenario(kind="ring", rounds=3)
    over_tcp = run_simulation(SimPlan(scenario=cfg, transport="tcp"))
    in_memory = run_simulation(SimPlan(scenario=cfg, transport="memory", time_compression=10.0))
    for k in range(4):
        assert over_tcp.record.summaries[k].round_digests == in_memory.record.summaries[k].round_digests
        assert over_tcp.record.summaries[k].total_bytes_sent == in_memory.record.summaries[k].total_bytes_sent


def test_ring_moves_two_thirds_of_fully_connected_traffic(make_scenario):
    ring = run_simulation(SimPlan(scenario=make_scenario(kind="ring", rounds=2), transport="memory"))
    fully = run_simulation(SimPlan(scenario=make_scenario(kind="fully", rounds=2), transport="memory"))
    for k in range(4):
        assert 3 * ring.record.summaries[k].total_bytes_sent == 2 * fully.record.summaries[k].total_bytes_sent


def test_star_hub_carries_three_times_leaf_traffic(make_scenario):
    result = run_simulation(SimPlan(scenario=make_scenario(kind="star", rounds=2), transport="memory"))
    summaries = result.record.summaries
    hub_bytes = summaries[0].total_bytes_sent + summaries[0].total_bytes_recv
    for leaf in (1, 2, 3):
        assert hub_bytes == 3 * (summaries[leaf].total_bytes_sent + summaries[leaf].total_bytes_recv)


def test_single_plan_sweep_matches_direct_run(make_scenario):
    plan = SimPlan(scenario=make_scenario(rounds=2), transport="memory", label="only")
    direct = run_simulation(plan)
    outcome = sweep([plan])
    assert len(outcome.plan_rows) == 1
    swept = outcome.results[0]
    for k in range(4):
        assert swept.record.summaries[k].f1_per_round == direct.record.summaries[k].f1_per_round
    assert outcome.plan_rows[0].mean_f1 == round(direct.report.average.avg_f1, 4)


def test_traffic_does_not_depend_on_seed(make_scenario):
    plans = sweep_plans(make_scenario(rounds=2), seeds=[4, 5], transport="memory")
    assert [p.label for p in plans] == ["fully-seed4", "fully-seed5"]
    outcome = sweep(plans)
    traffic = [row.mean_traffic_mb for row in outcome.plan_rows]
    assert traffic[0] == traffic[1]
    assert len(outcome.topology_rows) == 1
    assert outcome.topology_rows[0].runs == 2


def test_sweep_rejects_mixed_datasets(make_scenario):
    cfg = make_scenario(rounds=1)
    other = with_overrides(
        cfg, dataset=DatasetSpec(source=cfg.dataset.source, synthetic=cfg.dataset.synthetic, test_fraction=0.3)
    )
    with pytest.raises(SweepError):
        sweep([SimPlan(scenario=cfg, transport="memory"), SimPlan(scenario=other, transport="memory")])


def test_empty_sweep():
    with pytest.raises(SweepError):
        sweep([])


def test_sweep_renderings_list_every_plan(make_scenario):
    plans = sweep_plans(make_scenario(rounds=1), topologies=["ring", "star"], transport="memory")
    outcome = sweep(plans)
    csv_text = render_sweep(outcome, "csv")
    assert csv_text.count("\nplan,") == 2
    assert csv_text.count("\ntopology,") == 2
    assert "## By topology" in render_sweep(outcome, "md")
    with pytest.raises(ValueError):
        render_sweep(outcome, "xml")


def test_sweep_csv_quotes_labels_with_commas():
    row = SweepRow(
        label='ring, seed "7"',
        topology="ring",
        runs=1,
        mean_f1=0.9,
        mean_traffic_mb=1.5,
        mean_energy_j=2.0,
    )
    outcome = SweepResult(results=[], plan_rows=[row], topology_rows=[])
    rows = list(csv.reader(io.StringIO(render_sweep(outcome, "csv"))))
    assert rows[0] == ["section", "label", "topology", "runs", "mean_f1", "mean_traffic_mb", "mean_energy_j"]
    assert rows[1] == ["plan", 'ring, seed "7"', "ring", "1", "0.9000", "1.5", "2.0"]


def test_sim_plan_rejects_slow_clock(make_scenario):
    with pytest.raises(ValueError):
        SimPlan(scenario=make_scenario(), time_compression=0.5)


@pytest.mark.slow
def test_topology_trend_over_seeds(make_scenario):
    plans = sweep_plans(
        make_scenario(rounds=5, n_samples=2000),
        seeds=[1, 2, 3, 4, 5],
        topologies=["fully", "star", "ring", "random"],
        transport="memory",
        time_compression=20.0,
    )
    outcome = sweep(plans)
    by_topology = {row.topology: row for row in outcome.topology_rows}
    assert by_topology["fully"].mean_f1 >= by_topology["random"].mean_f1 - 0.01
    assert by_topology["fully"].mean_traffic_mb >= by_topology["random"].mean_traffic_mb
