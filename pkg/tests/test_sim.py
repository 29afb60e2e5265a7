import csv
import json
import os
import random

import networkx as nx
import pytest

from brokerfed.core import Broker, Config, UnknownGroup
from brokerfed.packets import MANAGEMENT_GROUP, TopicMapping
from brokerfed.sim.checks import (
    InvalidFault,
    NotQuiescent,
    check_convergence,
    check_delivery,
    check_overhead,
    export_dot,
    inject_fault,
)
from brokerfed.sim import cli as sim_cli
from brokerfed.sim.engine import run
from brokerfed.sim.fixtures import (
    APP1_GROUP,
    APP2_GROUP,
    APP2_TOPIC,
    figure_scenario,
    figure_two_apps,
    pub,
    random_scenario,
    sub,
    sweep,
    verify_run,
)
from brokerfed.sim.scenario import (
    InvalidScenario,
    Scenario,
    ScriptEvent,
    scenario_from_dict,
    scenario_to_dict,
)
from brokerfed.sim.topology import FIGURE_EDGES, InvalidTopology, Topology, bfs_distances, random_topology
from explore import all_orders, initial, random_order

APP2 = TopicMapping(APP2_GROUP, b"app2/", 0)


def role_map(snapshot, group):
    return {b: snapshot.status(b, group)["role"] for b in snapshot.alive}


# -- topology -------------------------------------------------------------

def test_figure_topology_shape():
    topo = Topology.build(FIGURE_EDGES)
    assert (topo.n, topo.l) == (6, 8)


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 1), (1, 0)], [(0, 1), (2, 3)]])
def test_invalid_topologies(edges):
    with pytest.raises(InvalidTopology):
        Topology.build(edges)


def test_random_topology_connected():
    rng = random.Random(1)
    for _ in range(50):
        topo = random_topology(rng.randint(1, 40), rng)
        g = nx.Graph(list(topo.edges))
        g.add_nodes_from(topo.nodes)
        assert nx.is_connected(g)


def test_bfs_matches_networkx():
    rng = random.Random(2)
    for _ in range(30):
        topo = random_topology(rng.randint(2, 30), rng)
        g = nx.Graph(list(topo.edges))
        src = rng.choice(topo.nodes)
        assert bfs_distances(topo.adjacency(), src) == nx.single_source_shortest_path_length(g, src)


# -- figure fixtures ------------------------------------------------------

def test_management_mesh_fixture():
    result = run(figure_two_apps())
    snap = result.snapshot
    parents = {b: snap.status(b, MANAGEMENT_GROUP)["parents"] for b in snap.alive}
    assert parents == {0: (), 1: (0,), 2: (0,), 3: (1,), 4: (1, 2), 5: (3, 4)}
    assert all((3 in p and b == 4) is False and (4 in p and b == 3) is False for b, p in parents.items())


def test_app2_mesh_fixture():
    snap = run(figure_two_apps()).snapshot
    assert role_map(snap, APP2_GROUP) == {0: "outsider", 1: "core", 2: "outsider",
                                         3: "member", 4: "member", 5: "member"}
    assert snap.status(5, APP2_GROUP)["parents"] == (3, 4)
    assert snap.status(5, APP2_GROUP)["distance"] == 2
    assert snap.status(1, APP2_GROUP)["children"] == (3, 4)
    v = check_convergence(snap, figure_two_apps().topology, APP2_GROUP, 2)
    assert v.ok, v.failures
    assert v.details["members"] == [1, 3, 4, 5]
    assert v.details["mesh_edges"] == [(1, 3), (1, 4), (3, 5), (4, 5)]


def test_app1_mesh_fixture():
    snap = run(figure_two_apps()).snapshot
    assert role_map(snap, APP1_GROUP) == {0: "core", 1: "member", 2: "outsider",
                                         3: "member", 4: "outsider", 5: "outsider"}


def test_cascade_reaches_core_from_3_and_4():
    result = run(figure_two_apps())
    sent = {(m, p) for (m, p, g, c, s) in result.metrics.membership_counts if g == APP2_GROUP}
    assert {(5, 3), (5, 4), (3, 1), (4, 1)} <= sent
    assert all(p in (1, 3, 4) for _, p in sent)


def test_single_broker_scenario():
    sc = Scenario(Topology.build([], nodes=[0]),
                  script=(sub(0.5, 0, APP2_TOPIC), pub(1.5, 0, APP2_TOPIC)),
                  mappings=(APP2,), rounds=3)
    result = run(sc)
    assert sum(result.metrics.deliveries.values()) == 1
    assert sum(result.metrics.control_counts.values()) == 0
    assert check_delivery(result.metrics, sc).ok


def test_subscriber_at_core_only():
    sc = figure_scenario(sub(0.5, 1, APP2_TOPIC), rounds=3)
    v = check_convergence(run(sc).snapshot, sc.topology, APP2_GROUP, 2)
    assert v.ok and v.details["members"] == [1]


# -- overhead -------------------------------------------------------------

def test_figure_overhead_bound():
    sc = figure_two_apps()
    result = run(sc)
    v = check_overhead(result.metrics, sc.topology)
    assert v.ok
    assert v.details["worst_total"] <= 16


def test_path_graph_exactly_three():
    path = [(0, 1), (1, 2), (2, 3)]
    # oracle: drive brokers by hand over every delivery order
    brokers = {b: Broker(Config(self_id=b, neighbors=frozenset(
        {x for e in path for x in e if b in e and x != b})), [APP2]) for b in range(4)}
    pending = initial([(0, brokers[0].handle_subscribe(APP2_TOPIC, "c"))])
    totals = []
    all_orders(brokers, pending, lambda bs, c, d: totals.append(
        sum(n for k, n in c.items() if k[0] == "CoreAnnouncement")))
    # the initial send from the core is not in the counter
    assert set(totals) == {2}
    sc = Scenario(Topology.build(path), script=(sub(0.5, 0, APP2_TOPIC),), mappings=(APP2,),
                  rounds=2, management_core=0)
    result = run(sc)
    waves = {k: sum(v.values()) for k, v in result.metrics.announce_links.items() if k[0] == APP2_GROUP}
    assert set(waves.values()) == {3}


def test_triangle_every_order_at_most_twice():
    for core in range(3):
        for R in (1, 2):
            brokers = {b: Broker(Config(self_id=b, neighbors=frozenset({0, 1, 2} - {b}), redundancy=R),
                                 [APP2]) for b in range(3)}
            first = brokers[core].handle_subscribe(APP2_TOPIC, "c")
            pending = initial([(core, first)])
            base = {(min(core, t), max(core, t)) for _, t, _ in pending}

            def visit(bs, counts, _d, base=base):
                per_link = {}
                for (kind, a, b), n in counts.items():
                    if kind == "CoreAnnouncement":
                        per_link[(a, b)] = per_link.get((a, b), 0) + n
                for link in base:
                    per_link[link] = per_link.get(link, 0) + 1
                assert all(n <= 2 for n in per_link.values()), per_link
                assert sum(per_link.values()) <= 2 * 3
            assert all_orders(brokers, pending, visit) >= 1


def test_complete_graph_with_subscribers_all_orders():
    k3 = {0: {1, 2}, 1: {0, 2}, 2: {0, 1}}
    brokers = {b: Broker(Config(self_id=b, neighbors=frozenset(n)), [APP2]) for b, n in k3.items()}
    pending = initial([(0, brokers[0].handle_subscribe(APP2_TOPIC, "c"))])
    # let 1 and 2 learn the core first, then subscribe, exploring every order
    finals = set()

    def visit(bs, counts, d):
        for b in (1, 2):
            bs[b].handle_subscribe(APP2_TOPIC, f"s{b}")
        finals.add(tuple(bs[b].status(APP2_GROUP)["parents"] for b in range(3)))
    all_orders(brokers, pending, visit)
    assert finals == {((), (0,), (0,))}


# -- random orders and oracle agreement -----------------------------------

def test_random_delivery_orders_match_bfs():
    rng = random.Random(11)
    for trial in range(60):
        topo = random_topology(rng.randint(3, 12), rng)
        adj = topo.adjacency()
        R = rng.randint(1, 3)
        brokers = {b: Broker(Config(self_id=b, neighbors=frozenset(adj[b]), redundancy=R), [APP2])
                   for b in topo.nodes}
        core = rng.choice(topo.nodes)
        pending = initial([(core, brokers[core].handle_subscribe(APP2_TOPIC, "c"))])
        counts, _ = random_order(brokers, pending, rng)
        oracle = bfs_distances(adj, core)
        for b in topo.nodes:
            st = brokers[b].status(APP2_GROUP)
            assert st["distance"] == oracle[b]
            if b != core:
                cands = sorted(w for w in adj[b] if oracle[w] == oracle[b] - 1)
                assert list(st["parents"]) == cands[:R]


def test_mapping_conflict_all_orders_small():
    # path 0-1-2-3: origins 0 and 3 advertise conflicting mappings at once
    adj = {0: {1}, 1: {0, 2}, 2: {1, 3}, 3: {2}}
    brokers = {b: Broker(Config(self_id=b, neighbors=frozenset(n))) for b, n in adj.items()}
    a = brokers[0].advertise_mapping(TopicMapping(7, b"app2/", 0))
    b = brokers[3].advertise_mapping(TopicMapping(9, b"app2/", 3))
    pending = initial([(0, a), (3, b)])
    outcomes = set()
    n = all_orders(brokers, pending, lambda bs, c, d: outcomes.add(
        tuple(bs[x].mappings[b"app2/"].origin for x in sorted(bs))))
    assert n > 1
    assert outcomes == {(0, 0, 0, 0)}


def test_mapping_conflict_random_orders_figure():
    rng = random.Random(5)
    adj = Topology.build(FIGURE_EDGES).adjacency()
    for _ in range(300):
        brokers = {b: Broker(Config(self_id=b, neighbors=frozenset(adj[b]))) for b in adj}
        x = brokers[0].advertise_mapping(TopicMapping(7, b"app2/", 0))
        y = brokers[3].advertise_mapping(TopicMapping(9, b"app2/", 3))
        random_order(brokers, initial([(0, x), (3, y)]), rng)
        assert {b.mappings[b"app2/"].origin for b in brokers.values()} == {0}


def test_mapping_advert_scenario_installs_everywhere():
    sc = Scenario(Topology.build(FIGURE_EDGES), rounds=3, management_core=0,
                  script=(ScriptEvent(at=1.5, do="advertise-mapping", broker=0, group=7, prefix=b"app2/"),))
    result = run(sc)
    assert all(b.mappings.get(b"app2/") == APP2 for b in result.brokers.values())


# -- elections ------------------------------------------------------------

@pytest.mark.parametrize("order", [(1, 4), (4, 1)])
@pytest.mark.parametrize("gap", [0.0, 0.02])
def test_two_claimants_converge_to_smaller(order, gap):
    # gap 0.02 rounds is shorter than one hop, so both still claim
    events = [sub(0.5, order[0], APP2_TOPIC), sub(0.5 + gap, order[1], APP2_TOPIC)]
    sc = figure_scenario(*events, rounds=1)
    result = run(sc)
    claims = [(b, g) for _, b, k, g, _ in result.metrics.notices if k == "became_core" and g == APP2_GROUP]
    assert sorted(claims) == [(1, APP2_GROUP), (4, APP2_GROUP)]
    abdications = [b for _, b, k, g, _ in result.metrics.notices if k == "abdicated" and g == APP2_GROUP]
    assert abdications == [4]
    snap = result.snapshot
    assert [b for b in snap.alive if snap.status(b, APP2_GROUP)["role"] == "core"] == [1]
    assert {snap.status(b, APP2_GROUP)["core"] for b in snap.alive} == {1}


def test_management_election_without_configured_core():
    sc = figure_two_apps(management_core=None)
    result = run(sc)
    assert {result.snapshot.status(b, 0)["core"] for b in result.snapshot.alive} == {0}
    assert all(verify_run(sc, result))


# -- soft state and faults ------------------------------------------------

def test_unsubscribe_expires_after_k_rounds():
    sc = figure_two_apps(rounds=10).with_events(
        ScriptEvent(at=4.5, do="unsubscribe", broker=5, topic=APP2_TOPIC))
    result = run(sc)
    snap = result.snapshot
    assert role_map(snap, APP2_GROUP) == {0: "outsider", 1: "core", 2: "outsider",
                                         3: "outsider", 4: "outsider", 5: "outsider"}
    expiries = sorted((t // result.metrics.round_ticks, b, v) for t, b, k, g, v in result.metrics.notices
                      if k == "child_expired" and g == APP2_GROUP)
    # last refresh from 5 in round 4; expired once more than K=3 rounds have passed
    assert expiries[:2] == [(8, 3, 5), (8, 4, 5)]
    assert check_convergence(snap, sc.topology, APP2_GROUP, 2).ok


def test_kill_link_keeps_delivery():
    base = figure_two_apps()
    sc = inject_fault(base, "kill-link", 4.2, link=(3, 5))
    sc = sc.with_events(*[pub(4.4, b, APP2_TOPIC) for b in range(6)])
    result = run(sc)
    assert check_delivery(result.metrics, sc).ok
    assert result.snapshot.status(5, APP2_GROUP)["parents"] == (4,)


def test_kill_core_reelects():
    base = figure_two_apps(rounds=10)
    sc = inject_fault(base, "kill-broker", 4.5, broker=1)
    result = run(sc)
    P = result.metrics.round_ticks
    claims = [(t, b) for t, b, k, g, _ in result.metrics.notices
              if k == "became_core" and g == APP2_GROUP and t > 4.5 * P]
    assert claims and claims[0][1] == 5
    assert claims[0][0] - 4.5 * P <= (3 + 1) * P
    snap = result.snapshot
    assert [b for b in snap.alive if snap.status(b, APP2_GROUP)["role"] == "core"] == [5]
    assert check_convergence(snap, sc.topology, APP2_GROUP, 2).ok


def test_kill_management_core_reelects_smallest_survivor():
    sc = inject_fault(figure_two_apps(rounds=10), "kill-broker", 3.5, broker=0)
    snap = run(sc).snapshot
    assert {snap.status(b, 0)["core"] for b in snap.alive} == {1}


def test_zero_loss_identical():
    sc = figure_two_apps().with_events(pub(4.5, 0, APP2_TOPIC))
    assert run(sc).to_json() == run(inject_fault(sc, "loss-rate", rate=0.0)).to_json()


def test_lossy_run_is_deterministic():
    sc = inject_fault(figure_two_apps(rounds=8), "loss-rate", rate=0.2)
    a, b = run(sc), run(sc)
    assert a.to_json() == b.to_json()
    assert a.metrics.dropped["loss"] > 0


def test_invalid_faults():
    sc = figure_two_apps()
    with pytest.raises(InvalidFault):
        inject_fault(sc, "kill-link", 1.0, link=(0, 5))
    with pytest.raises(InvalidFault):
        inject_fault(sc, "kill-broker", 1.0, broker=99)
    with pytest.raises(InvalidFault):
        inject_fault(sc, "meteor", 1.0)


# -- determinism, quiescence ----------------------------------------------

def test_run_is_deterministic():
    sc = random_scenario(42)
    assert run(sc).to_json() == run(sc).to_json()


def test_not_quiescent_raises():
    sc = figure_two_apps(rounds=1).with_events(sub(1.0, 5, APP2_TOPIC))
    snap = run(sc).snapshot
    snap.quiescent = False
    with pytest.raises(NotQuiescent):
        check_convergence(snap, sc.topology, APP2_GROUP)


def test_small_sweep_passes():
    report = sweep(samples=40, n_max=25, seed=9)
    assert report.ok, report.failures
    assert report.worst_link <= 2


# -- delivery -------------------------------------------------------------

def test_delivery_member_publisher():
    sc = figure_two_apps().with_events(pub(4.5, 4, APP2_TOPIC))
    result = run(sc)
    assert check_delivery(result.metrics, sc).ok
    pid = result.metrics.publications[0].packet_id
    assert result.metrics.deliveries[(5, "sub5", pid)] == 1


def test_delivery_outsider_publisher():
    sc = figure_two_apps().with_events(pub(4.5, 0, APP2_TOPIC))
    result = run(sc)
    assert check_delivery(result.metrics, sc).ok
    assert result.brokers[1].counters["duplicate"] == 0


def test_delivery_check_catches_loss():
    sc = figure_two_apps().with_events(pub(4.5, 0, APP2_TOPIC))
    result = run(sc)
    result.metrics.deliveries.clear()
    assert not check_delivery(result.metrics, sc).ok


# -- dot ------------------------------------------------------------------

def test_dot_management_group():
    dot = export_dot(run(figure_two_apps()).snapshot, 0)
    edges = [l for l in dot.splitlines() if "--" in l]
    assert len(edges) == 8
    assert sum("style=bold" in l for l in edges) == 7
    assert "  3 -- 4;" in edges


def test_dot_app2_group():
    dot = export_dot(run(figure_two_apps()).snapshot, APP2_GROUP)
    shaded = sorted(int(l.split()[0]) for l in dot.splitlines() if "fillcolor" in l)
    assert shaded == [1, 3, 4, 5]
    assert "1 [shape=doublecircle" in dot


def test_dot_single_broker_and_unknown_group():
    sc = Scenario(Topology.build([], nodes=[0]), script=(sub(0.5, 0, APP2_TOPIC),), mappings=(APP2,), rounds=2)
    snap = run(sc).snapshot
    dot = export_dot(snap, APP2_GROUP)
    assert "--" not in dot and "  0 [" in dot
    with pytest.raises(UnknownGroup):
        export_dot(snap, 99)


# -- scenario files -------------------------------------------------------

def test_scenario_json_round_trip():
    sc = inject_fault(figure_two_apps(), "kill-link", 4.0, link=(3, 5)).with_events(pub(4.5, 0, APP2_TOPIC))
    doc = json.loads(json.dumps(scenario_to_dict(sc)))
    again = scenario_from_dict(doc)
    assert scenario_to_dict(again) == scenario_to_dict(sc)
    assert run(again).to_json() == run(sc).to_json()


@pytest.mark.parametrize("doc", [
    {},
    {"topology": {"edges": [[0, 1]]}, "script": [{"at": 1, "do": "explode", "broker": 0}]},
    {"topology": {"edges": [[0, 1]]}, "script": [{"at": 2, "do": "subscribe", "broker": 0, "topic": "a"},
                                                   {"at": 1, "do": "subscribe", "broker": 1, "topic": "a"}]},
    {"topology": {"edges": [[0, 1]]}, "script": [{"at": 1, "do": "subscribe", "broker": 7, "topic": "a"}]},
    {"topology": {"edges": [[0, 1], [2, 3]]}},
])
def test_invalid_scenarios(doc):
    with pytest.raises(InvalidScenario):
        scenario_from_dict(doc)


# -- command line ---------------------------------------------------------

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "scenarios")


@pytest.mark.parametrize("name", ["figure_two_apps", "figure_kill_link", "figure_kill_core"])
def test_cli_verify_bundled_scenarios(name, capsys):
    assert sim_cli.main(["verify", os.path.join(SCENARIOS, f"{name}.json")]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_run_metrics_and_dot(tmp_path, capsys):
    csv_path = tmp_path / "m.csv"
    path = os.path.join(SCENARIOS, "figure_two_apps.json")
    assert sim_cli.main(["run", path, "--metrics", str(csv_path), "--dot", "7"]) == 0
    out = capsys.readouterr().out
    assert "graph group_7" in out and "1 [shape=doublecircle" in out
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["round", "kind", "packets", "bytes"]
    assert any(r and r[1] == "core_announcement" for r in rows[1:])


def test_cli_sweep(capsys):
    assert sim_cli.main(["sweep", "--samples", "5", "--n-max", "10"]) == 0


def test_cli_bad_scenario(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"topology": {"edges": [[0, 0]]}}')
    assert sim_cli.main(["verify", str(bad)]) == 2
    assert sim_cli.main(["run", str(tmp_path / "missing.json")]) == 2
