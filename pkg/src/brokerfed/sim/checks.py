"""Independent verdicts over simulator output.

None of these checks reuse protocol code: distances come from a plain BFS
over the surviving overlay, and mesh connectivity is recomputed from the
reported parent sets.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

from ..core import UnknownGroup
from ..packets import MANAGEMENT_GROUP
from .engine import Metrics, Snapshot
from .scenario import Scenario, ScriptEvent
from .topology import Topology, bfs_distances, connected_component, edge


class NotQuiescent(RuntimeError):
    pass


class InvalidFault(ValueError):
    pass


@dataclass
class Verdict:
    name: str
    ok: bool = True
    failures: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def fail(self, msg: str) -> None:
        self.ok = False
        self.failures.append(msg)

    def __bool__(self) -> bool:
        return self.ok

    def summary(self) -> str:
        head = f"{self.name}: {'PASS' if self.ok else 'FAIL'}"
        if self.failures:
            head += " (" + "; ".join(self.failures[:5]) + (" ..." if len(self.failures) > 5 else "") + ")"
        return head


def check_overhead(metrics: Metrics, topology: Topology) -> Verdict:
    """Every announcement wave crosses each link at most twice and 2*l links in total."""
    v = Verdict("overhead")
    bound = 2 * topology.l
    worst_link = 0
    worst_total = 0
    for (group, core, seq), links in sorted(metrics.announce_links.items()):
        total = sum(links.values())
        worst_total = max(worst_total, total)
        if total > bound:
            v.fail(f"group {group} core {core} seq {seq}: {total} transmissions > 2*l = {bound}")
        for link, n in sorted(links.items()):
            worst_link = max(worst_link, n)
            if n > 2:
                v.fail(f"group {group} core {core} seq {seq}: link {link} crossed {n} times")
    v.details = {"waves": len(metrics.announce_links), "worst_link": worst_link,
                 "worst_total": worst_total, "bound": bound}
    return v


def check_membership_once(metrics: Metrics) -> Verdict:
    v = Verdict("membership-once")
    for key, n in sorted(metrics.membership_counts.items()):
        if n > 1:
            member, parent, group, core, seq = key
            v.fail(f"{member}->{parent} group {group} core {core} seq {seq} sent {n} times")
    v.details = {"announcements": sum(metrics.membership_counts.values())}
    return v


def check_convergence(snapshot: Snapshot, topology: Topology, group: int,
                      redundancy: int | None = None) -> Verdict:
    """Compare a quiescent snapshot against a BFS oracle over the live overlay."""
    if not snapshot.quiescent:
        raise NotQuiescent(f"snapshot at t={snapshot.time} is not quiescent")
    v = Verdict(f"convergence[group {group}]")
    alive = set(snapshot.alive)
    adj: dict[int, list[int]] = {b: [] for b in alive}
    for a, b in snapshot.edges:
        adj[a].append(b)
        adj[b].append(a)
    states = {b: snapshot.status(b, group) for b in alive}
    cores = sorted({st["core"] for st in states.values() if st is not None})
    claimed = sorted(b for b, st in states.items() if st is not None and st["role"] == "core")
    if len(claimed) != 1 or len(cores) != 1 or cores != claimed:
        v.fail(f"expected one agreed core, known cores {cores}, claimants {claimed}")
        return v
    core = claimed[0]
    component = connected_component(adj, core)
    oracle = bfs_distances(adj, core)
    for b in sorted(component):
        st = states[b]
        if st is None:
            v.fail(f"broker {b} has no state for group {group}")
            continue
        if st["distance"] != oracle[b]:
            v.fail(f"broker {b}: distance {st['distance']} != BFS {oracle[b]}")
        parents = st["parents"]
        if redundancy is not None and len(parents) > redundancy:
            v.fail(f"broker {b}: {len(parents)} parents > R={redundancy}")
        candidates = sorted(w for w in adj[b] if oracle.get(w) == oracle[b] - 1)
        for p in parents:
            if p not in candidates:
                v.fail(f"broker {b}: parent {p} is not one hop closer to the core")
        if redundancy is not None and b != core and list(parents) != candidates[:redundancy]:
            v.fail(f"broker {b}: parents {list(parents)} != smallest-id candidates {candidates[:redundancy]}")

    members = {b for b in component if states[b]["role"] in ("core", "member")}
    subscribers = {b for b in component if states[b]["subscribers"] > 0}
    if group == MANAGEMENT_GROUP:
        subscribers = set(component)
    # expected members: core, subscriber brokers, and every ancestor along parent links
    expected = {core} | subscribers
    todo = list(subscribers)
    while todo:
        b = todo.pop()
        for p in states[b]["parents"]:
            if p not in expected:
                expected.add(p)
                todo.append(p)
    if members != expected:
        v.fail(f"members {sorted(members)} != subscribers plus ancestors {sorted(expected)}")
    mesh_adj: dict[int, list[int]] = {b: [] for b in members}
    mesh_edges = set()
    for b in members:
        for p in states[b]["parents"]:
            if p in members:
                mesh_adj[b].append(p)
                mesh_adj[p].append(b)
                mesh_edges.add(edge(b, p))
    reach = connected_component(mesh_adj, core) if core in mesh_adj else set()
    if reach != members:
        v.fail(f"mesh not connected: reached {sorted(reach)} of {sorted(members)}")
    missing = subscribers - members
    if missing:
        v.fail(f"subscriber brokers outside the mesh: {sorted(missing)}")
    v.details = {"core": core, "members": sorted(members), "mesh_edges": sorted(mesh_edges)}
    return v


def expected_subscribers(scenario: Scenario, ticks_per_round: int) -> list[tuple[int, set[tuple[int, str, bytes]]]]:
    """Replay the script; for each publish, the (broker, client, topic) subscriptions live at that moment."""
    live: set[tuple[int, str, bytes]] = set()
    dead: set[int] = set()
    out = []
    for ev in scenario.script:
        if ev.do == "subscribe" and ev.broker not in dead:
            live.add((ev.broker, ev.client_id(), ev.topic))
        elif ev.do == "unsubscribe":
            live.discard((ev.broker, ev.client_id(), ev.topic))
        elif ev.do == "kill-broker":
            dead.add(ev.broker)
            live = {s for s in live if s[0] != ev.broker}
        elif ev.do == "publish" and ev.broker not in dead:
            out.append((round(ev.at * ticks_per_round), {s for s in live if s[2] == ev.topic}))
    return out


def check_delivery(metrics: Metrics, scenario: Scenario) -> Verdict:
    """Each publication reaches each live subscriber of its topic exactly once, nobody else."""
    v = Verdict("delivery")
    expected = expected_subscribers(scenario, metrics.round_ticks)
    pubs = list(metrics.publications)
    if len(pubs) != len(expected):
        v.fail(f"{len(pubs)} publications recorded, script has {len(expected)}")
        return v
    by_pid: dict = defaultdict(dict)
    for (b, c, pid), n in metrics.deliveries.items():
        by_pid[pid][(b, c)] = n
    for rec, (_, subs) in zip(pubs, expected):
        want = {(b, c) for b, c, _ in subs}
        if rec.packet_id is None:
            if want:
                v.fail(f"publish at broker {rec.broker} t={rec.time} rejected ({rec.error})")
            continue
        got = by_pid.get(rec.packet_id, {})
        for who in sorted(want):
            if got.get(who, 0) != 1:
                v.fail(f"packet {rec.packet_id}: subscriber {who} got {got.get(who, 0)} copies")
        for who in sorted(set(got) - want):
            v.fail(f"packet {rec.packet_id}: non-subscriber {who} got {got[who]} copies")
    v.details = {"publications": len(pubs), "deliveries": sum(metrics.deliveries.values())}
    return v


def inject_fault(scenario: Scenario, fault: str, at: float | None = None, *, link=None,
                 broker: int | None = None, rate: float | None = None) -> Scenario:
    """Derive a scenario with a fault: ``kill-link``, ``kill-broker`` or ``loss-rate``."""
    if fault == "loss-rate":
        if rate is None or not 0.0 <= rate <= 1.0:
            raise InvalidFault("loss-rate needs a rate in [0, 1]")
        return replace(scenario, topology=scenario.topology.with_loss(rate))
    if at is None:
        raise InvalidFault(f"{fault} needs a time")
    if fault == "kill-link":
        if link is None or edge(*link) not in scenario.topology.edges:
            raise InvalidFault(f"no such link {link}")
        return scenario.with_events(ScriptEvent(at=at, do="kill-link", link=edge(*link)))
    if fault == "kill-broker":
        if broker not in scenario.topology.nodes:
            raise InvalidFault(f"no such broker {broker}")
        return scenario.with_events(ScriptEvent(at=at, do="kill-broker", broker=broker))
    raise InvalidFault(f"unknown fault {fault!r}")


def export_dot(snapshot: Snapshot, group: int) -> str:
    """Graphviz text: overlay links plain, mesh parent links bold, core double circle, members filled."""
    if not any(snapshot.status(b, group) for b in snapshot.alive):
        raise UnknownGroup(f"group {group} not present in snapshot")
    bold = set()
    lines = [f"graph group_{group} {{", "  node [shape=circle];"]
    for b in snapshot.alive:
        st = snapshot.status(b, group)
        attrs = []
        if st is not None and st["role"] == "core":
            attrs.append("shape=doublecircle")
        if st is not None and st["role"] in ("core", "member"):
            attrs.append("style=filled")
            attrs.append("fillcolor=lightgray")
            for p in st["parents"]:
                bold.add(edge(b, p))
        lines.append(f"  {b}" + (f" [{', '.join(attrs)}]" if attrs else "") + ";")
    for a, b in snapshot.edges:
        lines.append(f"  {a} -- {b}" + (" [style=bold]" if (a, b) in bold else "") + ";")
    lines.append("}")
    return "\n".join(lines) + "\n"
