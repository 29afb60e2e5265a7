"""Deterministic discrete-event simulation of a broker federation.

Time is an integer tick counter; one announcement round lasts
``Scenario.ticks_per_round`` ticks. Events at the same tick run in phase
order (timers, then script, then packet arrivals); packet arrivals are
ordered by sender id and then insertion order, so a scenario and its seed
fully determine the run.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .. import wire
from ..core import Broker, Config, Deliver, FederationError, Notice, Send
from ..packets import CoreAnnouncement, MeshMembershipAnnouncement, Packet, TopicMapping, kind_name
from .scenario import Scenario, ScriptEvent
from .topology import Edge, edge

PHASE_SCRIPT = 1
PHASE_PACKET = 2

MAX_EVENTS = 5_000_000


@dataclass(frozen=True)
class PublishRecord:
    time: int
    broker: int
    topic: bytes
    group: int | None
    packet_id: tuple[int, int] | None
    error: str | None = None


@dataclass
class Metrics:
    round_ticks: int
    rounds: int
    control_counts: Counter = field(default_factory=Counter)  # (round, kind) -> packets
    control_bytes: Counter = field(default_factory=Counter)  # (round, kind) -> bytes
    bytes_by_kind: Counter = field(default_factory=Counter)
    announce_links: dict = field(default_factory=lambda: defaultdict(Counter))  # (group, core, seq) -> link -> n
    membership_counts: Counter = field(default_factory=Counter)  # (member, parent, group, core, seq) -> n
    deliveries: Counter = field(default_factory=Counter)  # (broker, client, packet_id) -> n
    publications: list = field(default_factory=list)
    notices: list = field(default_factory=list)  # (time, broker, kind, group, value)
    errors: list = field(default_factory=list)  # (time, broker, action, code)
    dropped: Counter = field(default_factory=Counter)
    convergence_round: dict = field(default_factory=dict)  # group -> round or None
    events_processed: int = 0
    loss_free: bool = True

    def rows(self) -> list[tuple[int, str, int, int]]:
        """(round, kind, packets, bytes) in stable order."""
        return [(r, k, self.control_counts[(r, k)], self.control_bytes[(r, k)])
                for r, k in sorted(self.control_counts)]

    def to_dict(self) -> dict:
        return {
            "round_ticks": self.round_ticks,
            "rounds": self.rounds,
            "rows": [list(r) for r in self.rows()],
            "bytes_by_kind": dict(sorted(self.bytes_by_kind.items())),
            "announce_links": {
                f"{g}/{c}/{s}": {f"{a}-{b}": n for (a, b), n in sorted(links.items())}
                for (g, c, s), links in sorted(self.announce_links.items())
            },
            "membership_counts": [list(k) + [n] for k, n in sorted(self.membership_counts.items())],
            "deliveries": [[b, c, list(p), n] for (b, c, p), n in sorted(self.deliveries.items())],
            "publications": [[p.time, p.broker, p.topic.decode("utf-8", "replace"), p.group,
                              list(p.packet_id) if p.packet_id else None, p.error]
                             for p in self.publications],
            "notices": [[t, b, k, g, repr(v)] for t, b, k, g, v in self.notices],
            "errors": [list(e) for e in self.errors],
            "dropped": dict(sorted(self.dropped.items())),
            "convergence_round": {str(g): r for g, r in sorted(self.convergence_round.items())},
            "events_processed": self.events_processed,
        }


@dataclass
class Snapshot:
    time: int
    brokers: dict[int, dict[int, dict]]  # broker -> group -> status
    alive: tuple[int, ...]
    edges: tuple[Edge, ...]  # links still up
    in_flight: int
    quiescent: bool = False

    def view(self, group: int | None = None) -> dict:
        """Structural state (no sequence numbers) used for fixpoint checks."""
        out = {}
        for b, groups in self.brokers.items():
            for g, st in groups.items():
                if group is None or g == group:
                    out[(b, g)] = (st["core"], st["role"], st["distance"], st["parents"],
                                   st["children"], st["subscribers"])
        return out

    def groups(self) -> list[int]:
        return sorted({g for groups in self.brokers.values() for g in groups})

    def status(self, broker: int, group: int) -> dict | None:
        return self.brokers.get(broker, {}).get(group)

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "alive": list(self.alive),
            "edges": [list(e) for e in self.edges],
            "in_flight": self.in_flight,
            "quiescent": self.quiescent,
            "brokers": {
                str(b): {str(g): {k: list(v) if isinstance(v, tuple) else v for k, v in st.items()}
                         for g, st in groups.items()}
                for b, groups in self.brokers.items()
            },
        }


@dataclass
class RunResult:
    metrics: Metrics
    snapshot: Snapshot
    brokers: dict[int, Broker]

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics.to_dict(), "snapshot": self.snapshot.to_dict()},
                          sort_keys=True)


class Simulation:
    def __init__(self, scenario: Scenario) -> None:
        scenario.validate()
        self.scenario = scenario
        self.topology = scenario.topology
        self.period = scenario.ticks_per_round
        self.rng = random.Random(scenario.seed)
        self.adj = self.topology.adjacency()
        self.brokers = {
            b: Broker(
                Config(
                    self_id=b,
                    neighbors=frozenset(self.adj[b]),
                    redundancy=scenario.redundancy,
                    announce_period=self.period,
                    expiry_rounds=scenario.expiry_rounds,
                    management_core=scenario.management_core,
                ),
                mappings=scenario.mappings,
            )
            for b in self.topology.nodes
        }
        self.alive = set(self.topology.nodes)
        self.dead_links: set[Edge] = set()
        self.metrics = Metrics(round_ticks=self.period, rounds=scenario.rounds)
        self.metrics.loss_free = all(p == 0.0 for p in self.topology.loss.values())
        self._queue: list = []
        self._counter = 0
        self._in_flight = 0
        self.now = 0

    # -- queue -------------------------------------------------------------

    def _push(self, time: int, phase: int, sender: int, item) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (time, phase, sender, self._counter, item))

    def _apply(self, broker: int, actions) -> None:
        sizes: dict[int, int] = {}
        for act in actions:
            if isinstance(act, Send):
                self._transmit(broker, act.to, act.packet, sizes)
            elif isinstance(act, Deliver):
                self.metrics.deliveries[(broker, act.client, act.packet_id)] += 1
            elif isinstance(act, Notice):
                self.metrics.notices.append((self.now, broker, act.kind, act.group, act.value))

    def _transmit(self, sender: int, to: int, packet: Packet, sizes: dict[int, int]) -> None:
        m = self.metrics
        kind = kind_name(packet)
        size = sizes.get(id(packet))
        if size is None:
            size = sizes[id(packet)] = len(wire.encode(packet))
        rnd = self.now // self.period
        m.control_counts[(rnd, kind)] += 1
        m.control_bytes[(rnd, kind)] += size
        m.bytes_by_kind[kind] += size
        link = edge(sender, to)
        if isinstance(packet, CoreAnnouncement):
            m.announce_links[(packet.group, packet.core, packet.seq)][link] += 1
        elif isinstance(packet, MeshMembershipAnnouncement):
            m.membership_counts[(sender, to, packet.group, packet.core, packet.seq)] += 1
        if link in self.dead_links:
            m.dropped["dead_link"] += 1
            return
        loss = self.topology.loss.get(link, 0.0)
        if loss > 0.0 and self.rng.random() < loss:
            m.dropped["loss"] += 1
            return
        self._in_flight += 1
        self._push(self.now + self.topology.latency[link], PHASE_PACKET, sender, (to, packet))

    # -- event handlers ----------------------------------------------------

    def _deliver_packet(self, sender: int, to: int, packet: Packet) -> None:
        self._in_flight -= 1
        if to not in self.alive:
            self.metrics.dropped["dead_broker"] += 1
            return
        if edge(sender, to) in self.dead_links:
            self.metrics.dropped["dead_link"] += 1
            return
        self._apply(to, self.brokers[to].handle_packet(packet, sender, self.now))

    def _script(self, ev: ScriptEvent) -> None:
        m = self.metrics
        b = ev.broker
        if ev.do == "kill-link":
            self.dead_links.add(edge(*ev.link))
            return
        if b not in self.alive:
            m.errors.append((self.now, b, ev.do, "DEAD_BROKER"))
            return
        if ev.do == "kill-broker":
            self.alive.discard(b)
            return
        broker = self.brokers[b]
        try:
            if ev.do == "subscribe":
                actions = broker.handle_subscribe(ev.topic, ev.client_id(), self.now)
            elif ev.do == "unsubscribe":
                actions = broker.handle_unsubscribe(ev.topic, ev.client_id())
            elif ev.do == "advertise-mapping":
                actions = broker.advertise_mapping(TopicMapping(ev.group, ev.prefix, b))
            else:
                try:
                    group = broker.resolve(ev.topic)
                except FederationError:
                    group = None
                actions = broker.handle_publish(ev.topic, ev.payload, ev.client_id(), self.now)
                pid = next(a.value for a in actions if isinstance(a, Notice) and a.kind == "published")
                m.publications.append(PublishRecord(self.now, b, ev.topic, group, pid))
        except FederationError as exc:
            m.errors.append((self.now, b, ev.do, exc.code))
            if ev.do == "publish":
                m.publications.append(PublishRecord(self.now, b, ev.topic, group, None, exc.code))
            return
        self._apply(b, actions)

    def _process_until(self, limit: int | None) -> None:
        q = self._queue
        while q and (limit is None or q[0][0] < limit):
            time, phase, sender, _, item = heapq.heappop(q)
            self.now = time
            self.metrics.events_processed += 1
            if self.metrics.events_processed > MAX_EVENTS:
                raise RuntimeError("event budget exhausted; protocol failed to quiesce")
            if phase == PHASE_PACKET:
                to, packet = item
                self._deliver_packet(sender, to, packet)
            else:
                self._script(item)

    def snapshot(self) -> Snapshot:
        brokers = {}
        for b in sorted(self.alive):
            br = self.brokers[b]
            brokers[b] = {g: br.status(g) for g in br.known_groups()}
        edges = tuple(e for e in self.topology.edges
                      if e not in self.dead_links and e[0] in self.alive and e[1] in self.alive)
        return Snapshot(self.now, brokers, tuple(sorted(self.alive)), edges, self._in_flight)

    def run(self) -> RunResult:
        sc = self.scenario
        for ev in sc.script:
            self._push(round(ev.at * self.period), PHASE_SCRIPT, -1, ev)
        round_ends: list[Snapshot] = []
        for r in range(sc.rounds + 1):
            t = r * self.period
            self._process_until(t)
            self.now = t
            if r > 0:
                round_ends.append(self.snapshot())
            for b in sorted(self.alive):
                br = self.brokers[b]
                self._apply(b, br.start(t) if r == 0 else br.handle_tick(t))
        self._process_until(None)
        final = self.snapshot()
        if round_ends:
            last = round_ends[-1]
            final.quiescent = last.in_flight == 0 and final.in_flight == 0 and last.view() == final.view()
        self._record_convergence(round_ends, final)
        return RunResult(self.metrics, final, self.brokers)

    def _record_convergence(self, round_ends: list[Snapshot], final: Snapshot) -> None:
        history = round_ends + [final]
        for g in final.groups():
            target = final.view(g)
            first = None
            for i in range(len(history) - 1, -1, -1):
                if history[i].view(g) != target:
                    break
                first = i
            self.metrics.convergence_round[g] = first


def run(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()
