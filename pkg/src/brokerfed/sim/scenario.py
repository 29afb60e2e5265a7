"""Scenario description and its JSON file format.

Script times are in announcement rounds (floats allowed): the management
flood starts at 0, core ticks fire at 1, 2, ... ``rounds``. An event at 2.5
happens halfway through the third round.

JSON layout::

    {
      "topology": {"nodes": [0, 1], "edges": [[0, 1], [1, 2, 3, 0.1]]},
      "seed": 7, "redundancy": 2, "rounds": 8, "expiry_rounds": 3,
      "round_ticks": null, "management_core": 0,
      "mappings": [{"group": 7, "prefix": "app2/", "origin": 0}],
      "script": [
        {"at": 0.5, "do": "subscribe", "broker": 1, "topic": "app2/t", "client": "a"},
        {"at": 3.5, "do": "publish", "broker": 0, "topic": "app2/t", "payload": "aGk="},
        {"at": 4.5, "do": "kill-link", "link": [3, 5]},
        {"at": 5.5, "do": "kill-broker", "broker": 1},
        {"at": 6.5, "do": "advertise-mapping", "broker": 0, "group": 8, "prefix": "app3/"}
      ]
    }

Edges are ``[a, b]`` or ``[a, b, latency_ticks]`` or ``[a, b, latency, loss]``.
Payloads are base64.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..packets import TopicMapping
from .topology import InvalidTopology, Topology, edge

ACTIONS = ("subscribe", "unsubscribe", "publish", "kill-broker", "kill-link", "advertise-mapping")


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class ScriptEvent:
    at: float
    do: str
    broker: int | None = None
    topic: bytes = b""
    client: str = ""
    payload: bytes = b""
    link: tuple[int, int] | None = None
    group: int | None = None
    prefix: bytes = b""

    def client_id(self) -> str:
        return self.client or f"sub{self.broker}"


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    script: tuple[ScriptEvent, ...] = ()
    seed: int = 0
    redundancy: int = 2
    rounds: int = 8
    expiry_rounds: int = 3
    round_ticks: int | None = None
    management_core: int | None = None
    mappings: tuple[TopicMapping, ...] = field(default=())

    @property
    def ticks_per_round(self) -> int:
        if self.round_ticks is not None:
            return self.round_ticks
        # long enough for a full flood plus the membership cascade back
        return 2 * self.topology.n * self.topology.max_latency() + 2

    def validate(self) -> None:
        nodes = set(self.topology.nodes)
        if self.redundancy < 1 or self.expiry_rounds < 2 or self.rounds < 1:
            raise InvalidScenario("need redundancy >= 1, expiry_rounds >= 2, rounds >= 1")
        if self.round_ticks is not None and self.round_ticks < 1:
            raise InvalidScenario("round_ticks must be >= 1")
        if self.management_core is not None and self.management_core not in nodes:
            raise InvalidScenario(f"management core {self.management_core} not in topology")
        last = 0.0
        for ev in self.script:
            if ev.do not in ACTIONS:
                raise InvalidScenario(f"unknown action {ev.do!r}")
            if ev.at < last:
                raise InvalidScenario("script times must be non-decreasing")
            if ev.at < 0:
                raise InvalidScenario("script times must be >= 0")
            last = ev.at
            if ev.do == "kill-link":
                if ev.link is None or edge(*ev.link) not in self.topology.edges:
                    raise InvalidScenario(f"kill-link references unknown link {ev.link}")
            elif ev.broker not in nodes:
                raise InvalidScenario(f"{ev.do} references unknown broker {ev.broker}")
            if ev.do in ("subscribe", "unsubscribe", "publish") and not ev.topic:
                raise InvalidScenario(f"{ev.do} needs a topic")
            if ev.do == "advertise-mapping" and (not ev.prefix or not ev.group):
                raise InvalidScenario("advertise-mapping needs a non-zero group and a prefix")

    def with_events(self, *events: ScriptEvent) -> "Scenario":
        merged = sorted(self.script + tuple(events), key=lambda e: e.at)
        return replace(self, script=tuple(merged))


def _bytes(value) -> bytes:
    if value is None:
        return b""
    return value.encode() if isinstance(value, str) else bytes(value)


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        topo_doc = doc["topology"]
        edges, latency, loss = [], {}, {}
        for item in topo_doc.get("edges", []):
            a, b = int(item[0]), int(item[1])
            edges.append((a, b))
            if len(item) > 2:
                latency[edge(a, b)] = int(item[2])
            if len(item) > 3:
                loss[edge(a, b)] = float(item[3])
        default_loss = float(topo_doc.get("loss", 0.0))
        topology = Topology.build(
            edges,
            nodes=[int(v) for v in topo_doc.get("nodes", [])],
            latency={edge(a, b): latency.get(edge(a, b), int(topo_doc.get("latency", 1))) for a, b in edges},
            loss={edge(a, b): loss.get(edge(a, b), default_loss) for a, b in edges},
        )
        script = []
        for item in doc.get("script", []):
            link = item.get("link")
            script.append(ScriptEvent(
                at=float(item["at"]),
                do=item["do"],
                broker=item.get("broker"),
                topic=_bytes(item.get("topic")),
                client=item.get("client", ""),
                payload=base64.b64decode(item.get("payload", "")),
                link=tuple(link) if link is not None else None,
                group=item.get("group"),
                prefix=_bytes(item.get("prefix")),
            ))
        mappings = tuple(
            TopicMapping(int(m["group"]), _bytes(m["prefix"]), int(m.get("origin", 0)))
            for m in doc.get("mappings", [])
        )
        scenario = Scenario(
            topology=topology,
            script=tuple(script),
            seed=int(doc.get("seed", 0)),
            redundancy=int(doc.get("redundancy", 2)),
            rounds=int(doc.get("rounds", 8)),
            expiry_rounds=int(doc.get("expiry_rounds", 3)),
            round_ticks=doc.get("round_ticks"),
            management_core=doc.get("management_core"),
            mappings=mappings,
        )
    except (KeyError, TypeError, ValueError, InvalidTopology) as exc:
        raise InvalidScenario(str(exc)) from exc
    scenario.validate()
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    edges = []
    for e in s.topology.edges:
        edges.append([e[0], e[1], s.topology.latency.get(e, 1), s.topology.loss.get(e, 0.0)])
    script = []
    for ev in s.script:
        item: dict = {"at": ev.at, "do": ev.do}
        if ev.broker is not None:
            item["broker"] = ev.broker
        if ev.topic:
            item["topic"] = ev.topic.decode()
        if ev.client:
            item["client"] = ev.client
        if ev.payload:
            item["payload"] = base64.b64encode(ev.payload).decode()
        if ev.link is not None:
            item["link"] = list(ev.link)
        if ev.group is not None:
            item["group"] = ev.group
        if ev.prefix:
            item["prefix"] = ev.prefix.decode()
        script.append(item)
    return {
        "topology": {"nodes": list(s.topology.nodes), "edges": edges},
        "seed": s.seed,
        "redundancy": s.redundancy,
        "rounds": s.rounds,
        "expiry_rounds": s.expiry_rounds,
        "round_ticks": s.round_ticks,
        "management_core": s.management_core,
        "mappings": [{"group": m.group, "prefix": m.topic_prefix.decode(), "origin": m.origin}
                     for m in s.mappings],
        "script": script,
    }


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"{path}: {exc}") from exc
    return scenario_from_dict(doc)


def dump_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n")
