"""Ready-made scenarios: the six-broker worked example and seeded random sweeps."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..packets import MANAGEMENT_GROUP, TopicMapping
from .checks import Verdict, check_convergence, check_delivery, check_membership_once, check_overhead
from .engine import run
from .scenario import Scenario, ScriptEvent
from .topology import figure_topology, random_topology

APP1_GROUP = 6
APP2_GROUP = 7
APP1_TOPIC = b"app1/sensor"
APP2_TOPIC = b"app2/temp"

FIGURE_MAPPINGS = (
    TopicMapping(APP1_GROUP, b"app1/", 0),
    TopicMapping(APP2_GROUP, b"app2/", 0),
)


def sub(at: float, broker: int, topic: bytes, client: str = "") -> ScriptEvent:
    return ScriptEvent(at=at, do="subscribe", broker=broker, topic=topic, client=client)


def pub(at: float, broker: int, topic: bytes, payload: bytes = b"x") -> ScriptEvent:
    return ScriptEvent(at=at, do="publish", broker=broker, topic=topic, payload=payload)


def figure_scenario(*events: ScriptEvent, rounds: int = 6, redundancy: int = 2,
                    management_core: int | None = 0, **kw) -> Scenario:
    return Scenario(
        topology=figure_topology(),
        script=tuple(sorted(events, key=lambda e: e.at)),
        redundancy=redundancy,
        rounds=rounds,
        management_core=management_core,
        mappings=FIGURE_MAPPINGS,
        **kw,
    )


def figure_two_apps(rounds: int = 6, **kw) -> Scenario:
    """App 1 first subscribed at broker 0 then 3; app 2 first at broker 1 then 5."""
    return figure_scenario(
        sub(0.5, 0, APP1_TOPIC), sub(0.5, 1, APP2_TOPIC),
        sub(2.5, 3, APP1_TOPIC), sub(2.5, 5, APP2_TOPIC),
        rounds=rounds, **kw,
    )


def random_scenario(seed: int, n_min: int = 3, n_max: int = 50, rounds: int = 4) -> Scenario:
    """Random connected overlay, random core placement and subscriber set.

    The core's broker subscribes first; the rest join one round later.
    """
    rng = random.Random(seed)
    n = rng.randint(n_min, n_max)
    topo = random_topology(n, rng, extra_density=rng.uniform(0.0, 0.15))
    core = rng.randrange(n)
    others = [b for b in range(n) if b != core]
    members = rng.sample(others, rng.randint(0, len(others)))
    events = [sub(0.5, core, APP2_TOPIC)] + [sub(1.5, b, APP2_TOPIC) for b in sorted(members)]
    return Scenario(
        topology=topo,
        script=tuple(events),
        seed=seed,
        redundancy=rng.randint(1, 3),
        rounds=rounds,
        management_core=rng.randrange(n),
        mappings=(TopicMapping(APP2_GROUP, b"app2/", 0),),
    )


@dataclass
class SweepReport:
    samples: int = 0
    failures: list[str] = field(default_factory=list)
    max_n: int = 0
    max_l: int = 0
    waves: int = 0
    worst_link: int = 0
    worst_ratio: float = 0.0  # max over waves of transmissions / (2*l)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_run(scenario: Scenario, result=None) -> list[Verdict]:
    """Run every check that applies to ``scenario``."""
    result = result or run(scenario)
    m, snap = result.metrics, result.snapshot
    verdicts = []
    if m.loss_free:
        verdicts.append(check_overhead(m, scenario.topology))
    verdicts.append(check_membership_once(m))
    if not snap.quiescent:
        v = Verdict("quiescence")
        v.fail(f"run did not reach quiescence by t={snap.time}")
        verdicts.append(v)
    else:
        for g in snap.groups():
            verdicts.append(check_convergence(snap, scenario.topology, g, scenario.redundancy))
    if m.publications and m.loss_free:
        verdicts.append(check_delivery(m, scenario))
    return verdicts


def sweep(samples: int = 500, n_max: int = 50, seed: int = 0, n_min: int = 3) -> SweepReport:
    report = SweepReport()
    for i in range(samples):
        sc = random_scenario(seed * 1_000_003 + i, n_min=n_min, n_max=n_max)
        result = run(sc)
        report.samples += 1
        report.max_n = max(report.max_n, sc.topology.n)
        report.max_l = max(report.max_l, sc.topology.l)
        for v in verify_run(sc, result):
            if not v.ok:
                report.failures.append(f"sample {i} (n={sc.topology.n}, l={sc.topology.l}): {v.summary()}")
            if v.name == "overhead":
                report.waves += v.details["waves"]
                report.worst_link = max(report.worst_link, v.details["worst_link"])
                if v.details["bound"]:
                    report.worst_ratio = max(report.worst_ratio, v.details["worst_total"] / v.details["bound"])
        groups = result.snapshot.groups()
        if APP2_GROUP not in groups or MANAGEMENT_GROUP not in groups:
            report.failures.append(f"sample {i}: groups {groups} missing")
    return report
