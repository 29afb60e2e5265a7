"""Enumerate packet delivery orders over a set of brokers.

Every in-flight packet is a candidate for the next delivery, so each path
through the tree is one possible network interleaving. Used as an ordering
oracle independent of the simulator's tie-break rule.
"""

from __future__ import annotations

import copy
import random
from collections import Counter

from brokerfed.core import Broker, Deliver, Send


def _sends(sender, actions):
    return tuple((sender, a.to, a.packet) for a in actions if isinstance(a, Send))


def all_orders(brokers: dict[int, Broker], pending: tuple, visit, counts: Counter | None = None,
               deliveries: Counter | None = None) -> int:
    """Depth-first over every interleaving; calls visit(brokers, counts, deliveries) at each leaf."""
    counts = counts if counts is not None else Counter()
    deliveries = deliveries if deliveries is not None else Counter()
    if not pending:
        visit(brokers, counts, deliveries)
        return 1
    leaves = 0
    tried = set()
    for i, (sender, to, packet) in enumerate(pending):
        if (sender, to, packet) in tried:
            continue
        tried.add((sender, to, packet))
        bs = copy.deepcopy(brokers)
        actions = bs[to].handle_packet(packet, sender, 0)
        new = _sends(to, actions)
        c = counts.copy()
        for s, t, p in new:
            c[(type(p).__name__, min(s, t), max(s, t))] += 1
        d = deliveries.copy()
        for a in actions:
            if isinstance(a, Deliver):
                d[(to, a.client, a.packet_id)] += 1
        leaves += all_orders(bs, pending[:i] + pending[i + 1:] + new, visit, c, d)
    return leaves


def random_order(brokers: dict[int, Broker], pending: tuple, rng: random.Random) -> tuple[Counter, Counter]:
    """Deliver in one uniformly random order; mutates ``brokers``."""
    pending = list(pending)
    counts: Counter = Counter()
    deliveries: Counter = Counter()
    for s, t, p in pending:
        counts[(type(p).__name__, min(s, t), max(s, t))] += 1
    while pending:
        sender, to, packet = pending.pop(rng.randrange(len(pending)))
        actions = brokers[to].handle_packet(packet, sender, 0)
        for s, t, p in _sends(to, actions):
            counts[(type(p).__name__, min(s, t), max(s, t))] += 1
            pending.append((s, t, p))
        for a in actions:
            if isinstance(a, Deliver):
                deliveries[(to, a.client, a.packet_id)] += 1
    return counts, deliveries


def initial(actions_by_broker) -> tuple:
    out = ()
    for b, actions in actions_by_broker:
        out += _sends(b, actions)
    return out
