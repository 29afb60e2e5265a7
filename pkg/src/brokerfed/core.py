"""Deterministic, I/O-free state machine for one federated broker.

A :class:`Broker` consumes events (received packets, client subscribe and
publish calls, timer ticks) and returns a list of actions for its host to
carry out. It never reads a clock or touches a socket; time is passed in as
``now`` in whatever unit ``Config.announce_period`` uses.

Meshes are built per multicast group. The core of a group floods a
:class:`CoreAnnouncement` every period with an increasing sequence number;
every broker learns its hop distance to the core and keeps up to
``redundancy`` equal-distance neighbors as parents. Brokers with local
subscribers announce themselves to their parents with
:class:`MeshMembershipAnnouncement`, which cascades toward the core and turns
interconnecting brokers into mesh members. Publications are flooded over the
mesh (parents plus children) or, from an outsider, handed toward the core.

Ties are always broken toward the smallest broker id: competing cores,
conflicting topic mappings, and surplus equal-distance parents.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Union

from .packets import (
    MANAGEMENT_GROUP,
    U32_MAX,
    CoreAnnouncement,
    MappingAdvert,
    MeshMembershipAnnouncement,
    Packet,
    PacketId,
    Publication,
    TopicMapping,
)

log = logging.getLogger(__name__)

ClientId = Hashable


class FederationError(Exception):
    """Base class for errors reported to the caller of a broker operation."""

    code = "ERROR"


class UnmappedTopic(FederationError):
    code = "UNMAPPED_TOPIC"


class UnknownSubscription(FederationError):
    code = "UNKNOWN_SUBSCRIPTION"


class NoKnownCore(FederationError):
    code = "NO_CORE"


class UnknownGroup(FederationError):
    code = "UNKNOWN_GROUP"


class ConflictRejected(FederationError):
    code = "CONFLICT"


class Role(enum.Enum):
    CORE = "core"
    MESH_MEMBER = "member"
    INTERCONNECT_CANDIDATE = "candidate"
    OUTSIDER = "outsider"


@dataclass(frozen=True)
class Send:
    to: int
    packet: Packet


@dataclass(frozen=True)
class Deliver:
    client: ClientId
    topic: bytes
    payload: bytes
    packet_id: PacketId


@dataclass(frozen=True)
class Notice:
    """A state change worth logging: ``became_core``, ``abdicated``, ``core_expired``, ..."""

    kind: str
    group: int
    value: object = None


Action = Union[Send, Deliver, Notice]


@dataclass(frozen=True)
class Config:
    self_id: int
    neighbors: frozenset[int]
    redundancy: int = 2
    announce_period: float = 3.0
    expiry_rounds: int = 3
    seen_cache_capacity: int = 4096
    # None: every broker claims the management core at start, smallest id wins.
    management_core: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "neighbors", frozenset(self.neighbors))
        if self.redundancy < 1:
            raise ValueError("redundancy must be >= 1")
        if self.expiry_rounds < 2:
            raise ValueError("expiry_rounds must be >= 2")
        if self.announce_period <= 0:
            raise ValueError("announce_period must be > 0")
        if self.seen_cache_capacity < 1:
            raise ValueError("seen_cache_capacity must be >= 1")
        if self.self_id in self.neighbors:
            raise ValueError("a broker cannot be its own neighbor")

    @property
    def expiry_window(self) -> float:
        return self.expiry_rounds * self.announce_period


def seq_newer(a: int, b: int) -> bool:
    """Serial-number comparison on 32 bits: is ``a`` ahead of ``b``?"""
    diff = (a - b) & U32_MAX
    return 0 < diff < 0x80000000


class SeenCache:
    """Fixed-capacity set that forgets its oldest entries first."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._items: OrderedDict[Hashable, None] = OrderedDict()

    def __contains__(self, key: Hashable) -> bool:
        return key in self._items

    def __len__(self) -> int:
        return len(self._items)

    def add(self, key: Hashable) -> None:
        if key in self._items:
            return
        self._items[key] = None
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)


@dataclass
class GroupState:
    group: int
    core: int | None = None
    core_seq: int = 0
    distance: int | None = None  # None until an announcement of core_seq arrives
    parents: list[int] = field(default_factory=list)  # ascending ids
    mesh_children: dict[int, float] = field(default_factory=dict)  # child -> last refresh
    subscribers: dict[ClientId, set[bytes]] = field(default_factory=dict)
    membership_sent_for: set[tuple[int, int]] = field(default_factory=set)  # (seq, parent)
    forwarded_seq: int | None = None
    listed_by: set[int] = field(default_factory=set)
    last_refresh: float = 0.0
    self_id: int = -1

    @property
    def is_core(self) -> bool:
        return self.core == self.self_id

    @property
    def is_mesh_member(self) -> bool:
        return (
            bool(self.subscribers)
            or bool(self.mesh_children)
            or self.is_core
            or self.group == MANAGEMENT_GROUP
        )

    def mesh_neighbors(self) -> list[int]:
        return sorted(set(self.parents) | set(self.mesh_children))

    def reset_core(self, core: int | None) -> None:
        self.core = core
        self.core_seq = 0
        self.distance = 0 if core == self.self_id else None
        self.parents = []
        self.mesh_children = {}
        self.membership_sent_for = set()
        self.forwarded_seq = None
        self.listed_by = set()

    def start_round(self, seq: int) -> None:
        self.core_seq = seq
        self.distance = 0 if self.is_core else None
        self.parents = []
        self.forwarded_seq = None
        self.listed_by = set()
        self.membership_sent_for = {k for k in self.membership_sent_for if k[0] == seq}


class Broker:
    """Protocol state of one broker. Not thread-safe; the host serializes access."""

    def __init__(self, config: Config, mappings: Iterable[TopicMapping] = ()) -> None:
        self.config = config
        self.id = config.self_id
        self.groups: dict[int, GroupState] = {}
        self.mappings: dict[bytes, TopicMapping] = {}
        self.seen = SeenCache(config.seen_cache_capacity)
        self.counters: Counter[str] = Counter()
        self._next_seq: dict[int, int] = {}
        self._packet_counter = 0
        for m in mappings:
            self._install_mapping(m)

    # -- helpers -----------------------------------------------------------

    def _state(self, group: int) -> GroupState:
        st = self.groups.get(group)
        if st is None:
            st = self.groups[group] = GroupState(group=group, self_id=self.id)
        return st

    def _new_packet_id(self) -> PacketId:
        self._packet_counter += 1
        return (self.id, self._packet_counter)

    def _announcement(self, st: GroupState) -> CoreAnnouncement:
        return CoreAnnouncement(
            group=st.group,
            core=st.core,
            seq=st.core_seq,
            distance=st.distance or 0,
            mesh_member=st.is_mesh_member,
            parents=tuple(st.parents),
        )

    def _claim_core(self, st: GroupState, now: float) -> list[Action]:
        st.reset_core(self.id)
        return [Notice("became_core", st.group)] + self._announce(st, now)

    def _announce(self, st: GroupState, now: float) -> list[Action]:
        seq = self._next_seq.get(st.group, 0) + 1 & U32_MAX
        self._next_seq[st.group] = seq
        st.start_round(seq)
        st.forwarded_seq = seq
        st.last_refresh = now
        ann = self._announcement(st)
        return [Send(n, ann) for n in sorted(self.config.neighbors)]

    def _notify_parents(self, st: GroupState) -> list[Action]:
        """Send one membership announcement per parent for the current seq."""
        if st.is_core or not st.is_mesh_member:
            return []
        out: list[Action] = []
        for p in st.parents:
            key = (st.core_seq, p)
            if key in st.membership_sent_for:
                continue
            st.membership_sent_for.add(key)
            out.append(Send(p, MeshMembershipAnnouncement(
                st.group, st.core, st.core_seq, self.id, tuple(st.parents))))
        return out

    def _deliveries(self, st: GroupState, pub: Publication) -> list[Action]:
        return [
            Deliver(client, pub.topic, pub.payload, pub.packet_id)
            for client, topics in st.subscribers.items()
            if pub.topic in topics
        ]

    def _forward_publication(self, st: GroupState, pub: Publication, exclude: int | None) -> list[Action]:
        if st.is_mesh_member:
            out = self._deliveries(st, pub)
            out.extend(Send(n, pub) for n in st.mesh_neighbors() if n != exclude)
            return out
        toward_core = [p for p in st.parents if p != exclude]
        if not toward_core:
            self.counters["no_route"] += 1
            return []
        return [Send(toward_core[0], pub)]

    def resolve(self, topic: bytes) -> int:
        """Longest-prefix match of ``topic`` against the installed mappings."""
        best: TopicMapping | None = None
        for prefix, m in self.mappings.items():
            if topic.startswith(prefix) and (best is None or len(prefix) > len(best.topic_prefix)):
                best = m
        if best is None:
            raise UnmappedTopic(topic.decode("utf-8", "replace"))
        return best.group

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: float) -> list[Action]:
        """Join the management group; claims its core if configured or unset."""
        st = self._state(MANAGEMENT_GROUP)
        st.last_refresh = now
        mc = self.config.management_core
        if st.core is None and (mc is None or mc == self.id):
            return self._claim_core(st, now)
        return []

    # -- client operations -------------------------------------------------

    def handle_subscribe(self, topic: bytes, client: ClientId, now: float = 0.0) -> list[Action]:
        group = self.resolve(topic)
        st = self._state(group)
        was_member = st.is_mesh_member
        st.subscribers.setdefault(client, set()).add(topic)
        if st.core is None:
            return self._claim_core(st, now)
        if not was_member:
            return [Notice("became_member", group)] + self._notify_parents(st)
        return []

    def handle_unsubscribe(self, topic: bytes, client: ClientId) -> list[Action]:
        group = self.resolve(topic)
        st = self.groups.get(group)
        topics = st.subscribers.get(client) if st else None
        if not topics or topic not in topics:
            raise UnknownSubscription(f"{client!r} is not subscribed to {topic!r}")
        topics.discard(topic)
        if not topics:
            del st.subscribers[client]
        if not st.is_mesh_member:
            return [Notice("left_mesh", group)]
        return []

    def drop_client(self, client: ClientId) -> list[Action]:
        """Remove every subscription held by ``client`` (connection closed)."""
        out: list[Action] = []
        for group in sorted(self.groups):
            st = self.groups[group]
            if st.subscribers.pop(client, None) is not None and not st.is_mesh_member:
                out.append(Notice("left_mesh", group))
        return out

    def handle_publish(self, topic: bytes, payload: bytes, client: ClientId = None,
                       now: float = 0.0) -> list[Action]:
        group = self.resolve(topic)
        st = self.groups.get(group)
        if st is None or st.core is None:
            raise NoKnownCore(f"no core known for group {group}")
        if not st.is_mesh_member and not st.parents:
            raise NoKnownCore(f"no route toward core {st.core} of group {group}")
        pub = Publication(group, topic, self._new_packet_id(), payload, self.id)
        self.seen.add(pub.packet_id)
        return [Notice("published", group, pub.packet_id)] + self._forward_publication(st, pub, None)

    def advertise_mapping(self, *mappings: TopicMapping) -> list[Action]:
        """Install mappings locally and flood them in one advert packet."""
        accepted = [m for m in mappings if self._install_mapping(m)]
        if not accepted:
            return []
        adv = MappingAdvert(self._new_packet_id(), tuple(accepted))
        self.seen.add(adv.packet_id)
        return self._flood_management(adv, None)

    # -- packet handlers ---------------------------------------------------

    def handle_packet(self, packet: Packet, sender: int, now: float) -> list[Action]:
        if isinstance(packet, CoreAnnouncement):
            return self.handle_core_announcement(packet, sender, now)
        if isinstance(packet, MeshMembershipAnnouncement):
            return self.handle_mesh_membership_announcement(packet, sender, now)
        if isinstance(packet, Publication):
            return self.handle_publication_packet(packet, sender)
        if isinstance(packet, MappingAdvert):
            return self.handle_mapping_advert(packet, sender)
        raise TypeError(f"not a protocol packet: {packet!r}")

    def handle_core_announcement(self, ann: CoreAnnouncement, sender: int, now: float) -> list[Action]:
        if sender not in self.config.neighbors:
            self.counters["unknown_neighbor"] += 1
            return []
        out: list[Action] = []
        st = self._state(ann.group)
        new_round = False
        if st.core is None:
            st.reset_core(ann.core)
            new_round = True
        elif ann.core > st.core:
            self.counters["losing_core"] += 1
            return []
        elif ann.core < st.core:
            if st.is_core:
                out.append(Notice("abdicated", ann.group, ann.core))
            st.reset_core(ann.core)
            new_round = True
        if st.is_core:
            # our own flood relayed back
            return out
        if new_round or seq_newer(ann.seq, st.core_seq):
            st.start_round(ann.seq)
        elif ann.seq != st.core_seq:
            self.counters["stale_seq"] += 1
            return out
        st.last_refresh = now
        if ann.mesh_member and self.id in ann.parents:
            st.listed_by.add(sender)

        candidate = ann.distance + 1
        forward = False
        if st.distance is None or candidate < st.distance:
            st.distance = candidate
            st.parents = [sender]
            forward = True
        elif candidate == st.distance:
            if sender not in st.parents:
                if len(st.parents) < self.config.redundancy:
                    st.parents = sorted(st.parents + [sender])
                elif sender < st.parents[-1]:
                    st.parents = sorted(st.parents[:-1] + [sender])
        elif st.forwarded_seq != st.core_seq:
            forward = True

        if forward:
            st.forwarded_seq = st.core_seq
            relay = self._announcement(st)
            out.extend(Send(n, relay) for n in sorted(self.config.neighbors) if n != sender)
        out.extend(self._notify_parents(st))
        return out

    def handle_mesh_membership_announcement(self, ann: MeshMembershipAnnouncement, sender: int,
                                            now: float = 0.0) -> list[Action]:
        if sender not in self.config.neighbors:
            self.counters["unknown_neighbor"] += 1
            return []
        st = self.groups.get(ann.group)
        if st is None or st.core != ann.core:
            self.counters["stale_core"] += 1
            return []
        was_member = st.is_mesh_member
        st.mesh_children[sender] = now
        if st.is_core or was_member:
            return []
        return [Notice("became_member", ann.group)] + self._notify_parents(st)

    def handle_publication_packet(self, pub: Publication, sender: int) -> list[Action]:
        if sender not in self.config.neighbors:
            self.counters["unknown_neighbor"] += 1
            return []
        st = self.groups.get(pub.group)
        if st is None or st.core is None:
            self.counters["unknown_group"] += 1
            return []
        if pub.packet_id in self.seen:
            self.counters["duplicate"] += 1
            return []
        self.seen.add(pub.packet_id)
        return self._forward_publication(st, pub, sender)

    def handle_mapping_advert(self, adv: MappingAdvert, sender: int) -> list[Action]:
        if sender not in self.config.neighbors:
            self.counters["unknown_neighbor"] += 1
            return []
        if adv.packet_id in self.seen:
            self.counters["duplicate"] += 1
            return []
        self.seen.add(adv.packet_id)
        accepted = []
        for m in adv.mappings:
            try:
                if self._install_mapping(m):
                    accepted.append(m)
            except ConflictRejected:
                self.counters["mapping_conflict"] += 1
            except ValueError:
                self.counters["bad_mapping"] += 1
        if not accepted:
            return []
        relay = MappingAdvert(adv.packet_id, tuple(accepted), adv.group)
        return self._flood_management(relay, sender)

    def _install_mapping(self, m: TopicMapping) -> bool:
        """Returns True if local state changed; raises ConflictRejected if a smaller origin holds the prefix."""
        if not m.topic_prefix:
            raise ValueError("topic prefix must be non-empty")
        if m.group == MANAGEMENT_GROUP:
            raise ValueError("the management group carries no topic mapping")
        cur = self.mappings.get(m.topic_prefix)
        if cur == m:
            return False
        if cur is not None and cur.origin < m.origin:
            raise ConflictRejected(
                f"prefix {m.topic_prefix!r} already mapped to group {cur.group} by broker {cur.origin}")
        self.mappings[m.topic_prefix] = m
        return True

    def _flood_management(self, packet: Packet, exclude: int | None) -> list[Action]:
        st = self.groups.get(MANAGEMENT_GROUP)
        targets = st.mesh_neighbors() if st is not None else []
        if not targets:
            # management mesh not built yet
            targets = sorted(self.config.neighbors)
        return [Send(n, packet) for n in targets if n != exclude]

    # -- timer -------------------------------------------------------------

    def handle_tick(self, now: float) -> list[Action]:
        window = self.config.expiry_window
        out: list[Action] = []
        for group in sorted(self.groups):
            st = self.groups[group]
            expired = [c for c, t in st.mesh_children.items() if now - t > window]
            for c in expired:
                del st.mesh_children[c]
                out.append(Notice("child_expired", group, c))
            if st.is_core:
                out.extend(self._announce(st, now))
                continue
            if st.core is not None and now - st.last_refresh > window:
                out.append(Notice("core_expired", group, st.core))
                st.reset_core(None)
                if st.subscribers or group == MANAGEMENT_GROUP:
                    out.extend(self._claim_core(st, now))
            if expired and not st.is_mesh_member:
                out.append(Notice("left_mesh", group))
        for group in [g for g, st in self.groups.items()
                      if st.core is None and not st.subscribers and g != MANAGEMENT_GROUP]:
            del self.groups[group]
        return out

    # -- introspection -----------------------------------------------------

    def route_decision(self, group: int) -> Role:
        st = self.groups.get(group)
        if st is None or st.core is None:
            raise UnknownGroup(f"group {group} unknown at broker {self.id}")
        if st.is_core:
            return Role.CORE
        if st.is_mesh_member:
            return Role.MESH_MEMBER
        if st.listed_by:
            return Role.INTERCONNECT_CANDIDATE
        return Role.OUTSIDER

    def status(self, group: int) -> dict:
        """Summary of one group's state; the daemon's STATUS line and the simulator snapshot."""
        st = self.groups.get(group)
        if st is None or st.core is None:
            raise UnknownGroup(f"group {group} unknown at broker {self.id}")
        return {
            "group": group,
            "core": st.core,
            "role": self.route_decision(group).value,
            "distance": st.distance,
            "parents": tuple(st.parents),
            "children": tuple(sorted(st.mesh_children)),
            "subscribers": len(st.subscribers),
            "seq": st.core_seq,
        }

    def known_groups(self) -> list[int]:
        return sorted(g for g, st in self.groups.items() if st.core is not None)
