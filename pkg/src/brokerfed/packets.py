"""Inter-broker packet types.

All packets are frozen dataclasses so they hash, compare by value and can be
shared between brokers in the simulator without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

MANAGEMENT_GROUP = 0

U8_MAX = 0xFF
U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF

PacketId = Tuple[int, int]


@dataclass(frozen=True)
class TopicMapping:
    group: int
    topic_prefix: bytes
    origin: int


@dataclass(frozen=True)
class CoreAnnouncement:
    group: int
    core: int
    seq: int
    distance: int
    mesh_member: bool
    parents: tuple[int, ...] = ()


@dataclass(frozen=True)
class MeshMembershipAnnouncement:
    group: int
    core: int
    seq: int
    sender: int
    parents: tuple[int, ...] = ()


@dataclass(frozen=True)
class Publication:
    group: int
    topic: bytes
    packet_id: PacketId
    payload: bytes
    origin_broker: int


@dataclass(frozen=True)
class MappingAdvert:
    """One or more topic mappings flooded over the management mesh."""

    packet_id: PacketId
    mappings: tuple[TopicMapping, ...] = field(default=())
    group: int = MANAGEMENT_GROUP


Packet = Union[CoreAnnouncement, MeshMembershipAnnouncement, Publication, MappingAdvert]

KIND_NAMES = {
    CoreAnnouncement: "core_announcement",
    MeshMembershipAnnouncement: "mesh_membership",
    Publication: "publication",
    MappingAdvert: "mapping_advert",
}


def kind_name(packet: Packet) -> str:
    return KIND_NAMES[type(packet)]
