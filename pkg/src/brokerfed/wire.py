"""Binary wire format for inter-broker packets.

Every packet is a 10-byte header followed by a kind-specific body::

    magic   2  b"MF"
    version 1  1
    kind    1  1=core announcement, 2=mesh membership, 3=publication,
               4=mapping advert
    group   4  big-endian unsigned
    length  2  big-endian body length

All integers are big-endian. Lists carry a 1-byte count; byte strings a
2-byte length, except the publication payload, which runs to the end of the
body. See docs/wire-format.md for worked hex dumps.
"""

from __future__ import annotations

import struct

from .packets import (
    U8_MAX,
    U16_MAX,
    U32_MAX,
    U64_MAX,
    CoreAnnouncement,
    MappingAdvert,
    MeshMembershipAnnouncement,
    Packet,
    Publication,
    TopicMapping,
)

MAGIC = b"MF"
VERSION = 1
HEADER = struct.Struct(">2sBBIH")
HEADER_SIZE = HEADER.size  # 10

KIND_CORE_ANNOUNCEMENT = 1
KIND_MESH_MEMBERSHIP = 2
KIND_PUBLICATION = 3
KIND_MAPPING_ADVERT = 4

_ANN = struct.Struct(">QIHBBB")  # core, seq, distance, flag, parent count, reserved
_MMA = struct.Struct(">QIQB")  # core, seq, sender, parent count
_PUB = struct.Struct(">QQQH")  # packet origin, counter, origin broker, topic length
_ADV = struct.Struct(">QQB")  # packet origin, counter, mapping count
_MAP = struct.Struct(">IQH")  # group, origin, prefix length
_ID = struct.Struct(">Q")


class CodecError(Exception):
    """Base class for all wire codec failures."""


class FieldOverflow(CodecError):
    pass


class DecodeError(CodecError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class UnknownKind(DecodeError):
    pass


class Malformed(DecodeError):
    """Body is internally inconsistent, e.g. trailing bytes after the last field."""


def _check(value: int, limit: int, name: str) -> None:
    if not 0 <= value <= limit:
        raise FieldOverflow(f"{name}={value} outside 0..{limit}")


def _ids(values: tuple[int, ...], name: str) -> bytes:
    if len(values) > U8_MAX:
        raise FieldOverflow(f"{name} has {len(values)} entries, max {U8_MAX}")
    for v in values:
        _check(v, U64_MAX, name)
    return b"".join(_ID.pack(v) for v in values)


def _text(value: bytes, name: str) -> bytes:
    if len(value) > U16_MAX:
        raise FieldOverflow(f"{name} is {len(value)} bytes, max {U16_MAX}")
    return value


def encode(packet: Packet) -> bytes:
    """Serialize ``packet``; raises FieldOverflow if a field does not fit."""
    if isinstance(packet, CoreAnnouncement):
        kind = KIND_CORE_ANNOUNCEMENT
        _check(packet.core, U64_MAX, "core")
        _check(packet.seq, U32_MAX, "seq")
        _check(packet.distance, U16_MAX, "distance")
        parents = _ids(packet.parents, "parents")
        body = _ANN.pack(packet.core, packet.seq, packet.distance,
                         1 if packet.mesh_member else 0, len(packet.parents), 0) + parents
    elif isinstance(packet, MeshMembershipAnnouncement):
        kind = KIND_MESH_MEMBERSHIP
        _check(packet.core, U64_MAX, "core")
        _check(packet.seq, U32_MAX, "seq")
        _check(packet.sender, U64_MAX, "sender")
        parents = _ids(packet.parents, "parents")
        body = _MMA.pack(packet.core, packet.seq, packet.sender, len(packet.parents)) + parents
    elif isinstance(packet, Publication):
        kind = KIND_PUBLICATION
        origin, counter = packet.packet_id
        _check(origin, U64_MAX, "packet_id.origin")
        _check(counter, U64_MAX, "packet_id.counter")
        _check(packet.origin_broker, U64_MAX, "origin_broker")
        topic = _text(packet.topic, "topic")
        body = _PUB.pack(origin, counter, packet.origin_broker, len(topic)) + topic + packet.payload
    elif isinstance(packet, MappingAdvert):
        kind = KIND_MAPPING_ADVERT
        origin, counter = packet.packet_id
        _check(origin, U64_MAX, "packet_id.origin")
        _check(counter, U64_MAX, "packet_id.counter")
        if len(packet.mappings) > U8_MAX:
            raise FieldOverflow(f"advert carries {len(packet.mappings)} mappings, max {U8_MAX}")
        parts = [_ADV.pack(origin, counter, len(packet.mappings))]
        for m in packet.mappings:
            _check(m.group, U32_MAX, "mapping.group")
            _check(m.origin, U64_MAX, "mapping.origin")
            prefix = _text(m.topic_prefix, "topic_prefix")
            parts.append(_MAP.pack(m.group, m.origin, len(prefix)) + prefix)
        body = b"".join(parts)
    else:
        raise TypeError(f"not a protocol packet: {packet!r}")

    _check(packet.group, U32_MAX, "group")
    if len(body) > U16_MAX:
        raise FieldOverflow(f"body is {len(body)} bytes, max {U16_MAX}")
    return HEADER.pack(MAGIC, VERSION, kind, packet.group, len(body)) + body


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, fmt: struct.Struct) -> tuple:
        end = self.pos + fmt.size
        if end > len(self.buf):
            raise Truncated(f"need {fmt.size} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = fmt.unpack_from(self.buf, self.pos)
        self.pos = end
        return out

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = bytes(self.buf[self.pos:end])
        self.pos = end
        return out

    def ids(self, count: int) -> tuple[int, ...]:
        return tuple(self.take(_ID)[0] for _ in range(count))

    def rest(self) -> bytes:
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise Malformed(f"{len(self.buf) - self.pos} trailing bytes")


def decode(data: bytes) -> Packet:
    """Parse one packet. Never raises anything but a DecodeError subclass."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, have {len(data)}")
    magic, version, kind, group, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if kind not in (KIND_CORE_ANNOUNCEMENT, KIND_MESH_MEMBERSHIP, KIND_PUBLICATION, KIND_MAPPING_ADVERT):
        raise UnknownKind(f"unknown kind {kind}")
    body = data[HEADER_SIZE:]
    if len(body) < length:
        raise Truncated(f"body declares {length} bytes, have {len(body)}")
    if len(body) > length:
        raise Malformed(f"body declares {length} bytes, have {len(body)}")
    r = _Reader(body)

    if kind == KIND_CORE_ANNOUNCEMENT:
        core, seq, distance, flag, count, _reserved = r.take(_ANN)
        parents = r.ids(count)
        r.done()
        return CoreAnnouncement(group, core, seq, distance, flag != 0, parents)
    if kind == KIND_MESH_MEMBERSHIP:
        core, seq, sender, count = r.take(_MMA)
        parents = r.ids(count)
        r.done()
        return MeshMembershipAnnouncement(group, core, seq, sender, parents)
    if kind == KIND_PUBLICATION:
        origin, counter, origin_broker, topic_len = r.take(_PUB)
        topic = r.raw(topic_len)
        payload = r.rest()
        return Publication(group, topic, (origin, counter), payload, origin_broker)

    origin, counter, count = r.take(_ADV)
    mappings = []
    for _ in range(count):
        m_group, m_origin, prefix_len = r.take(_MAP)
        mappings.append(TopicMapping(m_group, r.raw(prefix_len), m_origin))
    r.done()
    return MappingAdvert((origin, counter), tuple(mappings), group)
