"""Networked federation broker.

One asyncio event loop owns the :class:`~brokerfed.core.Broker`. Neighbor
brokers talk the binary wire format over UDP, one packet per datagram.
Clients talk a line protocol over TCP::

    SUB <topic>                  -> OK, then MSG <topic> <base64> lines
    UNSUB <topic>                -> OK
    PUB <topic> <base64-payload> -> OK
    MAP <group-id> <prefix>      -> OK
    STATUS [group-id]            -> STATUS key=value ... lines, then OK

Failures are answered ``ERR <code> <detail>``.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import logging
import os
import random
import signal
import socket
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .core import (
    Broker,
    Config,
    ConflictRejected,
    Deliver,
    FederationError,
    Notice,
    Send,
    UnknownGroup,
    UnmappedTopic,
)
from .packets import TopicMapping

log = logging.getLogger("brokerfed.daemon")

Address = tuple[str, int]


class ConfigError(ValueError):
    pass


class BindFailure(OSError):
    pass


def parse_address(text: str) -> Address:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


@dataclass
class NodeConfig:
    self_id: int
    listen_udp: Address
    listen_tcp: Address
    neighbors: dict[int, Address] = field(default_factory=dict)
    redundancy: int = 2
    announce_period: float = 3.0
    expiry_rounds: int = 3
    management_core: int | None = None
    mappings: tuple[TopicMapping, ...] = ()
    auto_map: bool = False
    jitter: float = 0.0

    @classmethod
    def from_dict(cls, doc: dict) -> "NodeConfig":
        try:
            self_id = int(doc["self_id"])
            neighbors: dict[int, Address] = {}
            for item in doc.get("neighbors", []):
                nid = int(item["id"])
                if nid in neighbors:
                    raise ConfigError(f"neighbor {nid} listed twice")
                neighbors[nid] = parse_address(item["address"])
            if self_id in neighbors:
                raise ConfigError("self_id appears among neighbors")
            mappings = tuple(
                TopicMapping(int(m["group"]), str(m["prefix"]).encode(), int(m.get("origin", self_id)))
                for m in doc.get("mappings", [])
            )
            cfg = cls(
                self_id=self_id,
                listen_udp=parse_address(doc["listen_udp"]),
                listen_tcp=parse_address(doc["listen_tcp"]),
                neighbors=neighbors,
                redundancy=int(doc.get("redundancy", 2)),
                announce_period=float(doc.get("announce_period", 3.0)),
                expiry_rounds=int(doc.get("expiry_rounds", 3)),
                management_core=doc.get("management_core"),
                mappings=mappings,
                auto_map=bool(doc.get("auto_map", False)),
                jitter=float(doc.get("jitter", 0.0)),
            )
            cfg.core_config()
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid node config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def core_config(self) -> Config:
        return Config(
            self_id=self.self_id,
            neighbors=frozenset(self.neighbors),
            redundancy=self.redundancy,
            announce_period=self.announce_period,
            expiry_rounds=self.expiry_rounds,
            management_core=self.management_core,
        )


def auto_mapping(topic: bytes, origin: int) -> TopicMapping:
    """Map a topic's first path segment to a group id derived from its hash."""
    head, sep, _ = topic.partition(b"/")
    prefix = head + sep if sep else topic
    return TopicMapping((zlib.crc32(prefix) & 0x7FFFFFFF) or 1, prefix, origin)


def format_status(st: dict) -> str:
    return (f"STATUS group={st['group']} core={st['core']} role={st['role']} "
            f"distance={'' if st['distance'] is None else st['distance']} "
            f"parents={','.join(map(str, st['parents']))} "
            f"children={','.join(map(str, st['children']))} "
            f"seq={st['seq']} subscribers={st['subscribers']}")


def parse_status(line: str) -> dict:
    """Inverse of :func:`format_status` for the fields clients care about."""
    fields = dict(tok.split("=", 1) for tok in line.split()[1:])

    def ids(text: str) -> tuple[int, ...]:
        return tuple(int(x) for x in text.split(",") if x)

    return {
        "group": int(fields["group"]),
        "core": int(fields["core"]),
        "role": fields["role"],
        "distance": int(fields["distance"]) if fields["distance"] else None,
        "parents": ids(fields["parents"]),
        "children": ids(fields["children"]),
        "seq": int(fields["seq"]),
        "subscribers": int(fields["subscribers"]),
    }


class _Datagrams(asyncio.DatagramProtocol):
    def __init__(self, daemon: "BrokerDaemon") -> None:
        self.daemon = daemon

    def datagram_received(self, data: bytes, addr) -> None:
        self.daemon.on_datagram(data, addr)

    def error_received(self, exc: Exception) -> None:
        # ICMP unreachable from a neighbor that is down
        self.daemon.stats["udp_error"] += 1
        log.debug("udp error: %s", exc)


class BrokerDaemon:
    def __init__(self, config: NodeConfig) -> None:
        self.config = config
        self.broker = Broker(config.core_config(), config.mappings)
        self.stats: Counter[str] = Counter()
        self.sessions: dict[int, asyncio.StreamWriter] = {}
        self._next_client = 0
        self._addr_to_id: dict[Address, int] = {}
        self._id_to_addr: dict[int, Address] = {}
        for nid, (host, port) in config.neighbors.items():
            ip = socket.gethostbyname(host)
            self._addr_to_id[(ip, port)] = nid
            self._id_to_addr[nid] = (ip, port)
        self.transport: asyncio.DatagramTransport | None = None
        self.server: asyncio.AbstractServer | None = None
        self._ticker: asyncio.Task | None = None
        self._loop: asyncio.AbstractEventLoop | None = None

    def now(self) -> float:
        return self._loop.time()

    async def start(self) -> None:
        self._loop = asyncio.get_running_loop()
        try:
            self.transport, _ = await self._loop.create_datagram_endpoint(
                lambda: _Datagrams(self), local_addr=self.config.listen_udp)
            self.server = await asyncio.start_server(self._serve_client, *self.config.listen_tcp)
        except OSError as exc:
            if self.transport is not None:
                self.transport.close()
            raise BindFailure(exc.errno, f"cannot bind: {exc}") from exc
        log.info("broker %d up: udp %s:%d tcp %s:%d", self.config.self_id,
                 *self.config.listen_udp, *self.config.listen_tcp)
        self.apply(self.broker.start(self.now()))
        self._ticker = asyncio.create_task(self._tick_loop())

    async def close(self) -> None:
        if self._ticker:
            self._ticker.cancel()
        if self.server:
            self.server.close()
            await self.server.wait_closed()
        for writer in list(self.sessions.values()):
            writer.close()
        if self.transport:
            self.transport.close()

    async def _tick_loop(self) -> None:
        period = self.config.announce_period
        jitter = self.config.jitter
        while True:
            await asyncio.sleep(period + (random.uniform(-jitter, jitter) if jitter else 0.0))
            self.apply(self.broker.handle_tick(self.now()))

    # -- protocol plumbing -------------------------------------------------

    def apply(self, actions) -> None:
        for act in actions:
            if isinstance(act, Send):
                addr = self._id_to_addr.get(act.to)
                if addr is None or self.transport is None:
                    self.stats["no_address"] += 1
                    continue
                self.transport.sendto(wire.encode(act.packet), addr)
                self.stats["udp_out"] += 1
            elif isinstance(act, Deliver):
                writer = self.sessions.get(act.client)
                if writer is None or writer.is_closing():
                    continue
                line = f"MSG {act.topic.decode('utf-8', 'replace')} {base64.b64encode(act.payload).decode()}\n"
                writer.write(line.encode())
            elif isinstance(act, Notice):
                log.info("broker %d group %d: %s %s", self.config.self_id, act.group, act.kind,
                         "" if act.value is None else act.value)

    def on_datagram(self, data: bytes, addr) -> None:
        sender = self._addr_to_id.get((addr[0], addr[1]))
        if sender is None:
            self.stats["unknown_sender"] += 1
            return
        try:
            packet = wire.decode(data)
        except wire.DecodeError as exc:
            self.stats[f"decode_{type(exc).__name__}"] += 1
            return
        self.stats["udp_in"] += 1
        self.apply(self.broker.handle_packet(packet, sender, self.now()))

    # -- client protocol ---------------------------------------------------

    def handle_command(self, client: int, line: str) -> list[str]:
        """Run one client command; returns the response lines."""
        parts = line.strip().split()
        if not parts:
            return ["ERR BAD_COMMAND empty line"]
        cmd, args = parts[0].upper(), parts[1:]
        b = self.broker
        try:
            if cmd == "SUB" and len(args) == 1:
                topic = args[0].encode()
                try:
                    self.apply(b.handle_subscribe(topic, client, self.now()))
                except UnmappedTopic:
                    if not self.config.auto_map:
                        raise
                    self.apply(b.advertise_mapping(auto_mapping(topic, self.config.self_id)))
                    self.apply(b.handle_subscribe(topic, client, self.now()))
            elif cmd == "UNSUB" and len(args) == 1:
                self.apply(b.handle_unsubscribe(args[0].encode(), client))
            elif cmd == "PUB" and len(args) in (1, 2):
                try:
                    payload = base64.b64decode(args[1] if len(args) == 2 else "", validate=True)
                except (binascii.Error, ValueError):
                    return ["ERR BAD_COMMAND payload is not base64"]
                self.apply(b.handle_publish(args[0].encode(), payload, client, self.now()))
            elif cmd == "MAP" and len(args) == 2:
                try:
                    mapping = TopicMapping(int(args[0]), args[1].encode(), self.config.self_id)
                    self.apply(b.advertise_mapping(mapping))
                except ValueError as exc:
                    return [f"ERR BAD_COMMAND {exc}"]
            elif cmd == "STATUS" and len(args) <= 1:
                if args:
                    try:
                        groups = [int(args[0])]
                    except ValueError:
                        return ["ERR BAD_COMMAND group must be an integer"]
                else:
                    groups = b.known_groups()
                return [format_status(b.status(g)) for g in groups] + ["OK"]
            else:
                return [f"ERR BAD_COMMAND {line.strip()[:80]}"]
        except ConflictRejected as exc:
            return [f"ERR CONFLICT {exc}"]
        except UnknownGroup as exc:
            return [f"ERR UNKNOWN_GROUP {exc}"]
        except FederationError as exc:
            return [f"ERR {exc.code} {exc}"]
        return ["OK"]

    async def _serve_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._next_client += 1
        client = self._next_client
        self.sessions[client] = writer
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError:
                    writer.write(b"ERR BAD_COMMAND not utf-8\n")
                    continue
                for out in self.handle_command(client, line):
                    writer.write(out.encode() + b"\n")
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.sessions.pop(client, None)
            self.apply(self.broker.drop_client(client))
            writer.close()


async def serve(config: NodeConfig, stop: asyncio.Event | None = None) -> None:
    daemon = BrokerDaemon(config)
    await daemon.start()
    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        await stop.wait()
    finally:
        await daemon.close()


def config_path(arg: str | None) -> str:
    path = arg or os.environ.get("FEDBROKER_CONFIG")
    if not path:
        raise ConfigError("no config given: pass --config or set FEDBROKER_CONFIG")
    return path


async def query_status(host: str, port: int, group: int | None = None, timeout: float = 5.0) -> list[str]:
    """Send STATUS to a broker and return its STATUS lines; raises RuntimeError on ERR."""
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(b"STATUS" + (f" {group}".encode() if group is not None else b"") + b"\n")
        await writer.drain()
        lines = []
        while True:
            raw = await asyncio.wait_for(reader.readline(), timeout)
            if not raw:
                raise RuntimeError("connection closed before OK")
            text = raw.decode().rstrip("\n")
            if text == "OK":
                return lines
            if text.startswith("ERR"):
                raise RuntimeError(text)
            if text.startswith("STATUS"):
                lines.append(text)
    finally:
        writer.close()
