"""QoS-0 publish/subscribe broker over TCP with broker-to-broker bridging.

One asyncio task per connection plus a synchronous routing core. The publish
path never blocks on any subscriber socket: every session owns a bounded
outbound queue (drop-oldest on overflow) drained by its own writer task.
Bridges connect out to a remote broker and republish in, out, or both
directions; loop prevention is by ingress-link exclusion, so a message is
never echoed back over the link it arrived on.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import wire
from .mqtt_client import MqttClient, MqttError

log = logging.getLogger(__name__)

CONNECT_TIMEOUT_S = 10.0
BRIDGE_BACKOFF_BASE_S = 0.5
BRIDGE_BACKOFF_CAP_S = 30.0

# (came_over_bridge, topic, payload, epoch_ms) on every routed publish.
PublishObserver = Callable[[bool, str, bytes, int], None]


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class BridgeRule:
    remote: str  # "host:port"
    direction: str  # "in" | "out" | "both"
    filter: str = "#"
    local_prefix: str | None = None

    def __post_init__(self):
        if self.direction not in ("in", "out", "both"):
            raise ValueError(f"bad bridge direction {self.direction!r}")
        wire.validate_filter(self.filter)
        if self.local_prefix:
            wire.validate_topic(self.local_prefix)

    @property
    def remote_host(self) -> str:
        host, _, port = self.remote.rpartition(":")
        if not host:
            raise ValueError(f"remote must be host:port, got {self.remote!r}")
        return host

    @property
    def remote_port(self) -> int:
        return int(self.remote.rpartition(":")[2])


@dataclass
class BrokerStats:
    msgs_in: int = 0
    msgs_out: int = 0
    drops: int = 0
    live_sessions: int = 0

    def snapshot(self) -> dict:
        return dict(self.__dict__)


class _Subscriber:
    """Anything the routing core can deliver to: client session or bridge-out."""

    def __init__(self, link_id: int):
        self.link_id = link_id
        # raw filter string -> pre-split levels (dict dedups by filter string)
        self.filters: dict[str, tuple[str, ...]] = {}

    def matches(self, topic_levels: tuple[str, ...]) -> bool:
        return any(wire.topic_matches(f, topic_levels) for f in self.filters.values())

    def deliver(self, topic: str, payload: bytes, retain: bool) -> None:
        raise NotImplementedError


class ClientSession(_Subscriber):
    def __init__(self, link_id: int, client_id: str, writer: asyncio.StreamWriter,
                 keep_alive_s: int, max_queue: int, stats: BrokerStats):
        super().__init__(link_id)
        self.client_id = client_id
        self.writer = writer
        self.keep_alive_s = keep_alive_s
        self.last_seen = time.monotonic()
        self._queue: deque[bytes] = deque()
        self._max_queue = max_queue
        self._stats = stats
        self._wake = asyncio.Event()
        self._closing = False
        self.drops = 0
        self.writer_task: asyncio.Task | None = None

    def deliver(self, topic: str, payload: bytes, retain: bool) -> None:
        frame = wire.encode_packet(wire.Publish(topic, payload, retain))
        if len(self._queue) >= self._max_queue:
            self._queue.popleft()
            self.drops += 1
            self._stats.drops += 1
        self._queue.append(frame)
        self._wake.set()

    async def run_writer(self) -> None:
        try:
            while not self._closing:
                while not self._queue:
                    self._wake.clear()
                    if self._closing:
                        return
                    await self._wake.wait()
                frame = self._queue.popleft()
                self.writer.write(frame)
                await self.writer.drain()
                self._stats.msgs_out += 1
        except (ConnectionError, OSError):
            pass

    def close(self) -> None:
        self._closing = True
        self._wake.set()
        try:
            self.writer.close()
        except Exception:
            pass


class Broker:
    def __init__(self, name: str = "broker", max_session_queue: int = 1024,
                 publish_observer: PublishObserver | None = None):
        self.name = name
        self.stats = BrokerStats()
        self._max_session_queue = max_session_queue
        self._observer = publish_observer
        self._link_ids = itertools.count(1)
        self._subscribers: dict[int, _Subscriber] = {}
        self._by_client_id: dict[str, ClientSession] = {}
        self._server: asyncio.AbstractServer | None = None
        self._bridges: list[Bridge] = []
        self._tasks: list[asyncio.Task] = []
        self._anon = itertools.count(1)

    # --- lifecycle ----------------------------------------------------------

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle_conn, host, port)
        sock = self._server.sockets[0]
        self.address = sock.getsockname()[:2]
        self._tasks.append(asyncio.create_task(self._keepalive_watchdog()))
        for bridge in self._bridges:
            bridge.start()
        log.info("broker %s listening on %s:%d", self.name, *self.address)
        return self.address

    async def stop(self) -> None:
        for bridge in self._bridges:
            await bridge.stop()
        for task in self._tasks:
            task.cancel()
        for sub in list(self._subscribers.values()):
            if isinstance(sub, ClientSession):
                self._drop_session(sub)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    def add_bridge(self, rule: BridgeRule) -> "Bridge":
        bridge = Bridge(self, rule)
        self._bridges.append(bridge)
        if self._server is not None:
            bridge.start()
        return bridge

    # --- routing core --------------------------------------------------------

    def route_publish(self, origin_link: int, topic: str, payload: bytes,
                      retain: bool = False, from_bridge: bool = False) -> int:
        """Deliver to every subscriber with a matching filter, at most once
        each, never back over the origin link. Returns sessions targeted."""
        self.stats.msgs_in += 1
        if self._observer is not None:
            self._observer(from_bridge, topic, payload, _now_ms())
        topic_levels = tuple(topic.split("/"))
        count = 0
        for sub in list(self._subscribers.values()):
            if sub.link_id == origin_link:
                continue
            if sub.matches(topic_levels):
                sub.deliver(topic, payload, retain)
                count += 1
        return count

    def handle_subscribe(self, sub: _Subscriber, packet: wire.Subscribe) -> wire.Suback:
        granted = []
        for raw in packet.filters:
            try:
                levels = wire.validate_filter(raw)
            except wire.InvalidFilter:
                granted.append(0x80)
                continue
            sub.filters[raw] = levels
            granted.append(0x00)
        return wire.Suback(packet_id=packet.packet_id, granted=tuple(granted))

    def register_subscriber(self, sub: _Subscriber) -> None:
        self._subscribers[sub.link_id] = sub

    def unregister_subscriber(self, sub: _Subscriber) -> None:
        self._subscribers.pop(sub.link_id, None)

    def new_link_id(self) -> int:
        return next(self._link_ids)

    @property
    def live_sessions(self) -> int:
        return len(self._by_client_id)

    def pending_frames(self) -> int:
        """Frames queued towards subscribers but not yet written."""
        return sum(len(s._queue) for s in self._subscribers.values()
                   if isinstance(s, ClientSession))

    # --- connection handling --------------------------------------------------

    async def _handle_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        session: ClientSession | None = None
        buf = bytearray()
        try:
            connect, buf = await asyncio.wait_for(
                self._read_first_packet(reader, buf), CONNECT_TIMEOUT_S)
            if not isinstance(connect, wire.Connect):
                raise wire.MalformedPacket(f"first packet must be CONNECT, got {type(connect).__name__}")
            client_id = connect.client_id or f"anon-{next(self._anon)}"
            session = ClientSession(
                self.new_link_id(), client_id, writer,
                keep_alive_s=connect.keep_alive_s,
                max_queue=self._max_session_queue, stats=self.stats)
            old = self._by_client_id.get(client_id)
            if old is not None:
                log.info("broker %s: session %s superseded", self.name, client_id)
                self._drop_session(old)
            self._by_client_id[client_id] = session
            self.register_subscriber(session)
            self.stats.live_sessions = self.live_sessions
            writer.write(wire.encode_packet(wire.Connack(return_code=0)))
            await writer.drain()
            session.writer_task = asyncio.create_task(session.run_writer())
            await self._session_loop(reader, session, buf)
        except (asyncio.TimeoutError, ConnectionError, OSError, asyncio.IncompleteReadError):
            pass
        except wire.MalformedPacket as exc:
            log.warning("broker %s: protocol violation from %s: %s", self.name, peer, exc)
        finally:
            if session is not None:
                if self._by_client_id.get(session.client_id) is session:
                    del self._by_client_id[session.client_id]
                self.unregister_subscriber(session)
                self.stats.live_sessions = self.live_sessions
                session.close()
            else:
                try:
                    writer.close()
                except Exception:
                    pass

    async def _read_first_packet(self, reader, buf: bytearray):
        while True:
            result = wire.decode_packet(buf)
            if result is not None:
                pkt, consumed = result
                del buf[:consumed]
                return pkt, buf
            chunk = await reader.read(4096)
            if not chunk:
                raise ConnectionError("EOF before CONNECT")
            buf += chunk

    async def _session_loop(self, reader, session: ClientSession, buf: bytearray) -> None:
        while True:
            result = wire.decode_packet(buf)
            if result is None:
                chunk = await reader.read(4096)
                if not chunk:
                    return
                buf += chunk
                continue
            pkt, consumed = result
            del buf[:consumed]
            session.last_seen = time.monotonic()
            if isinstance(pkt, wire.Publish):
                self.route_publish(session.link_id, pkt.topic, pkt.payload, pkt.retain)
            elif isinstance(pkt, wire.Subscribe):
                suback = self.handle_subscribe(session, pkt)
                session.writer.write(wire.encode_packet(suback))
                await session.writer.drain()
            elif isinstance(pkt, wire.Unsubscribe):
                for raw in pkt.filters:
                    session.filters.pop(raw, None)
                session.writer.write(wire.encode_packet(wire.Unsuback(pkt.packet_id)))
                await session.writer.drain()
            elif isinstance(pkt, wire.Pingreq):
                session.writer.write(wire.encode_packet(wire.Pingresp()))
                await session.writer.drain()
            elif isinstance(pkt, wire.Disconnect):
                return
            elif isinstance(pkt, wire.Connect):
                raise wire.MalformedPacket("duplicate CONNECT")
            # Connack/Suback/Unsuback/Pingresp from a client are ignored.

    def _drop_session(self, session: ClientSession) -> None:
        if self._by_client_id.get(session.client_id) is session:
            del self._by_client_id[session.client_id]
        self.unregister_subscriber(session)
        self.stats.live_sessions = self.live_sessions
        session.close()

    async def _keepalive_watchdog(self) -> None:
        while True:
            await asyncio.sleep(0.5)
            now = time.monotonic()
            for session in list(self._by_client_id.values()):
                if session.keep_alive_s > 0 and now - session.last_seen > 1.5 * session.keep_alive_s:
                    log.info("broker %s: keep-alive expired for %s", self.name, session.client_id)
                    self._drop_session(session)


class _BridgeOutSubscriber(_Subscriber):
    """Pseudo-session forwarding matching local publishes to the remote end."""

    def __init__(self, link_id: int, max_queue: int, stats: BrokerStats):
        super().__init__(link_id)
        self._queue: deque[tuple[str, bytes, bool]] = deque()
        self._max_queue = max_queue
        self._stats = stats
        self._wake = asyncio.Event()
        self.drops = 0

    def deliver(self, topic: str, payload: bytes, retain: bool) -> None:
        if len(self._queue) >= self._max_queue:
            self._queue.popleft()
            self.drops += 1
            self._stats.drops += 1
        self._queue.append((topic, payload, retain))
        self._wake.set()

    async def next(self) -> tuple[str, bytes, bool]:
        while not self._queue:
            self._wake.clear()
            await self._wake.wait()
        return self._queue.popleft()


class Bridge:
    """Maintains one client connection to the remote broker.

    Because both its in-subscription and out-forwarding share that single
    connection (one link id locally, one session remotely), ingress-link
    exclusion on either side prevents echo loops.
    """

    def __init__(self, broker: Broker, rule: BridgeRule):
        self.broker = broker
        self.rule = rule
        self.link_id = broker.new_link_id()
        self.connected = asyncio.Event()
        self._out_sub: _BridgeOutSubscriber | None = None
        self._task: asyncio.Task | None = None
        self._forward_task: asyncio.Task | None = None
        self._client: MqttClient | None = None
        self._stopping = False
        if rule.direction in ("out", "both"):
            self._out_sub = _BridgeOutSubscriber(
                self.link_id, broker._max_session_queue, broker.stats)
            self._out_sub.filters[rule.filter] = wire.validate_filter(rule.filter)
            broker.register_subscriber(self._out_sub)

    def start(self) -> None:
        if self._task is None:
            self._task = asyncio.create_task(self._run())

    async def stop(self) -> None:
        self._stopping = True
        for task in (self._task, self._forward_task):
            if task is not None:
                task.cancel()
        if self._out_sub is not None:
            self.broker.unregister_subscriber(self._out_sub)
        if self._client is not None:
            await self._client.close()
        if self._task is not None:
            await asyncio.gather(self._task, return_exceptions=True)

    async def _run(self) -> None:
        attempt = 0
        while not self._stopping:
            try:
                client = await MqttClient.connect(
                    self.rule.remote_host, self.rule.remote_port,
                    client_id=f"bridge-{self.broker.name}-{self.link_id}",
                    keep_alive_s=30, on_message=self._on_remote_message)
            except (MqttError, ConnectionError, OSError, asyncio.TimeoutError):
                delay = min(BRIDGE_BACKOFF_BASE_S * (2 ** attempt), BRIDGE_BACKOFF_CAP_S)
                attempt += 1
                log.info("bridge %s->%s: connect failed, retry in %.1fs",
                         self.broker.name, self.rule.remote, delay)
                await asyncio.sleep(delay)
                continue
            attempt = 0
            self._client = client
            try:
                if self.rule.direction in ("in", "both"):
                    await client.subscribe([self.rule.filter])
                if self._out_sub is not None:
                    self._forward_task = asyncio.create_task(self._forward_out(client))
                self.connected.set()
                await client.wait_closed()
            except (MqttError, ConnectionError, OSError, asyncio.TimeoutError):
                pass
            finally:
                self.connected.clear()
                if self._forward_task is not None:
                    self._forward_task.cancel()
                    await asyncio.gather(self._forward_task, return_exceptions=True)
                    self._forward_task = None
                await client.close()
                self._client = None
            if not self._stopping:
                await asyncio.sleep(BRIDGE_BACKOFF_BASE_S)

    def _on_remote_message(self, topic: str, payload: bytes, retain: bool) -> None:
        local_topic = f"{self.rule.local_prefix}/{topic}" if self.rule.local_prefix else topic
        self.broker.route_publish(self.link_id, local_topic, payload, retain, from_bridge=True)

    async def _forward_out(self, client: MqttClient) -> None:
        assert self._out_sub is not None
        try:
            while True:
                topic, payload, retain = await self._out_sub.next()
                await client.publish(topic, payload, retain)
        except (MqttError, ConnectionError, OSError):
            pass


@dataclass
class BrokerConfig:
    listen: str = "127.0.0.1:1883"
    bridges: list[BridgeRule] = field(default_factory=list)

    @classmethod
    def from_json(cls, text: str) -> "BrokerConfig":
        raw = json.loads(text)
        bridges = [
            BridgeRule(
                remote=b["remote"],
                direction=b.get("direction", "in"),
                filter=b.get("filter", "#"),
                local_prefix=b.get("local_prefix"),
            )
            for b in raw.get("bridges", [])
        ]
        return cls(listen=raw.get("listen", "127.0.0.1:1883"), bridges=bridges)

    @property
    def listen_host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def listen_port(self) -> int:
        return int(self.listen.rpartition(":")[2])
