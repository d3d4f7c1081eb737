"""The stock verticles: ingestion, storage, analysis and routing."""

from __future__ import annotations

import asyncio
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO

from ..decoders import (
    DeadLetter,
    DecoderRegistry,
    NormalizedMessage,
    RawSensorMessage,
    default_registry,
)
from ..mqtt_client import MqttClient, MqttError
from .bus import DerivedEvent, SubscriptionPolicy, now_ms
from .coffee import CoffeeConfig, CoffeeState, DEFAULT_CONFIG, coffee_step
from .server import Verticle

log = logging.getLogger(__name__)

RECONNECT_BASE_S = 0.5
RECONNECT_CAP_S = 30.0


def _sanitize_level(part: str) -> str:
    """Device ids become one address level; wildcards/separators are unsafe."""
    return part.replace("/", "_").replace("+", "_").replace("#", "_") or "_"


async def _backoff_connect(host: str, port: int, client_id: str, on_message=None) -> MqttClient:
    attempt = 0
    while True:
        try:
            return await MqttClient.connect(host, port, client_id=client_id,
                                            keep_alive_s=30, on_message=on_message)
        except (MqttError, ConnectionError, OSError, asyncio.TimeoutError):
            delay = min(RECONNECT_BASE_S * (2 ** attempt), RECONNECT_CAP_S)
            attempt += 1
            await asyncio.sleep(delay)


class FeedHandler(Verticle):
    """Broker -> bus: decode every arriving message and republish it."""

    name = "feedhandler"

    def __init__(self, broker_host: str, broker_port: int,
                 subscribe_filters: tuple[str, ...] = ("#",),
                 registry: DecoderRegistry | None = None):
        super().__init__()
        self.host = broker_host
        self.port = broker_port
        self.filters = list(subscribe_filters)
        self.registry = registry or default_registry()
        self.received = 0
        self.published = 0
        self.deadlettered = 0
        self._client: MqttClient | None = None

    def pending(self) -> int:
        client = self._client
        return client.inbound_pending() if client is not None else 0

    async def start(self, bus) -> None:
        await super().start(bus)
        self.spawn(self._run())

    async def stop(self) -> None:
        await super().stop()
        if self._client is not None:
            await self._client.close()

    async def _run(self) -> None:
        while True:
            client = await _backoff_connect(self.host, self.port,
                                            client_id=f"rts-{self.name}")
            self._client = client
            try:
                await client.subscribe(self.filters)
                while True:
                    topic, payload, _retain = await client.next_message()
                    self.received += 1
                    raw = RawSensorMessage(topic=topic, payload=payload, received_at=now_ms())
                    result = self.registry.normalize_or_deadletter(raw)
                    if isinstance(result, NormalizedMessage):
                        address = f"feed/{result.family}/{_sanitize_level(result.device_id)}"
                        self.bus.publish(address, result, publisher=self.name)
                        self.published += 1
                    else:
                        self.bus.publish("feed/deadletter", result, publisher=self.name)
                        self.deadlettered += 1
            except (MqttError, ConnectionError, OSError, asyncio.TimeoutError):
                log.info("%s: broker connection lost, reconnecting", self.name)
            finally:
                await client.close()
                self._client = None


class MessageFiler(Verticle):
    """Bus -> disk: one JSON line per message, plus a latest.json snapshot.

    Layout: <data_root>/<device_id>/<YYYY>/<MM>/<DD>.jsonl with the UTC date
    taken from the reading timestamp.
    """

    name = "messagefiler"

    def __init__(self, data_root: str | Path, subscribe_filter: str = "feed/#"):
        super().__init__()
        self.data_root = Path(data_root)
        self.filter = subscribe_filter
        self.lines_written = 0
        self.errors = 0
        self._handles: dict[Path, IO[str]] = {}
        self._latest_ts: dict[str, int] = {}

    async def start(self, bus) -> None:
        await super().start(bus)
        self.data_root.mkdir(parents=True, exist_ok=True)
        sub = self.subscribe(self.filter, SubscriptionPolicy(queue_capacity=8192))
        self.spawn(self._run(sub))

    async def stop(self) -> None:
        await super().stop()
        for handle in self._handles.values():
            try:
                handle.close()
            except OSError:
                pass
        self._handles.clear()

    async def _run(self, sub) -> None:
        while True:
            env = await sub.get()
            if not isinstance(env.body, NormalizedMessage):
                continue
            try:
                self._file(env.body)
            except OSError as exc:
                self.errors += 1
                self.bus.publish("sys/filer/error", DerivedEvent(
                    event_type="filer-error", device_id=env.body.device_id,
                    ts=now_ms(), attributes={"reason": str(exc)},
                    source_verticle=self.name), publisher=self.name)

    def day_path(self, device_id: str, ts: int) -> Path:
        day = datetime.fromtimestamp(ts / 1000.0, tz=timezone.utc)
        return (self.data_root / _sanitize_level(device_id)
                / f"{day.year:04d}" / f"{day.month:02d}" / f"{day.day:02d}.jsonl")

    def _file(self, msg: NormalizedMessage) -> None:
        path = self.day_path(msg.device_id, msg.ts)
        handle = self._handles.get(path)
        if handle is None:
            path.parent.mkdir(parents=True, exist_ok=True)
            handle = path.open("a", encoding="utf-8")
            self._handles[path] = handle
        handle.write(msg.to_json() + "\n")
        handle.flush()
        self.lines_written += 1
        self._write_latest(msg)

    def _write_latest(self, msg: NormalizedMessage) -> None:
        device_dir = self.data_root / _sanitize_level(msg.device_id)
        known = self._latest_ts.get(msg.device_id)
        if known is None:
            latest_path = device_dir / "latest.json"
            if latest_path.exists():
                try:
                    known = int(json.loads(latest_path.read_text())["ts"])
                except (ValueError, KeyError, OSError):
                    known = None
        if known is not None and msg.ts < known:
            return
        self._latest_ts[msg.device_id] = msg.ts
        tmp = device_dir / "latest.json.tmp"
        tmp.write_text(msg.to_json(), encoding="utf-8")
        os.replace(tmp, device_dir / "latest.json")


@dataclass
class ThresholdRule:
    filter: str
    field: str
    op: str  # ">" or "<"
    value: float
    hysteresis: float = 0.0

    def __post_init__(self):
        if self.op not in (">", "<"):
            raise ValueError(f"op must be > or <, got {self.op!r}")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be >= 0")

    @classmethod
    def from_jsonable(cls, raw: dict) -> "ThresholdRule":
        return cls(filter=raw["filter"], field=raw["field"], op=raw["op"],
                   value=float(raw["value"]), hysteresis=float(raw.get("hysteresis", 0.0)))

    def crossed(self, v: float) -> bool:
        return v > self.value if self.op == ">" else v < self.value

    def cleared(self, v: float) -> bool:
        if self.op == ">":
            return v <= self.value - self.hysteresis
        return v >= self.value + self.hysteresis


class ThresholdWatch(Verticle):
    """Edge-triggered threshold events with hysteresis on clearing."""

    name = "thresholdwatch"

    def __init__(self, rules: list[ThresholdRule]):
        super().__init__()
        self.rules = rules
        self.missing_field = 0
        self._active: dict[tuple[int, str], bool] = {}

    async def start(self, bus) -> None:
        await super().start(bus)
        for index, rule in enumerate(self.rules):
            sub = self.subscribe(rule.filter)
            self.spawn(self._watch(index, rule, sub))

    async def _watch(self, index: int, rule: ThresholdRule, sub) -> None:
        while True:
            env = await sub.get()
            body = env.body
            if not isinstance(body, NormalizedMessage):
                continue
            if rule.field not in body.cooked:
                self.missing_field += 1
                continue
            try:
                value = float(body.cooked[rule.field])
            except (TypeError, ValueError):
                self.missing_field += 1
                continue
            key = (index, body.device_id)
            active = self._active.get(key, False)
            if not active and rule.crossed(value):
                self._active[key] = True
                self._emit("threshold-crossed", rule, body, value)
            elif active and rule.cleared(value):
                self._active[key] = False
                self._emit("threshold-cleared", rule, body, value)

    def _emit(self, event_type: str, rule: ThresholdRule, msg: NormalizedMessage, value: float):
        self.bus.publish(
            f"event/threshold/{_sanitize_level(msg.device_id)}",
            DerivedEvent(event_type=event_type, device_id=msg.device_id, ts=msg.ts,
                         attributes={"field": rule.field, "value": value,
                                     "op": rule.op, "threshold": rule.value},
                         source_verticle=self.name),
            publisher=self.name)


class RTCoffee(Verticle):
    """Per-device coffee detector driving the pure step function."""

    name = "rtcoffee"

    def __init__(self, config: CoffeeConfig = DEFAULT_CONFIG):
        super().__init__()
        self.config = config
        self._states: dict[str, CoffeeState] = {}
        self.events_emitted = 0

    async def start(self, bus) -> None:
        await super().start(bus)
        sub = self.subscribe("feed/coffee/#")
        self.spawn(self._run(sub))

    async def _run(self, sub) -> None:
        while True:
            env = await sub.get()
            msg = env.body
            if not isinstance(msg, NormalizedMessage):
                continue
            state = self._states.get(msg.device_id, CoffeeState())
            state, events = coffee_step(state, msg, self.config, source=self.name)
            self._states[msg.device_id] = state
            for event in events:
                self.bus.publish(
                    f"event/coffee/{_sanitize_level(msg.device_id)}",
                    event, publisher=self.name)
                self.events_emitted += 1


@dataclass
class RouteRule:
    filter: str
    remote: str  # "host:port"
    topic_template: str = "normalized/{address}"

    @classmethod
    def from_jsonable(cls, raw: dict) -> "RouteRule":
        return cls(filter=raw["filter"], remote=raw["remote"],
                   topic_template=raw.get("topic_template", "normalized/{address}"))


class MessageRouter(Verticle):
    """Bus -> remote broker: share matching envelopes with a peer system.

    Envelopes buffer in the subscription queue (10k, drop-oldest) while the
    remote is unreachable and flush in order once it returns.
    """

    name = "messagerouter"

    def __init__(self, routes: list[RouteRule]):
        super().__init__()
        self.routes = routes
        self.forwarded = 0

    async def start(self, bus) -> None:
        await super().start(bus)
        for route in self.routes:
            sub = self.subscribe(route.filter, SubscriptionPolicy(queue_capacity=10_000))
            self.spawn(self._pump(route, sub))

    async def _pump(self, route: RouteRule, sub) -> None:
        host, _, port = route.remote.rpartition(":")
        client: MqttClient | None = None
        pending: tuple[str, bytes] | None = None
        try:
            while True:
                if pending is None:
                    env = await sub.get()
                    body = env.body
                    if isinstance(body, NormalizedMessage):
                        payload = body.to_json().encode()
                    elif isinstance(body, (DerivedEvent, DeadLetter)):
                        payload = json.dumps(body.to_jsonable()).encode()
                    else:
                        payload = json.dumps(body).encode()
                    pending = (route.topic_template.format(address=env.address), payload)
                if client is None or client.closed:
                    client = await _backoff_connect(host, int(port),
                                                    client_id=f"rts-router-{id(self) & 0xFFFF}")
                try:
                    await client.publish(pending[0], pending[1])
                    self.forwarded += 1
                    pending = None
                except (MqttError, ConnectionError, OSError):
                    await asyncio.sleep(RECONNECT_BASE_S)
        finally:
            if client is not None:
                await client.close()
