"""In-process assembly of the whole pipeline, for the demo, bench and tests.

Topology: three brokers (ttn and zigbee feeding the local one over In
bridges), the gateway websocket emulation with its read/write translator,
the real-time server with all stock verticles, and optionally the latency
taps at the four measurement points. Every subsystem also runs standalone
through the CLI; this module only wires the same pieces into one process.
"""

from __future__ import annotations

import asyncio
import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bench import TapCollector, categories_of, stats, write_fig8b, write_table2
from .broker import Broker, BridgeRule
from .decoders import NormalizedMessage
from .rts import EventBus, RealTimeServer
from .rts.monitor import DataMonitor, MonitorClient
from .rts.verticles import (
    FeedHandler,
    MessageFiler,
    RTCoffee,
    ThresholdRule,
    ThresholdWatch,
)
from .simfleet import (
    DeconzWsServer,
    DeviceProfile,
    EmissionLog,
    FleetRunner,
    ScenarioScript,
    SCENARIOS,
    Transports,
    ZigbeeTranslator,
)

log = logging.getLogger(__name__)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


DEFAULT_RULES = [
    ThresholdRule(filter="feed/ttn/#", field="co2", op=">", value=1000, hysteresis=50),
    ThresholdRule(filter="feed/smartplug/#", field="power_w", op="<", value=1.0, hysteresis=5.0),
]


@dataclass
class StackConfig:
    host: str = "127.0.0.1"
    local_port: int = 0
    ttn_port: int = 0
    zigbee_port: int = 0
    ws_port: int = 0
    monitor_port: int = 0
    data_root: Path | None = None  # None -> fresh temporary directory
    rules: list[ThresholdRule] = field(default_factory=lambda: list(DEFAULT_RULES))
    seed: int = 42

    @classmethod
    def from_json(cls, text: str) -> "StackConfig":
        import json

        raw = json.loads(text)
        config = cls(
            host=raw.get("host", "127.0.0.1"),
            local_port=int(raw.get("local_port", 0)),
            ttn_port=int(raw.get("ttn_port", 0)),
            zigbee_port=int(raw.get("zigbee_port", 0)),
            ws_port=int(raw.get("ws_port", 0)),
            monitor_port=int(raw.get("monitor_port", 0)),
            data_root=Path(raw["data_root"]) if raw.get("data_root") else None,
            seed=int(raw.get("seed", 42)),
        )
        if "rules" in raw:
            config.rules = [ThresholdRule.from_jsonable(r) for r in raw["rules"]]
        return config


class Stack:
    def __init__(self, config: StackConfig | None = None, taps: TapCollector | None = None):
        self.config = config or StackConfig()
        self.taps = taps
        self.local: Broker | None = None
        self.ttn: Broker | None = None
        self.zigbee: Broker | None = None
        self.deconz: DeconzWsServer | None = None
        self.translator: ZigbeeTranslator | None = None
        self.rts: RealTimeServer | None = None
        self.feedhandler: FeedHandler | None = None
        self.filer: MessageFiler | None = None
        self.monitor: DataMonitor | None = None
        self.transports: Transports | None = None
        self.data_root: Path | None = None
        self._tmpdir: tempfile.TemporaryDirectory | None = None
        self._tap_client: MonitorClient | None = None
        self._tap_task: asyncio.Task | None = None

    # --- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        cfg = self.config
        taps = self.taps
        if cfg.data_root is None:
            self._tmpdir = tempfile.TemporaryDirectory(prefix="sensert-")
            self.data_root = Path(self._tmpdir.name)
        else:
            self.data_root = Path(cfg.data_root)

        def gateway_observer(from_bridge: bool, topic: str, payload: bytes, t: int) -> None:
            if taps is not None and not from_bridge:
                taps.ingest_raw("gateway", topic, payload, t)

        def local_observer(from_bridge: bool, topic: str, payload: bytes, t: int) -> None:
            if taps is None:
                return
            if not from_bridge:
                # Wi-Fi devices: the aggregating broker is also their first hop
                taps.ingest_raw("gateway", topic, payload, t)
            taps.ingest_raw("broker", topic, payload, t)

        self.ttn = Broker(name="ttn", publish_observer=gateway_observer)
        await self.ttn.start(cfg.host, cfg.ttn_port)
        self.zigbee = Broker(name="zigbee")
        await self.zigbee.start(cfg.host, cfg.zigbee_port)
        self.local = Broker(name="local", publish_observer=local_observer)
        await self.local.start(cfg.host, cfg.local_port)
        self.local.add_bridge(BridgeRule(
            remote=f"{self.ttn.address[0]}:{self.ttn.address[1]}",
            direction="in", filter="v3/+/devices/#"))
        self.local.add_bridge(BridgeRule(
            remote=f"{self.zigbee.address[0]}:{self.zigbee.address[1]}",
            direction="in", filter="zigbee/#"))

        def deconz_tap(topic: str, payload: bytes, t: int) -> None:
            if taps is not None:
                taps.ingest_raw("gateway", topic, payload, t)

        self.deconz = DeconzWsServer(on_push=deconz_tap)
        await self.deconz.start(cfg.host, cfg.ws_port)
        self.translator = ZigbeeTranslator(*self.deconz.address, *self.zigbee.address)
        await self.translator.start()

        def bus_observer(env) -> None:
            body = env.body
            if taps is not None and isinstance(body, NormalizedMessage) and body.sim_t0:
                taps.tap("eventbus", body.device_id, body.sim_t0, env.published_at)

        self.rts = RealTimeServer(EventBus(publish_observer=bus_observer))
        self.feedhandler = FeedHandler(*self.local.address)
        self.filer = MessageFiler(self.data_root)
        self.monitor = DataMonitor(cfg.host, cfg.monitor_port)
        await self.rts.deploy(self.feedhandler)
        await self.rts.deploy(self.filer)
        await self.rts.deploy(ThresholdWatch(list(cfg.rules)))
        await self.rts.deploy(RTCoffee())
        await self.rts.deploy(self.monitor)

        self.transports = Transports(local=self.local.address, ttn=self.ttn.address,
                                     deconz=self.deconz)
        await self.transports.start()
        # wait for the bridges so early emissions are not lost
        for bridge in self.local._bridges:
            await asyncio.wait_for(bridge.connected.wait(), 10)
        await asyncio.sleep(0.2)  # feedhandler + translator subscriptions settle

        if taps is not None:
            self._tap_client = await MonitorClient.connect(*self.monitor.address)
            await self._tap_client.subscribe(["feed/#"])
            self._tap_task = asyncio.create_task(self._client_tap_pump())

    async def _client_tap_pump(self) -> None:
        assert self._tap_client is not None and self.taps is not None
        try:
            while True:
                line = await self._tap_client.next()
                body = line.get("body")
                if (isinstance(body, dict) and body.get("device_id")
                        and isinstance(body.get("sim_t0"), int)):
                    self.taps.tap("client", body["device_id"], body["sim_t0"], now_ms())
        except (ConnectionError, asyncio.CancelledError):
            pass

    async def run_fleet(self, profiles: list[DeviceProfile],
                        scenario: ScenarioScript | None,
                        duration_s: float) -> EmissionLog:
        runner = FleetRunner(profiles, self.transports, scenario=scenario,
                             seed=self.config.seed)
        return await runner.run(duration_s)

    async def drain(self, timeout_s: float = 5.0) -> bool:
        """Wait until the pipeline is quiescent; True if fully drained."""
        deadline = asyncio.get_running_loop().time() + timeout_s
        stable = 0
        while asyncio.get_running_loop().time() < deadline:
            pending = (
                sum(s.pending() for s in self.rts.bus.subscriptions())
                + self.feedhandler.pending()
                + self.local.pending_frames()
                + self.ttn.pending_frames()
                + self.zigbee.pending_frames()
            )
            stable = stable + 1 if pending == 0 else 0
            if stable >= 3:
                await asyncio.sleep(0.3)  # tail for monitor socket flushes
                return True
            await asyncio.sleep(0.05)
        return False

    async def stop(self) -> None:
        if self._tap_task is not None:
            self._tap_task.cancel()
            await asyncio.gather(self._tap_task, return_exceptions=True)
        if self._tap_client is not None:
            await self._tap_client.close()
        if self.transports is not None:
            await self.transports.stop()
        if self.translator is not None:
            await self.translator.stop()
        if self.deconz is not None:
            await self.deconz.stop()
        if self.rts is not None:
            await self.rts.stop()
        for broker in (self.local, self.ttn, self.zigbee):
            if broker is not None:
                await broker.stop()
        if self._tmpdir is not None:
            self._tmpdir.cleanup()

    # --- introspection ----------------------------------------------------------

    def audit(self) -> list[dict]:
        return self.rts.bus.audit()

    def feed_counters(self) -> dict[str, int]:
        fh = self.feedhandler
        return {"received": fh.received, "published": fh.published,
                "deadlettered": fh.deadlettered}

    def filer_line_counts(self) -> dict[str, int]:
        """Lines on disk per device, independent of in-memory counters."""
        counts: dict[str, int] = {}
        if self.data_root is None:
            return counts
        for device_dir in self.data_root.iterdir():
            if not device_dir.is_dir():
                continue
            total = 0
            for day_file in device_dir.rglob("*.jsonl"):
                with day_file.open(encoding="utf-8") as handle:
                    total += sum(1 for line in handle if line.strip())
            counts[device_dir.name] = total
        return counts


# --- demo ------------------------------------------------------------------------------


@dataclass
class DemoResult:
    scenario: str
    detected: list[str]
    ground_truth: list[str]
    events: list[dict]
    audit: list[dict]
    feed: dict[str, int]
    conservation_ok: bool
    drained: bool
    out_dir: Path | None

    @property
    def ok(self) -> bool:
        return self.detected == self.ground_truth and self.conservation_ok


async def run_demo(scenario_name: str = "coffee", seed: int = 42,
                   config: StackConfig | None = None,
                   out_dir: str | Path | None = None) -> DemoResult:
    """Three brokers + RTS + scripted scenario in one process."""
    if scenario_name not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario_name!r}; have {sorted(SCENARIOS)}")
    scenario = SCENARIOS[scenario_name]()
    config = config or StackConfig()
    config.seed = seed
    if scenario.rules:
        config.rules = [ThresholdRule.from_jsonable(r) for r in scenario.rules]

    stack = Stack(config, taps=TapCollector())
    await stack.start()
    events: list[dict] = []
    collector: MonitorClient | None = None
    task: asyncio.Task | None = None
    try:
        collector = await MonitorClient.connect(*stack.monitor.address)
        await collector.subscribe(["event/#"])

        async def collect() -> None:
            while True:
                line = await collector.next()
                body = line.get("body")
                if isinstance(body, dict) and "event_type" in body:
                    events.append(body)

        task = asyncio.create_task(collect())
        await stack.run_fleet([], scenario, scenario.duration_s)
        drained = await stack.drain()

        detected = [e["event_type"] for e in events
                    if e["event_type"] in scenario.watch_events]
        audit = stack.audit()
        feed = stack.feed_counters()
        conservation_ok = (
            all(row["conserved"] for row in audit)
            and feed["received"] == feed["published"] + feed["deadlettered"]
        )
        result = DemoResult(
            scenario=scenario.name, detected=detected,
            ground_truth=list(scenario.ground_truth), events=list(events),
            audit=audit, feed=feed, conservation_ok=conservation_ok,
            drained=drained, out_dir=Path(out_dir) if out_dir else None)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            per_point = {}
            for point in ("gateway", "broker", "eventbus", "client"):
                deltas = stack.taps.deltas(point)
                if deltas:
                    per_point[point] = stats(deltas)
            if per_point:
                write_table2(out / "table2.csv", per_point)
            categories = categories_of(scenario.profiles)
            per_category = {}
            for category in sorted(set(categories.values())):
                ids = {d for d, c in categories.items() if c == category}
                deltas = stack.taps.deltas("client", ids)
                if deltas:
                    per_category[category] = stats(deltas)
            if per_category:
                write_fig8b(out / "fig8b.csv", per_category)
        return result
    finally:
        if task is not None:
            task.cancel()
            await asyncio.gather(task, return_exceptions=True)
        if collector is not None:
            await collector.close()
        await stack.stop()
