"""Verticle behaviour against live brokers and the bus."""

import asyncio
import json

import pytest

from sensert.broker import Broker
from sensert.decoders import NormalizedMessage
from sensert.mqtt_client import MqttClient
from sensert.rts import RealTimeServer
from sensert.rts.monitor import DataMonitor, MonitorClient
from sensert.rts.verticles import (
    FeedHandler,
    MessageFiler,
    MessageRouter,
    RouteRule,
    RTCoffee,
    ThresholdRule,
    ThresholdWatch,
)


def run(coro):
    return asyncio.run(coro)


def plug_msg(device="d1", ts=1_600_000_000_000, **cooked):
    cooked = cooked or {"power_w": 1.0}
    return NormalizedMessage(device, ts, "smartplug", cooked, b"{}", ts)


# --- feedhandler -----------------------------------------------------------------

def test_feedhandler_decodes_and_addresses():
    async def main():
        broker = Broker()
        await broker.start("127.0.0.1", 0)
        rts = RealTimeServer()
        plug_sub = rts.bus.subscribe("feed/smartplug/plug-17")
        dead_sub = rts.bus.subscribe("feed/deadletter")
        fh = FeedHandler(*broker.address)
        await rts.deploy(fh)
        await asyncio.sleep(0.3)

        pub = await MqttClient.connect(*broker.address)
        await pub.publish("tele/plug-17/SENSOR", json.dumps(
            {"ENERGY": {"Power": 42.0}}).encode())
        env = await asyncio.wait_for(plug_sub.get(), 3)
        assert env.body.device_id == "plug-17"
        assert env.body.cooked["power_w"] == 42.0

        await pub.publish("mystery/topic", b"{}")
        env = await asyncio.wait_for(dead_sub.get(), 3)
        assert env.address == "feed/deadletter"
        assert fh.received == 2
        assert fh.published == 1
        assert fh.deadlettered == 1

        await pub.close()
        await rts.stop()
        await broker.stop()

    run(main())


def test_feedhandler_counting_1000():
    async def main():
        broker = Broker()
        await broker.start("127.0.0.1", 0)
        rts = RealTimeServer()
        sub = rts.bus.subscribe("feed/#", owner="counter")
        fh = FeedHandler(*broker.address)
        await rts.deploy(fh)
        await asyncio.sleep(0.3)

        pub = await MqttClient.connect(*broker.address)
        n = 1000
        for i in range(n):
            await pub.publish("tele/p/SENSOR", b'{"ENERGY": {"Power": 1}}')
        count = 0
        try:
            while count < n:
                await asyncio.wait_for(sub.get(), 2)
                count += 1
        except asyncio.TimeoutError:
            pass
        assert count == n
        assert fh.received == n
        assert fh.published + fh.deadlettered == n

        await pub.close()
        await rts.stop()
        await broker.stop()

    run(main())


def test_feedhandler_reconnects_after_broker_restart():
    async def main():
        broker = Broker()
        host, port = await broker.start("127.0.0.1", 0)
        rts = RealTimeServer()
        sub = rts.bus.subscribe("feed/#")
        await rts.deploy(FeedHandler(host, port))
        await asyncio.sleep(0.3)
        await broker.stop()
        await asyncio.sleep(0.2)
        broker2 = Broker()
        await broker2.start(host, port)
        await asyncio.sleep(1.5)  # reconnect backoff

        pub = await MqttClient.connect(host, port)
        await pub.publish("tele/p/SENSOR", b'{"ENERGY": {"Power": 1}}')
        env = await asyncio.wait_for(sub.get(), 3)
        assert env.body.cooked["power_w"] == 1.0
        await pub.close()
        await rts.stop()
        await broker2.stop()

    run(main())


# --- messagefiler -----------------------------------------------------------------

def test_filer_paths_and_latest(tmp_path):
    async def main():
        rts = RealTimeServer()
        filer = MessageFiler(tmp_path)
        await rts.deploy(filer)
        # 2020-06-01T10:00:00Z
        ts1 = 1_590_998_400_000
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=ts1, power_w=1.0))
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=ts1 + 1000, power_w=2.0))
        await asyncio.sleep(0.2)

        day_file = tmp_path / "d1" / "2020" / "06" / "01.jsonl"
        assert day_file.exists()
        lines = day_file.read_text().strip().splitlines()
        assert len(lines) == 2
        latest = json.loads((tmp_path / "d1" / "latest.json").read_text())
        assert latest["ts"] == ts1 + 1000
        assert filer.lines_written == 2
        await rts.stop()

    run(main())


def test_filer_latest_keeps_maximal_ts(tmp_path):
    async def main():
        rts = RealTimeServer()
        await rts.deploy(MessageFiler(tmp_path))
        ts = 1_590_998_400_000
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=ts + 5000))
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=ts))  # older
        await asyncio.sleep(0.2)
        latest = json.loads((tmp_path / "d1" / "latest.json").read_text())
        assert latest["ts"] == ts + 5000
        await rts.stop()

    run(main())


def test_filer_utc_date_rollover(tmp_path):
    async def main():
        rts = RealTimeServer()
        filer = MessageFiler(tmp_path)
        await rts.deploy(filer)
        before_midnight = 1_590_969_599_000  # 2020-05-31T23:59:59Z
        after_midnight = before_midnight + 2000
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=before_midnight))
        rts.bus.publish("feed/smartplug/d1", plug_msg(ts=after_midnight))
        await asyncio.sleep(0.2)
        assert (tmp_path / "d1" / "2020" / "05" / "31.jsonl").exists()
        assert (tmp_path / "d1" / "2020" / "06" / "01.jsonl").exists()
        await rts.stop()

    run(main())


def test_filer_ignores_deadletters(tmp_path):
    async def main():
        rts = RealTimeServer()
        filer = MessageFiler(tmp_path)
        await rts.deploy(filer)
        from sensert.decoders import DeadLetter
        rts.bus.publish("feed/deadletter", DeadLetter("t", b"x", 1, "no decoder"))
        await asyncio.sleep(0.1)
        assert filer.lines_written == 0
        await rts.stop()

    run(main())


# --- thresholdwatch ------------------------------------------------------------------

def test_threshold_edge_semantics_hand_trace():
    """Readings 900, 1100, 1200, 950 with >1000 hysteresis 50: one crossed
    (at 1100), one cleared (at 950)."""

    async def main():
        rts = RealTimeServer()
        events = rts.bus.subscribe("event/threshold/#")
        watch = ThresholdWatch([ThresholdRule("feed/#", "co2", ">", 1000, 50)])
        await rts.deploy(watch)
        ts = 1_600_000_000_000
        for i, value in enumerate([900, 1100, 1200, 950]):
            rts.bus.publish("feed/ttn/co2-1", NormalizedMessage(
                "co2-1", ts + i, "ttn", {"co2": value}, b"{}", ts + i))
        await asyncio.sleep(0.2)
        got = []
        while (env := events.get_nowait()) is not None:
            got.append((env.body.event_type, env.body.attributes["value"]))
        assert got == [("threshold-crossed", 1100), ("threshold-cleared", 950)]
        await rts.stop()

    run(main())


def test_threshold_outage_rule():
    async def main():
        rts = RealTimeServer()
        events = rts.bus.subscribe("event/threshold/#")
        watch = ThresholdWatch([ThresholdRule("feed/smartplug/#", "power_w", "<", 1.0)])
        await rts.deploy(watch)
        for value in [35.0, 0.0, 0.0, 0.0]:
            rts.bus.publish("feed/smartplug/p1", plug_msg(power_w=value))
        await asyncio.sleep(0.2)
        got = [env.body.event_type for env in iter(events.get_nowait, None)]
        assert got == ["threshold-crossed"]  # once, not repeated
        await rts.stop()

    run(main())


def test_threshold_constant_below_no_events():
    async def main():
        rts = RealTimeServer()
        events = rts.bus.subscribe("event/threshold/#")
        await rts.deploy(ThresholdWatch([ThresholdRule("feed/#", "co2", ">", 1000)]))
        for _ in range(5):
            rts.bus.publish("feed/ttn/c", NormalizedMessage(
                "c", 1, "ttn", {"co2": 500}, b"{}", 1))
        await asyncio.sleep(0.1)
        assert events.get_nowait() is None
        await rts.stop()

    run(main())


def test_threshold_missing_field_counted_skipped():
    async def main():
        rts = RealTimeServer()
        watch = ThresholdWatch([ThresholdRule("feed/#", "absent_field", ">", 1)])
        await rts.deploy(watch)
        rts.bus.publish("feed/smartplug/p", plug_msg())
        await asyncio.sleep(0.1)
        assert watch.missing_field == 1
        await rts.stop()

    run(main())


def test_threshold_at_most_one_crossed_between_cleareds():
    async def main():
        rts = RealTimeServer()
        events = rts.bus.subscribe("event/threshold/#")
        await rts.deploy(ThresholdWatch([ThresholdRule("feed/#", "co2", ">", 1000, 50)]))
        import random as _r
        rng = _r.Random(3)
        ts = 1
        for _ in range(300):
            rts.bus.publish("feed/ttn/c", NormalizedMessage(
                "c", ts, "ttn", {"co2": rng.choice([800, 900, 1100, 1300, 940, 950])},
                b"{}", ts))
            ts += 1
        await asyncio.sleep(0.3)
        got = [env.body.event_type for env in iter(events.get_nowait, None)]
        for a, b in zip(got, got[1:]):
            assert a != b, "crossed/cleared must alternate"
        await rts.stop()

    run(main())


# --- rtcoffee verticle -----------------------------------------------------------------

def test_rtcoffee_verticle_emits_on_bus():
    async def main():
        rts = RealTimeServer()
        events = rts.bus.subscribe("event/coffee/#")
        await rts.deploy(RTCoffee())
        ts = 1_600_000_000_000
        weights = [2.5] * 6 + [2.25] * 6
        for i, w in enumerate(weights):
            rts.bus.publish("feed/coffee/pot-1", NormalizedMessage(
                "pot-1", ts + i * 100, "coffee",
                {"weight_kg": w, "grinder_w": 0.0, "brewer_w": 0.0}, b"{}", ts + i * 100))
        await asyncio.sleep(0.2)
        got = [env.body.event_type for env in iter(events.get_nowait, None)]
        assert "pot-poured" in got
        await rts.stop()

    run(main())


# --- messagerouter -----------------------------------------------------------------------

def test_router_republishes_to_remote():
    async def main():
        remote = Broker(name="peer")
        await remote.start("127.0.0.1", 0)
        rts = RealTimeServer()
        router = MessageRouter([RouteRule(
            filter="feed/ttn/#", remote=f"127.0.0.1:{remote.address[1]}")])
        await rts.deploy(router)

        sub = await MqttClient.connect(*remote.address)
        await sub.subscribe(["normalized/#"])
        await asyncio.sleep(0.3)

        msg = NormalizedMessage("co2-1", 1, "ttn", {"co2": 700}, b"{}", 1)
        rts.bus.publish("feed/ttn/co2-1", msg)
        topic, payload, _ = await sub.next_message(timeout=3)
        assert topic == "normalized/feed/ttn/co2-1"
        decoded = json.loads(payload)
        assert decoded["device_id"] == "co2-1"
        assert decoded["cooked"]["co2"] == 700

        rts.bus.publish("feed/smartplug/x", plug_msg())  # not matched by route
        with pytest.raises(asyncio.TimeoutError):
            await sub.next_message(timeout=0.3)

        await sub.close()
        await rts.stop()
        await remote.stop()

    run(main())


def test_router_buffers_while_remote_down_then_flushes_in_order():
    async def main():
        probe = await asyncio.start_server(lambda r, w: None, "127.0.0.1", 0)
        port = probe.sockets[0].getsockname()[1]
        probe.close()
        await probe.wait_closed()

        rts = RealTimeServer()
        router = MessageRouter([RouteRule(filter="feed/#", remote=f"127.0.0.1:{port}")])
        await rts.deploy(router)
        for i in range(20):
            rts.bus.publish("feed/ttn/c", NormalizedMessage(
                "c", 1 + i, "ttn", {"n": i}, b"{}", 1 + i))
        await asyncio.sleep(0.7)  # remote still down, envelopes buffered
        assert router.forwarded == 0

        remote = Broker(name="late-peer")
        await remote.start("127.0.0.1", port)
        sub = await MqttClient.connect(*remote.address)
        await sub.subscribe(["#"])
        got = []
        for _ in range(20):
            _, payload, _ = await sub.next_message(timeout=5)
            got.append(json.loads(payload)["cooked"]["n"])
        assert got == list(range(20))

        await sub.close()
        await rts.stop()
        await remote.stop()

    run(main())


# --- datamonitor ----------------------------------------------------------------------------

def test_datamonitor_subscribe_and_receive():
    async def main():
        rts = RealTimeServer()
        monitor = DataMonitor()
        await rts.deploy(monitor)
        client = await MonitorClient.connect(*monitor.address)
        ack = await client.subscribe(["event/coffee/#"])
        assert ack.get("ok") == "subscribe"

        await rts.deploy(RTCoffee())
        ts = 1_600_000_000_000
        for i, w in enumerate([2.5] * 6 + [2.25] * 6):
            rts.bus.publish("feed/coffee/pot-1", NormalizedMessage(
                "pot-1", ts + i * 100, "coffee",
                {"weight_kg": w, "grinder_w": 0.0, "brewer_w": 0.0}, b"{}", ts + i * 100))
        while True:
            line = await asyncio.wait_for(client.next(), 3)
            if line.get("body", {}).get("event_type") == "pot-poured":
                assert line["address"] == "event/coffee/pot-1"
                assert "published_at" in line
                break
        await client.close()
        await rts.stop()

    run(main())


def test_datamonitor_no_subscription_no_lines():
    async def main():
        rts = RealTimeServer()
        monitor = DataMonitor()
        await rts.deploy(monitor)
        client = await MonitorClient.connect(*monitor.address)
        rts.bus.publish("event/threshold/x", plug_msg())
        with pytest.raises(asyncio.TimeoutError):
            await client.next(timeout=0.3)
        await client.close()
        await rts.stop()

    run(main())


def test_datamonitor_two_clients_same_filter():
    async def main():
        rts = RealTimeServer()
        monitor = DataMonitor()
        await rts.deploy(monitor)
        a = await MonitorClient.connect(*monitor.address)
        b = await MonitorClient.connect(*monitor.address)
        await a.subscribe(["feed/#"])
        await b.subscribe(["feed/#"])
        rts.bus.publish("feed/smartplug/p", plug_msg())
        la = await a.next(timeout=3)
        lb = await b.next(timeout=3)
        assert la["body"]["device_id"] == lb["body"]["device_id"] == "d1"
        await a.close()
        await b.close()
        await rts.stop()

    run(main())


def test_datamonitor_malformed_request_keeps_connection():
    async def main():
        rts = RealTimeServer()
        monitor = DataMonitor()
        await rts.deploy(monitor)
        client = await MonitorClient.connect(*monitor.address)
        await client.send({"method": "dance"})
        err = await client.next(timeout=2)
        assert "error" in err
        # still alive: a valid subscribe works afterwards
        ack = await client.subscribe(["feed/#"])
        assert ack.get("ok") == "subscribe"
        await client.close()
        await rts.stop()

    run(main())


def test_datamonitor_unsubscribe():
    async def main():
        rts = RealTimeServer()
        monitor = DataMonitor()
        await rts.deploy(monitor)
        client = await MonitorClient.connect(*monitor.address)
        await client.subscribe(["feed/#"])
        rts.bus.publish("feed/smartplug/p", plug_msg())
        assert (await client.next(timeout=2))["body"]["device_id"] == "d1"
        await client.unsubscribe(["feed/#"])
        rts.bus.publish("feed/smartplug/p", plug_msg())
        with pytest.raises(asyncio.TimeoutError):
            await client.next(timeout=0.3)
        await client.close()
        await rts.stop()

    run(main())
